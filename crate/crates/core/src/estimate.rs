//! Exact correlation functions and QPDs, their trajectory estimators, and
//! the Leggett–Garg functional.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{decode, TrajectoryDistribution, TrajectoryRecord, CHUNK_SIZE};
use crate::qcore::{CMatrix, C64, ONE, ZERO};
use crate::qmodel::{heisenberg, Channel, DensityMatrix, Observable};
use crate::serde_complex;
use crate::weights::WeightVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    #[serde(with = "serde_complex")]
    pub value: C64,
    pub sem_re: f64,
    pub sem_im: f64,
    pub n: usize,
}

impl Estimate {
    /// Whether `target` lies within `k` standard errors in both components.
    pub fn within(&self, target: C64, k: f64) -> bool {
        (self.value.re - target.re).abs() <= k * self.sem_re
            && (self.value.im - target.im).abs() <= k * self.sem_im
    }
}

/// Mean and SEM of per-trajectory terms. Sums run over fixed-size chunks in
/// parallel and are merged in chunk order, so results are bit-stable.
pub fn mean_and_sem(terms: &[C64]) -> Result<Estimate> {
    let n = terms.len();
    if n == 0 {
        return Err(Error::InvalidParameter("no trajectories".into()));
    }
    let sum = chunked_sum(terms, |z| (z.re, z.im));
    let mean = C64::new(sum.0 / n as f64, sum.1 / n as f64);
    let (sem_re, sem_im) = if n > 1 {
        let sq = chunked_sum(terms, |z| ((z.re - mean.re).powi(2), (z.im - mean.im).powi(2)));
        let denom = (n - 1) as f64 * n as f64;
        ((sq.0 / denom).sqrt(), (sq.1 / denom).sqrt())
    } else {
        (0.0, 0.0)
    };
    Ok(Estimate {
        value: mean,
        sem_re,
        sem_im,
        n,
    })
}

fn chunked_sum(terms: &[C64], f: impl Fn(&C64) -> (f64, f64) + Sync) -> (f64, f64) {
    let parts: Vec<(f64, f64)> = terms
        .par_chunks(CHUNK_SIZE)
        .map(|c| c.iter().map(&f).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1)))
        .collect();
    parts.into_iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1))
}

/// Per-time cumulative evolutions `𝒰_{t_1→t_n}`; the first time has none.
fn cumulative(dim: usize, channels: &[Channel]) -> Result<Vec<Channel>> {
    let mut out = vec![Channel::identity(dim)?];
    for ch in channels {
        let next = out.last().unwrap().then(ch)?;
        out.push(next);
    }
    Ok(out)
}

fn check_lengths(n_times: usize, channels: &[Channel]) -> Result<()> {
    if n_times == 0 || channels.len() + 1 != n_times {
        return Err(Error::ShapeMismatch(format!(
            "{n_times} times need {} evolutions, got {}",
            n_times.saturating_sub(1),
            channels.len()
        )));
    }
    Ok(())
}

/// `Tr[ρ A⁽¹⁾(t₁) ⋯ A⁽ᴺ⁾(t_N)]` with Heisenberg-picture operators.
pub fn exact_correlation(rho: &DensityMatrix, observables: &[Observable], channels: &[Channel]) -> Result<C64> {
    check_lengths(observables.len(), channels)?;
    let cum = cumulative(rho.dim(), channels)?;
    let mut prod = rho.matrix().clone();
    for (a, u) in observables.iter().zip(&cum) {
        prod = prod.compose(heisenberg(a, u)?.matrix())?;
    }
    prod.trace()
}

/// Heisenberg-picture projectors per time.
fn evolved_projectors(dim: usize, projector_lists: &[Vec<CMatrix>], channels: &[Channel]) -> Result<Vec<Vec<CMatrix>>> {
    check_lengths(projector_lists.len(), channels)?;
    let cum = cumulative(dim, channels)?;
    projector_lists
        .iter()
        .zip(&cum)
        .map(|(list, u)| {
            let u = u
                .unitary_matrix()
                .ok_or_else(|| Error::InvalidChannel("oracle evolutions must be unitary".into()))?;
            list.iter()
                .map(|p| {
                    if p.shape() != (dim, dim) {
                        return Err(Error::DimensionMismatch {
                            op: "exact_qpd",
                            left: (dim, dim),
                            right: p.shape(),
                        });
                    }
                    Ok(p.conjugate_by(&u.adjoint()))
                })
                .collect()
        })
        .collect()
}

/// Quasi-probabilities indexed by one projector per time.
#[derive(Debug, Clone, PartialEq)]
pub struct QpdTable {
    index_shape: Vec<usize>,
    values: Vec<C64>,
    /// `(sem_re, sem_im)` per entry for sampled tables.
    sems: Option<Vec<(f64, f64)>>,
    n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpdEntry {
    pub index: Vec<usize>,
    #[serde(with = "serde_complex")]
    pub value: C64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sem_re: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sem_im: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpdTableJson {
    pub index_shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n: Option<usize>,
    pub entries: Vec<QpdEntry>,
}

impl QpdTable {
    pub fn exact(index_shape: Vec<usize>, values: Vec<C64>) -> Result<Self> {
        if values.len() != index_shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch("QPD values do not match the index shape".into()));
        }
        Ok(Self {
            index_shape,
            values,
            sems: None,
            n: None,
        })
    }

    pub fn sampled(index_shape: Vec<usize>, estimates: &[Estimate]) -> Result<Self> {
        let mut t = Self::exact(index_shape, estimates.iter().map(|e| e.value).collect())?;
        t.sems = Some(estimates.iter().map(|e| (e.sem_re, e.sem_im)).collect());
        t.n = estimates.first().map(|e| e.n);
        Ok(t)
    }

    pub fn index_shape(&self) -> &[usize] {
        &self.index_shape
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn get(&self, index: &[usize]) -> C64 {
        self.values[crate::protocol::encode(&self.index_shape, index)]
    }

    pub fn sem(&self, index: &[usize]) -> Option<(f64, f64)> {
        let k = crate::protocol::encode(&self.index_shape, index);
        self.sems.as_ref().map(|s| s[k])
    }

    pub fn is_sampled(&self) -> bool {
        self.sems.is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<usize>, C64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(k, &v)| (decode(&self.index_shape, k), v))
    }

    pub fn sum(&self) -> C64 {
        self.values.iter().sum()
    }

    /// `√(Σ SEM²)` per component over all entries; zero for exact tables.
    pub fn aggregate_sem(&self) -> (f64, f64) {
        match &self.sems {
            None => (0.0, 0.0),
            Some(s) => {
                let (a, b) = s.iter().fold((0.0, 0.0), |acc, (r, i)| (acc.0 + r * r, acc.1 + i * i));
                (a.sqrt(), b.sqrt())
            }
        }
    }

    pub fn to_json(&self) -> QpdTableJson {
        QpdTableJson {
            index_shape: self.index_shape.clone(),
            n: self.n,
            entries: self
                .iter()
                .enumerate()
                .map(|(k, (index, value))| QpdEntry {
                    index,
                    value,
                    sem_re: self.sems.as_ref().map(|s| s[k].0),
                    sem_im: self.sems.as_ref().map(|s| s[k].1),
                })
                .collect(),
        }
    }
}

/// `𝒬_𝒊 = Tr[ρ Π_{i₁}(t₁) ⋯ Π_{i_N}(t_N)]` for every index tuple.
pub fn exact_qpd(rho: &DensityMatrix, projector_lists: &[Vec<CMatrix>], channels: &[Channel]) -> Result<QpdTable> {
    let evolved = evolved_projectors(rho.dim(), projector_lists, channels)?;
    let shape: Vec<usize> = evolved.iter().map(Vec::len).collect();
    let size: usize = shape.iter().product();
    let values = (0..size)
        .map(|k| {
            let idx = decode(&shape, k);
            let mut prod = rho.matrix().clone();
            for (list, &i) in evolved.iter().zip(&idx) {
                prod = &prod * &list[i];
            }
            prod.trace()
        })
        .collect::<Result<Vec<_>>>()?;
    QpdTable::exact(shape, values)
}

/// `Σ_𝒊 (Π_n a⁽ⁿ⁾_{i_n}) 𝒬_𝒊`.
pub fn correlation_from_qpd(q: &QpdTable, eigenvalue_lists: &[Vec<f64>]) -> Result<C64> {
    let shape: Vec<usize> = eigenvalue_lists.iter().map(Vec::len).collect();
    if shape != q.index_shape {
        return Err(Error::ShapeMismatch(format!(
            "eigenvalue shape {shape:?} vs QPD shape {:?}",
            q.index_shape
        )));
    }
    Ok(q.iter()
        .map(|(idx, v)| {
            let w: f64 = idx.iter().zip(eigenvalue_lists).map(|(&i, a)| a[i]).product();
            v * w
        })
        .sum())
}

fn check_weights(records: &[TrajectoryRecord], weights: &[&WeightVector]) -> Result<()> {
    for (k, r) in records.iter().enumerate() {
        if r.outcomes.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "record {k} has {} outcomes but {} weight vectors were given",
                r.outcomes.len(),
                weights.len()
            )));
        }
        for (n, (&m, w)) in r.outcomes.iter().zip(weights).enumerate() {
            if m >= w.gammas.len() {
                return Err(Error::ShapeMismatch(format!(
                    "record {k} step {} outcome {m} exceeds {} weights",
                    n + 1,
                    w.gammas.len()
                )));
            }
        }
    }
    Ok(())
}

fn trajectory_term(outcomes: &[usize], weights: &[&WeightVector]) -> C64 {
    outcomes.iter().zip(weights).fold(ONE, |acc, (&m, w)| acc * w.gammas[m])
}

/// `Π_n gamma_max⁽ⁿ⁾`, the bound on every trajectory term.
pub fn term_bound(weights: &[WeightVector]) -> f64 {
    weights.iter().map(|w| w.gamma_max).product()
}

/// Per-trajectory terms `Π_n γ_{m_n}(A⁽ⁿ⁾)`.
pub fn correlation_terms(records: &[TrajectoryRecord], weights: &[WeightVector]) -> Result<Vec<C64>> {
    let refs: Vec<&WeightVector> = weights.iter().collect();
    check_weights(records, &refs)?;
    Ok(records
        .par_iter()
        .map(|r| trajectory_term(&r.outcomes, &refs))
        .collect())
}

/// Ensemble average of `Π_n γ_{m_n}(A⁽ⁿ⁾)` with SEM.
pub fn estimate_correlation(records: &[TrajectoryRecord], weights: &[WeightVector]) -> Result<Estimate> {
    mean_and_sem(&correlation_terms(records, weights)?)
}

fn qpd_shape(weight_table: &[Vec<WeightVector>]) -> Result<Vec<usize>> {
    if weight_table.is_empty() || weight_table.iter().any(Vec::is_empty) {
        return Err(Error::ShapeMismatch("missing weight vectors for some time".into()));
    }
    Ok(weight_table.iter().map(Vec::len).collect())
}

/// Per-trajectory terms for every QPD index, row-major per record.
fn qpd_terms(records: &[TrajectoryRecord], weight_table: &[Vec<WeightVector>]) -> Result<(Vec<usize>, Vec<Vec<C64>>)> {
    let shape = qpd_shape(weight_table)?;
    let size: usize = shape.iter().product();
    let tuples: Vec<Vec<&WeightVector>> = (0..size)
        .map(|k| {
            decode(&shape, k)
                .iter()
                .zip(weight_table)
                .map(|(&i, row)| &row[i])
                .collect()
        })
        .collect();
    for t in &tuples {
        check_weights(records, t)?;
    }
    // One pass over records fills every index; outcomes are shared.
    let per_record: Vec<Vec<C64>> = records
        .par_iter()
        .map(|r| tuples.iter().map(|t| trajectory_term(&r.outcomes, t)).collect())
        .collect();
    let columns = (0..size)
        .map(|k| per_record.iter().map(|row| row[k]).collect())
        .collect();
    Ok((shape, columns))
}

/// Sampled QPD: entry 𝒊 is the mean of `Π_n γ_{m_n}(Π⁽ⁿ⁾_{i_n})`.
pub fn estimate_qpd(records: &[TrajectoryRecord], weight_table: &[Vec<WeightVector>]) -> Result<QpdTable> {
    let (shape, columns) = qpd_terms(records, weight_table)?;
    let estimates = columns.iter().map(|c| mean_and_sem(c)).collect::<Result<Vec<_>>>()?;
    QpdTable::sampled(shape, &estimates)
}

/// Mean estimator value under a tabulated outcome distribution.
pub fn expected_correlation(dist: &TrajectoryDistribution, weights: &[WeightVector]) -> Result<C64> {
    let refs: Vec<&WeightVector> = weights.iter().collect();
    expected_term(dist, &refs)
}

fn expected_term(dist: &TrajectoryDistribution, weights: &[&WeightVector]) -> Result<C64> {
    if dist.shape().len() != weights.len() || dist.shape().iter().zip(weights).any(|(&n, w)| n != w.gammas.len()) {
        return Err(Error::ShapeMismatch("distribution and weights disagree".into()));
    }
    Ok(dist
        .iter()
        .map(|(t, p)| trajectory_term(&t, weights) * p)
        .sum())
}

/// QPD the estimator converges to under a tabulated (possibly noisy)
/// outcome distribution.
pub fn expected_qpd(dist: &TrajectoryDistribution, weight_table: &[Vec<WeightVector>]) -> Result<QpdTable> {
    let shape = qpd_shape(weight_table)?;
    let size: usize = shape.iter().product();
    let values = (0..size)
        .map(|k| {
            let t: Vec<&WeightVector> = decode(&shape, k)
                .iter()
                .zip(weight_table)
                .map(|(&i, row)| &row[i])
                .collect();
            expected_term(dist, &t)
        })
        .collect::<Result<Vec<_>>>()?;
    QpdTable::exact(shape, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub time: usize,
    pub values: Vec<f64>,
    /// Largest imaginary part among the summed entries.
    pub imag_residue: f64,
}

/// Sums the table over every time except `keep_time`.
pub fn marginal(q: &QpdTable, keep_time: usize) -> Result<Marginal> {
    if keep_time >= q.index_shape.len() {
        return Err(Error::InvalidParameter(format!("time {keep_time} out of range")));
    }
    let mut acc = vec![ZERO; q.index_shape[keep_time]];
    for (idx, v) in q.iter() {
        acc[idx[keep_time]] += v;
    }
    Ok(Marginal {
        time: keep_time,
        imag_residue: acc.iter().map(|z| z.im.abs()).fold(0.0, f64::max),
        values: acc.iter().map(|z| z.re).collect(),
    })
}

/// `Tr[ρ Π_i(t_n)]`: populations at time `n` with no earlier measurement.
pub fn populations(rho: &DensityMatrix, projectors: &[CMatrix], channels_before: &[Channel]) -> Result<Vec<f64>> {
    let mut state = rho.matrix().clone();
    for ch in channels_before {
        state = ch.apply_to(&state)?;
    }
    projectors
        .iter()
        .map(|p| Ok(state.compose(p)?.trace()?.re))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LgiResult {
    pub k: f64,
    /// `⟨E₁E₂⟩, ⟨E₂E₃⟩, ⟨E₁E₃⟩`.
    pub terms: [f64; 3],
    pub classical_bound: f64,
}

/// `E_{t₁}(i) = (−1)^i`, `E_{t₂} = 1`, `E_{t₃}(i) = (−1)^i`.
pub fn standard_e_choices() -> [[f64; 2]; 3] {
    [[1.0, -1.0], [1.0, 1.0], [1.0, -1.0]]
}

/// Coefficient of `Re 𝒬_𝒊` in K, indexed row-major over `(i₁, i₂, i₃)`.
fn lgi_coefficients(e: &[[f64; 2]; 3]) -> [[f64; 3]; 8] {
    let mut out = [[0.0; 3]; 8];
    for (k, row) in out.iter_mut().enumerate() {
        let (a, b, c) = (k >> 2 & 1, k >> 1 & 1, k & 1);
        *row = [e[0][a] * e[1][b], e[1][b] * e[2][c], e[0][a] * e[2][c]];
    }
    out
}

fn check_binary3(shape: &[usize]) -> Result<()> {
    if shape != [2, 2, 2] {
        return Err(Error::ShapeMismatch(format!("LGI needs three binary times, got {shape:?}")));
    }
    Ok(())
}

/// `K = ⟨E₁E₂⟩ + ⟨E₂E₃⟩ − ⟨E₁E₃⟩` from the real part of a three-time QPD.
pub fn lgi_k(q: &QpdTable, e: &[[f64; 2]; 3]) -> Result<LgiResult> {
    check_binary3(&q.index_shape)?;
    let coef = lgi_coefficients(e);
    let mut terms = [0.0; 3];
    for (k, v) in q.values.iter().enumerate() {
        for j in 0..3 {
            terms[j] += coef[k][j] * v.re;
        }
    }
    Ok(LgiResult {
        k: terms[0] + terms[1] - terms[2],
        terms,
        classical_bound: 1.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LgiEstimate {
    /// Mean of the per-trajectory K contributions; imaginary part unused.
    pub k: Estimate,
    pub terms: [Estimate; 3],
}

/// K from trajectories, with the SEM of the per-record K contributions.
pub fn estimate_lgi(records: &[TrajectoryRecord], weight_table: &[Vec<WeightVector>], e: &[[f64; 2]; 3]) -> Result<LgiEstimate> {
    let (shape, columns) = qpd_terms(records, weight_table)?;
    check_binary3(&shape)?;
    let coef = lgi_coefficients(e);
    let combine = |f: &dyn Fn(&[f64; 3]) -> f64| -> Result<Estimate> {
        let terms: Vec<C64> = (0..records.len())
            .map(|r| C64::new((0..8).map(|k| f(&coef[k]) * columns[k][r].re).sum(), 0.0))
            .collect();
        mean_and_sem(&terms)
    };
    Ok(LgiEstimate {
        k: combine(&|c| c[0] + c[1] - c[2])?,
        terms: [combine(&|c| c[0])?, combine(&|c| c[1])?, combine(&|c| c[2])?],
    })
}

/// Inclusive θ grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaGrid {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl Default for ThetaGrid {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: std::f64::consts::PI,
            count: 41,
        }
    }
}

impl ThetaGrid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if self.count == 0 || !self.start.is_finite() || !self.stop.is_finite() {
            return Err(Error::InvalidParameter("θ grid needs a finite range and count ≥ 1".into()));
        }
        if self.count == 1 {
            return Ok(vec![self.start]);
        }
        let step = (self.stop - self.start) / (self.count - 1) as f64;
        Ok((0..self.count)
            .map(|k| if k + 1 == self.count { self.stop } else { self.start + step * k as f64 })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    #[serde(with = "serde_complex")]
    pub exact: C64,
    pub estimate: Option<Estimate>,
}

/// Evaluates `exact` and, if given, `sampled` (with the grid index) at each
/// grid point.
pub fn sweep<E, S>(grid: &ThetaGrid, exact: E, sampled: Option<S>) -> Result<Vec<SweepRow>>
where
    E: Fn(f64) -> Result<C64>,
    S: Fn(f64, usize) -> Result<Estimate>,
{
    grid.points()?
        .into_iter()
        .enumerate()
        .map(|(k, theta)| {
            Ok(SweepRow {
                theta,
                exact: exact(theta)?,
                estimate: sampled.as_ref().map(|f| f(theta, k)).transpose()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::povm::builtin_set;
    use crate::protocol::{exact_distribution, sample, Protocol, Step};
    use crate::qcore::c;
    use crate::qmodel::{random_unitary, rx, ry, RyConvention};
    use crate::weights::{weights_for, Objective, WeightScope};
    use proptest::prelude::*;

    fn z() -> Observable {
        Observable::pauli_z()
    }

    fn zproj() -> Vec<CMatrix> {
        z().projectors().to_vec()
    }

    fn w(set: &str, a: &str, scope: WeightScope) -> WeightVector {
        weights_for(
            &builtin_set(set).unwrap(),
            &Observable::identity(2).unwrap(),
            &Observable::named(a, 2).unwrap(),
            scope,
            Objective::MinInfNorm,
        )
        .unwrap()
    }

    #[test]
    fn single_time_z_on_plus() {
        let v = exact_correlation(&DensityMatrix::plus(), &[z()], &[]).unwrap();
        assert!(v.norm() < 1e-15);
    }

    #[test]
    fn two_time_closed_form() {
        for theta in [0.0, 0.3 * PI, 1.1, PI] {
            let v = exact_correlation(&DensityMatrix::plus(), &[z(), z()], &[rx(theta)]).unwrap();
            assert!((v - c(theta.cos(), -theta.sin())).norm() < 1e-12);
        }
        let v = exact_correlation(&DensityMatrix::plus(), &[z(), z()], &[rx(0.0)]).unwrap();
        assert_eq!(v, ONE);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(exact_correlation(&DensityMatrix::plus(), &[z(), z()], &[]).is_err());
    }

    #[test]
    fn two_time_qpd_entry() {
        let theta = 0.3 * PI;
        let q = exact_qpd(&DensityMatrix::plus(), &[zproj(), zproj()], &[rx(theta)]).unwrap();
        let expected = C64::from_polar((theta / 2.0).cos() / 2.0, -theta / 2.0);
        assert!((q.get(&[0, 0]) - expected).norm() < 1e-12);
        assert!((q.sum() - ONE).norm() < 1e-12);
    }

    #[test]
    fn identical_times_are_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rho = DensityMatrix::random(&mut rng, 2);
        let q = exact_qpd(&rho, &[zproj(), zproj()], &[Channel::identity(2).unwrap()]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expected = if i == j { rho.matrix().get(i, i) } else { ZERO };
                assert!((q.get(&[i, j]) - expected).norm() < 1e-15);
            }
        }
        let c = correlation_from_qpd(&q, &[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        assert!((c - ONE).norm() < 1e-12);
        let one = correlation_from_qpd(&q, &[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!((one - ONE).norm() < 1e-12);
    }

    #[test]
    fn lgi_closed_form() {
        for (theta, conv) in [(0.74 * PI, RyConvention::Standard), (0.0, RyConvention::Standard)] {
            let q = exact_qpd(
                &DensityMatrix::plus(),
                &[zproj(), zproj(), zproj()],
                &[rx(theta), ry(theta * theta, conv)],
            )
            .unwrap();
            let k = lgi_k(&q, &standard_e_choices()).unwrap();
            let t2 = theta * theta;
            let closed = -t2.sin() - theta.cos() * t2.cos();
            assert!((k.k - closed).abs() < 1e-12);
            assert_eq!(k.k, k.terms[0] + k.terms[1] - k.terms[2]);
        }
    }

    #[test]
    fn lgi_degenerate_theta_is_minus_one() {
        let id = Channel::identity(2).unwrap();
        let q = exact_qpd(&DensityMatrix::plus(), &[zproj(), zproj(), zproj()], &[id.clone(), id]).unwrap();
        assert_eq!(lgi_k(&q, &standard_e_choices()).unwrap().k, -1.0);
        let two = exact_qpd(&DensityMatrix::plus(), &[zproj(), zproj()], &[rx(0.0)]).unwrap();
        assert!(lgi_k(&two, &standard_e_choices()).is_err());
    }

    #[test]
    fn classical_ceiling_for_diagonal_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p: f64 = rand::Rng::random(&mut rng);
            let rho = DensityMatrix::new(CMatrix::diagonal(&[c(p, 0.0), c(1.0 - p, 0.0)])).unwrap();
            let id = Channel::identity(2).unwrap();
            let q = exact_qpd(&rho, &[zproj(), zproj(), zproj()], &[id.clone(), id]).unwrap();
            for e in [standard_e_choices(), [[1.0, -1.0], [1.0, -1.0], [1.0, -1.0]]] {
                assert!(lgi_k(&q, &e).unwrap().k <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn constant_weights_give_exact_one() {
        let records: Vec<TrajectoryRecord> = (0..50)
            .map(|k| TrajectoryRecord { outcomes: vec![k % 2] })
            .collect();
        let ones = WeightVector::new(
            "z",
            crate::weights::DiagonalOperator { label: "I".into(), diagonal: vec![1.0, 1.0] },
            crate::weights::DiagonalOperator { label: "I".into(), diagonal: vec![1.0, 1.0] },
            WeightScope::TraceOnly,
            vec![ONE, ONE],
        );
        let e = estimate_correlation(&records, &[ones]).unwrap();
        assert_eq!(e.value, ONE);
        assert_eq!((e.sem_re, e.sem_im), (0.0, 0.0));
    }

    fn two_time_protocol(theta: f64) -> Protocol {
        Protocol::new(
            DensityMatrix::plus(),
            vec![
                Step::new(Channel::identity(2).unwrap(), builtin_set("zy").unwrap()),
                Step::new(rx(theta), builtin_set("z").unwrap()),
            ],
            true,
        )
        .unwrap()
    }

    #[test]
    fn sampled_correlation_matches_oracle() {
        let theta = 0.3 * PI;
        let records = sample(&two_time_protocol(theta), 100_000, 17).unwrap();
        let weights = [w("zy", "Z", WeightScope::Full), w("z", "Z", WeightScope::TraceOnly)];
        let e = estimate_correlation(&records, &weights).unwrap();
        assert!(e.within(c(theta.cos(), -theta.sin()), 4.0), "{e:?}");
        let bound = term_bound(&weights);
        for t in correlation_terms(&records, &weights).unwrap() {
            assert!(t.norm() <= bound + 1e-12);
        }
        // Expected value under the exact distribution is the oracle.
        let dist = exact_distribution(&two_time_protocol(theta)).unwrap();
        let mean = expected_correlation(&dist, &weights).unwrap();
        assert!((mean - c(theta.cos(), -theta.sin())).norm() < 1e-12);
    }

    #[test]
    fn sampled_qpd_matches_oracle() {
        let theta = 0.3 * PI;
        let p = Protocol::new(
            DensityMatrix::plus(),
            vec![
                Step::new(Channel::identity(2).unwrap(), builtin_set("zyx").unwrap()),
                Step::new(rx(theta), builtin_set("z").unwrap()),
            ],
            true,
        )
        .unwrap();
        let table = vec![
            vec![w("zyx", "P0", WeightScope::Full), w("zyx", "P1", WeightScope::Full)],
            vec![w("z", "P0", WeightScope::TraceOnly), w("z", "P1", WeightScope::TraceOnly)],
        ];
        let records = sample(&p, 100_000, 5).unwrap();
        let est = estimate_qpd(&records, &table).unwrap();
        let exact = exact_qpd(&DensityMatrix::plus(), &[zproj(), zproj()], &[rx(theta)]).unwrap();
        for (idx, v) in exact.iter() {
            let (sr, si) = est.sem(&idx).unwrap();
            let e = est.get(&idx);
            assert!((e.re - v.re).abs() <= 4.0 * sr && (e.im - v.im).abs() <= 4.0 * si, "{idx:?}");
        }
        let (ar, ai) = est.aggregate_sem();
        assert!((est.sum().re - 1.0).abs() <= 4.0 * ar.max(1e-12));
        assert!(est.sum().im.abs() <= 4.0 * ai.max(1e-12));
        let json = serde_json::to_value(est.to_json()).unwrap();
        assert_eq!(json["entries"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn estimator_is_unbiased_over_seeds() {
        let theta = 0.3 * PI;
        let p = two_time_protocol(theta);
        let weights = [w("zy", "Z", WeightScope::Full), w("z", "Z", WeightScope::TraceOnly)];
        let runs: Vec<Estimate> = (0..200)
            .map(|s| estimate_correlation(&sample(&p, 1000, s).unwrap(), &weights).unwrap())
            .collect();
        let mean: C64 = runs.iter().map(|e| e.value).sum::<C64>() / 200.0;
        let sem_re = runs.iter().map(|e| e.sem_re).sum::<f64>() / 200.0;
        let sem_im = runs.iter().map(|e| e.sem_im).sum::<f64>() / 200.0;
        assert!((mean.re - theta.cos()).abs() < 5.0 * sem_re / 200f64.sqrt());
        assert!((mean.im + theta.sin()).abs() < 5.0 * sem_im / 200f64.sqrt());
    }

    #[test]
    fn grid_points() {
        let g = ThetaGrid::default().points().unwrap();
        assert_eq!(g.len(), 41);
        assert_eq!((g[0], g[40]), (0.0, PI));
        let one = ThetaGrid { start: 0.5, stop: 2.0, count: 1 };
        let rows = sweep(&one, |t| Ok(c(t, 0.0)), None::<fn(f64, usize) -> Result<Estimate>>).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(ThetaGrid { count: 0, ..one }.points().is_err());
    }

    #[test]
    fn sweep_real_part_is_cosine() {
        let rows = sweep(
            &ThetaGrid::default(),
            |t| exact_correlation(&DensityMatrix::plus(), &[z(), z()], &[rx(t)]),
            None::<fn(f64, usize) -> Result<Estimate>>,
        )
        .unwrap();
        for r in rows {
            assert!((r.exact.re - r.theta.cos()).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn qpd_consistency_and_marginals(seed: u64, three: bool) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rho = DensityMatrix::random(&mut rng, 2);
            let n = if three { 3 } else { 2 };
            let channels: Vec<Channel> = (1..n)
                .map(|_| Channel::unitary(random_unitary(&mut rng, 2)).unwrap())
                .collect();
            let lists = vec![zproj(); n];
            let q = exact_qpd(&rho, &lists, &channels).unwrap();
            prop_assert!((q.sum() - ONE).norm() < 1e-12);
            let corr = exact_correlation(&rho, &vec![z(); n], &channels).unwrap();
            let from_q = correlation_from_qpd(&q, &vec![vec![1.0, -1.0]; n]).unwrap();
            prop_assert!((corr - from_q).norm() < 1e-12);
            for t in 0..n {
                let m = marginal(&q, t).unwrap();
                let pops = populations(&rho, &zproj(), &channels[..t]).unwrap();
                prop_assert!(m.imag_residue < 1e-12);
                for (a, b) in m.values.iter().zip(&pops) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
