//! Sequential measurement protocols: exact trajectory distributions,
//! Monte Carlo sampling, and the explicit system-plus-ancilla circuit.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::povm::{build_povm, computational, sampling_decomposition, MeasurementSet, Povm};
use crate::qcore::{CMatrix, CVector, C64, DEFAULT_TOL};
use crate::qmodel::{
    cnot_from_ms, csum_matrix, dephasing_channel, depolarizing_channel, depolarizing_from_fidelity,
    sequence_unitary, Channel, DensityMatrix,
};

/// Upper bound on the number of outcome tuples enumerated exactly.
pub const MAX_TUPLES: u128 = 1_000_000;

/// Trajectories per RNG substream. Fixed so output does not depend on the
/// number of worker threads.
pub const CHUNK_SIZE: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Evolution from the previous time; identity for the first step.
    pub pre_channel: Channel,
    pub set: MeasurementSet,
}

impl Step {
    pub fn new(pre_channel: Channel, set: MeasurementSet) -> Self {
        Self { pre_channel, set }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    initial: DensityMatrix,
    steps: Vec<Step>,
    final_projective: bool,
    // Sets actually measured, with the final replacement applied.
    povms: Vec<Povm>,
}

impl Protocol {
    pub fn new(initial: DensityMatrix, steps: Vec<Step>, final_projective: bool) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidParameter("a protocol needs at least one step".into()));
        }
        let d = initial.dim();
        for (k, s) in steps.iter().enumerate() {
            if s.pre_channel.dim() != d || s.set.dim() != d {
                return Err(Error::InvalidParameter(format!(
                    "step {} has dimension {} / {}, expected {d}",
                    k + 1,
                    s.pre_channel.dim(),
                    s.set.dim()
                )));
            }
        }
        let last = steps.len() - 1;
        let povms = steps
            .iter()
            .enumerate()
            .map(|(k, s)| {
                if final_projective && k == last {
                    computational(d).map(|z| build_povm(&z))
                } else {
                    Ok(build_povm(&s.set))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            initial,
            steps,
            final_projective,
            povms,
        })
    }

    pub fn dim(&self) -> usize {
        self.initial.dim()
    }

    pub fn initial(&self) -> &DensityMatrix {
        &self.initial
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_projective(&self) -> bool {
        self.final_projective
    }

    /// Measurement set in effect at step `k`.
    pub fn measured_set(&self, k: usize) -> &MeasurementSet {
        self.povms[k].set()
    }

    pub fn povm(&self, k: usize) -> &Povm {
        &self.povms[k]
    }

    pub fn outcome_counts(&self) -> Vec<usize> {
        self.povms.iter().map(Povm::len).collect()
    }

    fn tuple_count(&self) -> u128 {
        self.outcome_counts().iter().map(|&c| c as u128).product()
    }

    fn check_size(&self) -> Result<()> {
        let n = self.tuple_count();
        if n > MAX_TUPLES {
            return Err(Error::OutcomeOverflow(n));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub outcomes: Vec<usize>,
}

/// Probability table over outcome tuples, stored row-major with the first
/// step as the most significant index.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDistribution {
    shape: Vec<usize>,
    probs: Vec<f64>,
}

pub(crate) fn encode(shape: &[usize], tuple: &[usize]) -> usize {
    tuple.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

pub(crate) fn decode(shape: &[usize], mut index: usize) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    for (slot, &n) in out.iter_mut().zip(shape).rev() {
        *slot = index % n;
        index /= n;
    }
    out
}

impl TrajectoryDistribution {
    pub fn new(shape: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let size: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || probs.len() != size {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for shape {shape:?}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidParameter("probabilities must be finite and non-negative".into()));
        }
        Ok(Self { shape, probs })
    }

    /// Relative frequencies of a record list.
    pub fn empirical(shape: Vec<usize>, records: &[TrajectoryRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidParameter("no records".into()));
        }
        let mut counts = vec![0.0; shape.iter().product()];
        for r in records {
            check_record(&shape, r)?;
            counts[encode(&shape, &r.outcomes)] += 1.0;
        }
        let n = records.len() as f64;
        Self::new(shape, counts.into_iter().map(|c| c / n).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, tuple: &[usize]) -> f64 {
        self.probs[encode(&self.shape, tuple)]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// `(tuple, probability)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, &p)| (decode(&self.shape, k), p))
    }

    pub fn tv_distance(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }

    /// Outcome distribution of a single step.
    pub fn marginal(&self, step: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.shape[step]];
        for (k, &p) in self.probs.iter().enumerate() {
            out[decode(&self.shape, k)[step]] += p;
        }
        out
    }

    /// JSON map from comma-joined tuple to probability.
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        self.iter()
            .map(|(t, p)| (join_tuple(&t), p))
            .collect()
    }

    pub fn from_map(shape: Vec<usize>, map: &BTreeMap<String, f64>) -> Result<Self> {
        let mut probs = vec![0.0; shape.iter().product()];
        for (key, &p) in map {
            let tuple = key
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::ShapeMismatch(format!("bad tuple key {key:?}")))?;
            check_record(&shape, &TrajectoryRecord { outcomes: tuple.clone() })?;
            probs[encode(&shape, &tuple)] = p;
        }
        Self::new(shape, probs)
    }
}

pub fn join_tuple(t: &[usize]) -> String {
    t.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn check_record(shape: &[usize], r: &TrajectoryRecord) -> Result<()> {
    if r.outcomes.len() != shape.len() || r.outcomes.iter().zip(shape).any(|(&m, &n)| m >= n) {
        return Err(Error::ShapeMismatch(format!(
            "record {:?} does not fit outcome counts {shape:?}",
            r.outcomes
        )));
    }
    Ok(())
}

fn real_trace(m: &CMatrix) -> f64 {
    (0..m.rows()).map(|i| m.get(i, i).re).sum()
}

/// `𝒫_m = Tr[ℳ_{m_N} ∘ 𝒰 ∘ … ∘ ℳ_{m_1}(ρ)]` by enumerating every branch.
pub fn exact_distribution(p: &Protocol) -> Result<TrajectoryDistribution> {
    p.check_size()?;
    let shape = p.outcome_counts();
    let mut probs = vec![0.0; shape.iter().product()];
    let mut stack = vec![(0usize, 0usize, p.initial.matrix().clone())];
    while let Some((step, prefix, rho)) = stack.pop() {
        if step == p.len() {
            probs[prefix] = real_trace(&rho).max(0.0);
            continue;
        }
        let evolved = p.steps[step].pre_channel.apply_to(&rho)?;
        for (m, mm) in p.povms[step].elements().iter().enumerate() {
            let branch = evolved.conjugate_by(mm);
            stack.push((step + 1, prefix * shape[step] + m, branch));
        }
    }
    TrajectoryDistribution::new(shape, probs)
}

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Runs `per_item` over `n` items in fixed-size chunks, each with its own
/// substream, and concatenates results in chunk order.
fn chunked<T: Send>(
    n: usize,
    seed: u64,
    per_item: impl Fn(&mut ChaCha8Rng, usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let chunks = n.div_ceil(CHUNK_SIZE);
    let parts: Vec<Result<Vec<T>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c);
            let lo = c * CHUNK_SIZE;
            let hi = (lo + CHUNK_SIZE).min(n);
            (lo..hi).map(|i| per_item(&mut rng, i)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

fn draw(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // Rounding at the top end: fall back to the last non-zero entry.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Draws `n` trajectories by sequential conditional sampling on the system.
pub fn sample(p: &Protocol, n: usize, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    chunked(n, seed, |rng, _| {
        let mut rho = p.initial.matrix().clone();
        let mut outcomes = Vec::with_capacity(p.len());
        for (step, povm) in p.steps.iter().zip(&p.povms) {
            rho = step.pre_channel.apply_to(&rho)?;
            let probs = povm.probabilities(&rho);
            let m = draw(rng, &probs);
            let next = rho.conjugate_by(&povm.elements()[m]);
            rho = next.scale_real(1.0 / real_trace(&next));
            outcomes.push(m);
        }
        Ok(TrajectoryRecord { outcomes })
    })
}

/// Draws `n` tuples i.i.d. from a tabulated distribution.
pub fn sample_from_distribution(
    dist: &TrajectoryDistribution,
    n: usize,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    let mut cumulative = Vec::with_capacity(dist.probs.len());
    let mut acc = 0.0;
    for &p in &dist.probs {
        acc += p;
        cumulative.push(acc);
    }
    let last = dist.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    chunked(n, seed, |rng, _| {
        let u = rng.random::<f64>() * acc;
        let k = cumulative.partition_point(|&c| c <= u).min(last);
        Ok(TrajectoryRecord {
            outcomes: decode(&dist.shape, k),
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Two-qubit depolarizing strength after each entangling gate.
    #[serde(default)]
    pub entangling_depolarizing_p: f64,
    /// Probability of reading the ancilla outcome correctly.
    #[serde(default)]
    pub ancilla_readout_fidelity: Option<f64>,
    /// Probability of reading a direct system measurement correctly.
    #[serde(default)]
    pub system_readout_fidelity: Option<f64>,
    /// Optional phase-flip probability on the system before each measurement.
    #[serde(default)]
    pub dephasing_p: Option<f64>,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            entangling_depolarizing_p: 0.0,
            ancilla_readout_fidelity: None,
            system_readout_fidelity: None,
            dephasing_p: None,
        }
    }

    /// 94 % gate fidelity, 98.9 % ancilla and 98.4 % system detection.
    pub fn trapped_ion_defaults() -> Result<Self> {
        Ok(Self {
            entangling_depolarizing_p: depolarizing_from_fidelity(0.94, 2)?,
            ancilla_readout_fidelity: Some(0.989),
            system_readout_fidelity: Some(0.984),
            dephasing_p: None,
        })
    }

    /// Per-step confusion matrices; `None` when no readout error is set.
    pub fn readout_confusions(&self, p: &Protocol) -> Result<Option<Vec<ConfusionMatrix>>> {
        if self.ancilla_readout_fidelity.is_none() && self.system_readout_fidelity.is_none() {
            return Ok(None);
        }
        let last = p.len() - 1;
        (0..p.len())
            .map(|k| {
                let direct = p.final_projective && k == last;
                let f = if direct {
                    self.system_readout_fidelity
                } else {
                    self.ancilla_readout_fidelity
                };
                match f {
                    Some(f) => ConfusionMatrix::for_set(p.measured_set(k), f),
                    None => Ok(ConfusionMatrix::identity(p.measured_set(k).len())),
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

/// `M[observed][true]`, columns summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub matrix: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn new(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let k = matrix.len();
        if k == 0 || matrix.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch("confusion matrix must be square".into()));
        }
        for col in 0..k {
            let mut s = 0.0;
            for row in &matrix {
                if row[col].is_nan() || row[col] < 0.0 {
                    return Err(Error::InvalidParameter("confusion entries must be non-negative".into()));
                }
                s += row[col];
            }
            if (s - 1.0).abs() > DEFAULT_TOL {
                return Err(Error::InvalidParameter(format!("confusion column {col} sums to {s}")));
            }
        }
        Ok(Self { matrix })
    }

    pub fn identity(k: usize) -> Self {
        let matrix = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { matrix }
    }

    /// Correct with probability `fidelity`, otherwise uniformly wrong.
    pub fn symmetric(k: usize, fidelity: f64) -> Result<Self> {
        Self::block_symmetric(k, &[(0..k).collect()], fidelity)
    }

    /// Errors stay within the measured basis, so the confusion is block
    /// diagonal over the set's basis decomposition.
    pub fn for_set(set: &MeasurementSet, fidelity: f64) -> Result<Self> {
        Self::block_symmetric(set.len(), &sampling_decomposition(set)?, fidelity)
    }

    fn block_symmetric(k: usize, blocks: &[Vec<usize>], fidelity: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fidelity) {
            return Err(Error::InvalidParameter(format!("fidelity {fidelity} not in [0, 1]")));
        }
        let mut matrix = vec![vec![0.0; k]; k];
        for block in blocks {
            let wrong = if block.len() > 1 {
                (1.0 - fidelity) / (block.len() - 1) as f64
            } else {
                0.0
            };
            for &i in block {
                for &j in block {
                    matrix[i][j] = if i == j {
                        if block.len() > 1 { fidelity } else { 1.0 }
                    } else {
                        wrong
                    };
                }
            }
        }
        Self::new(matrix)
    }

    pub fn len(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    fn inverse(&self, step: usize) -> Result<Vec<Vec<f64>>> {
        let k = self.len();
        let m = DMatrix::from_fn(k, k, |i, j| self.matrix[i][j]);
        let inv = m.try_inverse().ok_or(Error::SingularConfusion(step))?;
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularConfusion(step));
        }
        Ok((0..k).map(|i| (0..k).map(|j| inv[(i, j)]).collect()).collect())
    }
}

fn apply_along_axis(shape: &[usize], probs: &[f64], axis: usize, m: &[Vec<f64>]) -> Vec<f64> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; probs.len()];
    for o in 0..outer {
        for r in 0..inner {
            let at = |k: usize| (o * n + k) * inner + r;
            for obs in 0..n {
                out[at(obs)] = (0..n).map(|t| m[obs][t] * probs[at(t)]).sum();
            }
        }
    }
    out
}

fn check_confusions(shape: &[usize], confusions: &[ConfusionMatrix]) -> Result<()> {
    if confusions.len() != shape.len() || confusions.iter().zip(shape).any(|(c, &n)| c.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "{} confusion matrices do not match outcome counts {shape:?}",
            confusions.len()
        )));
    }
    Ok(())
}

/// Convolves a distribution with per-step readout confusion.
pub fn apply_readout_error(
    dist: &TrajectoryDistribution,
    confusions: &[ConfusionMatrix],
) -> Result<TrajectoryDistribution> {
    check_confusions(&dist.shape, confusions)?;
    let mut probs = dist.probs.clone();
    for (axis, c) in confusions.iter().enumerate() {
        probs = apply_along_axis(&dist.shape, &probs, axis, &c.matrix);
    }
    TrajectoryDistribution::new(dist.shape.clone(), probs.into_iter().map(|p| p.max(0.0)).collect())
}

/// Resamples each recorded outcome through its step's confusion column.
pub fn apply_readout_error_records(
    records: &[TrajectoryRecord],
    confusions: &[ConfusionMatrix],
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    let shape: Vec<usize> = confusions.iter().map(ConfusionMatrix::len).collect();
    for r in records {
        check_record(&shape, r)?;
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    chunked(records.len(), seed, |rng, i| {
        let outcomes = records[i]
            .outcomes
            .iter()
            .zip(confusions)
            .map(|(&t, c)| {
                let column: Vec<f64> = c.matrix.iter().map(|row| row[t]).collect();
                draw(rng, &column)
            })
            .collect();
        Ok(TrajectoryRecord { outcomes })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedDistribution {
    pub distribution: TrajectoryDistribution,
    /// Total negative mass removed before renormalizing.
    pub clipped_mass: f64,
    pub clipped_entries: usize,
}

/// Applies the inverse confusion per step, clips negatives and renormalizes
/// when anything was clipped.
pub fn correct_readout(
    dist: &TrajectoryDistribution,
    confusions: &[ConfusionMatrix],
) -> Result<CorrectedDistribution> {
    check_confusions(&dist.shape, confusions)?;
    let mut probs = dist.probs.clone();
    for (axis, c) in confusions.iter().enumerate() {
        probs = apply_along_axis(&dist.shape, &probs, axis, &c.inverse(axis)?);
    }
    let mut clipped_mass = 0.0;
    let mut clipped_entries = 0;
    for p in probs.iter_mut() {
        if *p < 0.0 {
            clipped_mass -= *p;
            if *p < -DEFAULT_TOL {
                clipped_entries += 1;
            }
            *p = 0.0;
        }
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidParameter("corrected distribution has no mass".into()));
    }
    if clipped_mass > 0.0 {
        probs.iter_mut().for_each(|p| *p /= total);
    }
    Ok(CorrectedDistribution {
        distribution: TrajectoryDistribution::new(dist.shape.clone(), probs)?,
        clipped_mass,
        clipped_entries,
    })
}

/// `Tr_anc[(I ⊗ ⟨φ|) X (I ⊗ |φ⟩)]` for a joint operator on system ⊗ ancilla.
fn project_ancilla(joint: &CMatrix, phi: &CVector, d: usize) -> CMatrix {
    let mut out = CMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut acc = C64::new(0.0, 0.0);
            for a in 0..d {
                for b in 0..d {
                    acc += phi.get(a).conj() * joint.get(i * d + a, j * d + b) * phi.get(b);
                }
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Enumerates the circuit with an explicit ancilla: reset to `|0⟩`,
/// entangle (CSUM, or for qubits optionally the MS-based CNOT), optional
/// gate noise, pick one orthonormal basis of the set uniformly and project
/// the ancilla. A final projective step measures the system directly.
///
/// Readout error is not included here; see [`apply_readout_error`].
pub fn explicit_circuit_distribution(
    p: &Protocol,
    use_ms_decomposition: bool,
    noise: Option<&NoiseModel>,
) -> Result<TrajectoryDistribution> {
    p.check_size()?;
    let d = p.dim();
    if use_ms_decomposition && d != 2 {
        return Err(Error::InvalidParameter("the MS decomposition needs a qubit system".into()));
    }
    let gate = if use_ms_decomposition {
        sequence_unitary(&cnot_from_ms())
    } else {
        csum_matrix(d)?
    };
    let gate_noise = match noise {
        Some(nm) if nm.entangling_depolarizing_p > 0.0 => {
            if d != 2 {
                return Err(Error::InvalidParameter("gate depolarizing is defined for qubits only".into()));
            }
            Some(depolarizing_channel(nm.entangling_depolarizing_p, 2)?)
        }
        _ => None,
    };
    let dephasing = match noise.and_then(|nm| nm.dephasing_p) {
        Some(q) if q > 0.0 => {
            if d != 2 {
                return Err(Error::InvalidParameter("dephasing is defined for qubits only".into()));
            }
            Some(dephasing_channel(q)?)
        }
        _ => None,
    };

    // Per step: list of (outcome index, basis weight, normalized ancilla ket).
    let last = p.len() - 1;
    let mut branches: Vec<Option<Vec<(usize, f64, CVector)>>> = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        if p.final_projective && k == last {
            branches.push(None);
            continue;
        }
        let set = p.measured_set(k);
        let bases = sampling_decomposition(set)?;
        let w = 1.0 / bases.len() as f64;
        let mut list: Vec<(usize, f64, CVector)> = bases
            .iter()
            .flat_map(|b| b.iter().map(|&m| (m, w, set.kets()[m].normalized())))
            .collect();
        list.sort_by_key(|e| e.0);
        branches.push(Some(list));
    }

    let ancilla0 = CVector::basis(d, 0).projector();
    let shape = p.outcome_counts();
    let mut probs = vec![0.0; shape.iter().product()];
    let mut stack = vec![(0usize, 0usize, p.initial.matrix().clone())];
    while let Some((step, prefix, rho)) = stack.pop() {
        if step == p.len() {
            probs[prefix] = real_trace(&rho).max(0.0);
            continue;
        }
        let mut sys = p.steps[step].pre_channel.apply_to(&rho)?;
        if let Some(ch) = &dephasing {
            sys = ch.apply_to(&sys)?;
        }
        match &branches[step] {
            None => {
                for i in 0..d {
                    let proj = CVector::basis(d, i).projector();
                    let branch = &(&proj * &sys) * &proj;
                    stack.push((step + 1, prefix * shape[step] + i, branch));
                }
            }
            Some(list) => {
                let mut joint = sys.tensor(&ancilla0).conjugate_by(&gate);
                if let Some(ch) = &gate_noise {
                    joint = ch.apply_to(&joint)?;
                }
                for (m, w, phi) in list {
                    let branch = project_ancilla(&joint, phi, d).scale_real(*w);
                    stack.push((step + 1, prefix * shape[step] + m, branch));
                }
            }
        }
    }
    TrajectoryDistribution::new(shape, probs)
}

/// Explicit circuit followed by the model's readout confusion.
pub fn noisy_distribution(
    p: &Protocol,
    use_ms_decomposition: bool,
    noise: &NoiseModel,
) -> Result<TrajectoryDistribution> {
    let dist = explicit_circuit_distribution(p, use_ms_decomposition, Some(noise))?;
    match noise.readout_confusions(p)? {
        Some(c) => apply_readout_error(&dist, &c),
        None => Ok(dist),
    }
}

/// Post-measurement system state after `steps` steps, summed over outcomes.
pub fn unconditional_state(p: &Protocol, steps: usize) -> Result<CMatrix> {
    let mut rho = p.initial.matrix().clone();
    for k in 0..steps.min(p.len()) {
        rho = p.steps[k].pre_channel.apply_to(&rho)?;
        let mut acc = CMatrix::zeros(p.dim(), p.dim());
        for mm in p.povms[k].elements() {
            acc = &acc + &rho.conjugate_by(mm);
        }
        rho = acc;
    }
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::povm::builtin_set;
    use crate::qmodel::{random_unitary, rx, ry, RyConvention};
    use proptest::prelude::*;

    fn single(set: &str) -> Protocol {
        Protocol::new(
            DensityMatrix::plus(),
            vec![Step::new(Channel::identity(2).unwrap(), builtin_set(set).unwrap())],
            false,
        )
        .unwrap()
    }

    fn three_time(theta: f64, final_projective: bool) -> Protocol {
        let zyx = builtin_set("zyx").unwrap();
        Protocol::new(
            DensityMatrix::plus(),
            vec![
                Step::new(Channel::identity(2).unwrap(), zyx.clone()),
                Step::new(rx(theta), zyx.clone()),
                Step::new(ry(theta * theta, RyConvention::Standard), zyx),
            ],
            final_projective,
        )
        .unwrap()
    }

    fn two_time(theta: f64) -> Protocol {
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
    fn single_z_on_plus() {
        let d = exact_distribution(&single("z")).unwrap();
        assert!((d.prob(&[0]) - 0.5).abs() < 1e-15 && (d.prob(&[1]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn repeated_projective_is_diagonal() {
        let z = builtin_set("z").unwrap();
        let id = Channel::identity(2).unwrap();
        let p = Protocol::new(
            DensityMatrix::plus(),
            vec![Step::new(id.clone(), z.clone()), Step::new(id, z)],
            false,
        )
        .unwrap();
        let d = exact_distribution(&p).unwrap();
        assert!((d.prob(&[0, 0]) - 0.5).abs() < 1e-15);
        assert!((d.prob(&[1, 1]) - 0.5).abs() < 1e-15);
        assert_eq!(d.prob(&[0, 1]), 0.0);
        assert_eq!(d.prob(&[1, 0]), 0.0);
    }

    #[test]
    fn single_zy_uniform() {
        let d = exact_distribution(&single("zy")).unwrap();
        for m in 0..4 {
            assert!((d.prob(&[m]) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn overflow_guard() {
        let zyx = builtin_set("zyx").unwrap();
        let steps = (0..8).map(|_| Step::new(Channel::identity(2).unwrap(), zyx.clone())).collect();
        let p = Protocol::new(DensityMatrix::plus(), steps, false).unwrap();
        assert!(matches!(exact_distribution(&p), Err(Error::OutcomeOverflow(_))));
    }

    #[test]
    fn explicit_path_matches_kraus_path() {
        for theta in [0.0, 0.3 * PI, 0.74 * PI, 2.0] {
            for p in [two_time(theta), three_time(theta, true), three_time(theta, false)] {
                let exact = exact_distribution(&p).unwrap();
                for ms in [false, true] {
                    let circuit = explicit_circuit_distribution(&p, ms, None).unwrap();
                    assert!(exact.tv_distance(&circuit).unwrap() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn explicit_path_in_higher_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (set, d) in [("mub-d3", 3), ("mub-d4", 4)] {
            let s = builtin_set(set).unwrap();
            let u = Channel::unitary(random_unitary(&mut rng, d)).unwrap();
            let p = Protocol::new(
                DensityMatrix::random(&mut rng, d),
                vec![Step::new(Channel::identity(d).unwrap(), s.clone()), Step::new(u, s)],
                true,
            )
            .unwrap();
            let a = exact_distribution(&p).unwrap();
            let b = explicit_circuit_distribution(&p, false, None).unwrap();
            assert!(a.tv_distance(&b).unwrap() < 1e-10);
        }
    }

    #[test]
    fn full_depolarizing_makes_ancilla_uniform() {
        let noise = NoiseModel {
            entangling_depolarizing_p: 1.0,
            ..NoiseModel::noiseless()
        };
        let zero = Protocol::new(
            DensityMatrix::zero(2).unwrap(),
            vec![Step::new(Channel::identity(2).unwrap(), builtin_set("zyx").unwrap())],
            false,
        )
        .unwrap();
        let d = explicit_circuit_distribution(&zero, true, Some(&noise)).unwrap();
        for m in 0..6 {
            assert!((d.prob(&[m]) - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_distributions_normalized() {
        let noise = NoiseModel {
            dephasing_p: Some(0.1),
            ..NoiseModel::trapped_ion_defaults().unwrap()
        };
        let d = noisy_distribution(&three_time(0.74 * PI, true), true, &noise).unwrap();
        assert!((d.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reset_keeps_unconditional_state() {
        let p = three_time(0.74 * PI, false);
        for k in 1..=3 {
            let kraus = unconditional_state(&p, k).unwrap();
            // ancilla-path marginal over the first k outcomes equals the trace
            // of the Kraus-path unconditional state's populations
            let circ = explicit_circuit_distribution(&p, true, None).unwrap();
            let z = kraus.diagonal_entries();
            assert!((z.iter().map(|c| c.re).sum::<f64>() - circ.total()).abs() < 1e-12);
        }
        // System state after step 1 from the explicit circuit, summed over branches.
        let set = builtin_set("zyx").unwrap();
        let joint = DensityMatrix::plus()
            .matrix()
            .tensor(&CVector::basis(2, 0).projector())
            .conjugate_by(&sequence_unitary(&cnot_from_ms()));
        let mut summed = CMatrix::zeros(2, 2);
        for basis in sampling_decomposition(&set).unwrap() {
            for m in basis {
                let b = project_ancilla(&joint, &set.kets()[m].normalized(), 2).scale_real(1.0 / 3.0);
                summed = &summed + &b;
            }
        }
        assert!(summed.max_abs_diff(&unconditional_state(&p, 1).unwrap()) < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_close() {
        let p = two_time(0.3 * PI);
        let a = sample(&p, 3000, 9).unwrap();
        let b = sample(&p, 3000, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample(&p, 3000, 10).unwrap());
        let exact = exact_distribution(&p).unwrap();
        let emp = TrajectoryDistribution::empirical(exact.shape().to_vec(), &a).unwrap();
        assert!(exact.tv_distance(&emp).unwrap() < 3.0 * (8.0f64 / 3000.0).sqrt());
    }

    #[test]
    fn binomial_frequency_of_single_z() {
        let records = sample(&single("z"), 1_000_000, 3).unwrap();
        let zeros = records.iter().filter(|r| r.outcomes[0] == 0).count() as f64 / 1e6;
        assert!((0.498..=0.502).contains(&zeros), "{zeros}");
    }

    #[test]
    fn tv_decreases_with_n() {
        let p = three_time(0.74 * PI, true);
        let exact = exact_distribution(&p).unwrap();
        let outcomes = exact.probabilities().len() as f64;
        let mut prev = f64::INFINITY;
        for n in [1_000, 10_000, 100_000] {
            let emp = TrajectoryDistribution::empirical(exact.shape().to_vec(), &sample(&p, n, 1).unwrap()).unwrap();
            let tv = exact.tv_distance(&emp).unwrap();
            assert!(tv < prev && tv < 3.0 * (outcomes / n as f64).sqrt());
            prev = tv;
        }
    }

    #[test]
    fn tabulated_sampling_matches() {
        let p = three_time(0.74 * PI, true);
        let exact = exact_distribution(&p).unwrap();
        let recs = sample_from_distribution(&exact, 50_000, 4).unwrap();
        let emp = TrajectoryDistribution::empirical(exact.shape().to_vec(), &recs).unwrap();
        assert!(exact.tv_distance(&emp).unwrap() < 3.0 * (72.0f64 / 50_000.0).sqrt());
    }

    #[test]
    fn readout_examples() {
        let exact = exact_distribution(&two_time(0.3 * PI)).unwrap();
        let id = vec![ConfusionMatrix::identity(4), ConfusionMatrix::identity(2)];
        assert_eq!(apply_readout_error(&exact, &id).unwrap(), exact);
        assert_eq!(correct_readout(&exact, &id).unwrap().distribution, exact);

        let mixing = vec![ConfusionMatrix::identity(4), ConfusionMatrix::symmetric(2, 0.5).unwrap()];
        let m = apply_readout_error(&exact, &mixing).unwrap().marginal(1);
        assert!((m[0] - 0.5).abs() < 1e-15 && (m[1] - 0.5).abs() < 1e-15);

        let det = TrajectoryDistribution::new(vec![2], vec![1.0, 0.0]).unwrap();
        let flipped = apply_readout_error(&det, &[ConfusionMatrix::symmetric(2, 0.989).unwrap()]).unwrap();
        assert!((flipped.prob(&[1]) - 0.011).abs() < 1e-15);

        let skew = TrajectoryDistribution::new(vec![2], vec![0.75, 0.25]).unwrap();
        let c = [ConfusionMatrix::symmetric(2, 0.98).unwrap()];
        let back = correct_readout(&apply_readout_error(&skew, &c).unwrap(), &c).unwrap();
        assert!((back.distribution.prob(&[0]) - 0.75).abs() < 1e-12);
        assert_eq!(back.clipped_entries, 0);
    }

    #[test]
    fn readout_round_trip_with_quoted_fidelities() {
        let p = three_time(0.74 * PI, true);
        let exact = exact_distribution(&p).unwrap();
        let noise = NoiseModel::trapped_ion_defaults().unwrap();
        let c = noise.readout_confusions(&p).unwrap().unwrap();
        // Ancilla confusion stays within each basis.
        assert_eq!(c[0].matrix[0][2], 0.0);
        assert!((c[0].matrix[1][0] - 0.011).abs() < 1e-15);
        assert!((c[2].matrix[1][0] - 0.016).abs() < 1e-15);
        let back = correct_readout(&apply_readout_error(&exact, &c).unwrap(), &c).unwrap();
        assert!(back.distribution.tv_distance(&exact).unwrap() < 1e-10);
    }

    #[test]
    fn singular_confusion_rejected() {
        let d = TrajectoryDistribution::new(vec![2], vec![0.5, 0.5]).unwrap();
        let c = [ConfusionMatrix::symmetric(2, 0.5).unwrap()];
        assert_eq!(correct_readout(&d, &c).unwrap_err(), Error::SingularConfusion(0));
        assert!(ConfusionMatrix::new(vec![vec![0.9, 0.2], vec![0.2, 0.8]]).is_err());
    }

    #[test]
    fn record_readout_flip_rate() {
        let records = vec![TrajectoryRecord { outcomes: vec![0] }; 200_000];
        let c = [ConfusionMatrix::symmetric(2, 0.989).unwrap()];
        let noisy = apply_readout_error_records(&records, &c, 8).unwrap();
        let rate = noisy.iter().filter(|r| r.outcomes[0] == 1).count() as f64 / 2e5;
        assert!((rate - 0.011).abs() < 4.0 * (0.011 * 0.989 / 2e5f64).sqrt());
    }

    #[test]
    fn json_map_round_trip() {
        let exact = exact_distribution(&two_time(0.3 * PI)).unwrap();
        let map = exact.to_map();
        assert!(map.contains_key("3,1"));
        let back = TrajectoryDistribution::from_map(exact.shape().to_vec(), &map).unwrap();
        assert_eq!(back, exact);
    }

    proptest! {
        #[test]
        fn distributions_sum_to_one(theta in 0.0f64..PI, noise_p in 0.0f64..1.0, fp: bool) {
            let p = three_time(theta, fp);
            let exact = exact_distribution(&p).unwrap();
            prop_assert!((exact.total() - 1.0).abs() < 1e-12);
            let noise = NoiseModel { entangling_depolarizing_p: noise_p, ..NoiseModel::trapped_ion_defaults().unwrap() };
            let noisy = noisy_distribution(&p, true, &noise).unwrap();
            prop_assert!((noisy.total() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn index_codec(shape in proptest::collection::vec(1usize..5, 1..5), seed: u64) {
            let size: usize = shape.iter().product();
            let k = (seed as usize) % size;
            prop_assert_eq!(encode(&shape, &decode(&shape, k)), k);
        }
    }
}
