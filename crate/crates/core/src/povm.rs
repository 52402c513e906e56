//! Ancilla measurement sets `{|φ_m⟩}` and the diagonal POVMs they induce.
//!
//! A set satisfies `Σ_m |φ_m⟩⟨φ_m| = α I`. After a CSUM between system and a
//! fresh ancilla in `|0⟩`, projecting the ancilla onto `|φ_m⟩` acts on the
//! system as `M_m = Σ_i (⟨φ_m|i⟩/√α) |i⟩⟨i|`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::qcore::{c, CMatrix, CVector, C64, DEFAULT_TOL, MAX_DIM};
use crate::qmodel::{pauli_x, pauli_y, pauli_z};

/// Rank tolerance for the informational-completeness test.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    name: String,
    dim: usize,
    kets: Vec<CVector>,
    alpha: f64,
}

impl MeasurementSet {
    /// Validates `Σ |φ⟩⟨φ| = α I` and derives `α`.
    pub fn new(name: impl Into<String>, kets: Vec<CVector>) -> Result<Self> {
        let name = name.into();
        let dim = kets
            .first()
            .map(CVector::dim)
            .ok_or_else(|| Error::InvalidMeasurementSet("empty set".into()))?;
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::DimensionTooLarge(dim));
        }
        if kets.iter().any(|k| k.dim() != dim) {
            return Err(Error::InvalidMeasurementSet("kets of different dimensions".into()));
        }
        if kets.len() < dim {
            return Err(Error::InvalidMeasurementSet(format!(
                "{} kets cannot resolve the identity in dimension {dim}",
                kets.len()
            )));
        }
        let frame = kets
            .iter()
            .fold(CMatrix::zeros(dim, dim), |acc, k| &acc + &k.projector());
        let alpha = frame.trace()?.re / dim as f64;
        if alpha <= 0.0 || !frame.approx_eq(&CMatrix::identity(dim).scale_real(alpha), DEFAULT_TOL)
        {
            return Err(Error::InvalidMeasurementSet(format!(
                "{name}: kets do not resolve a multiple of the identity"
            )));
        }
        Ok(MeasurementSet {
            name,
            dim,
            kets,
            alpha,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kets(&self) -> &[CVector] {
        &self.kets
    }

    pub fn len(&self) -> usize {
        self.kets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kets.is_empty()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Computational basis; named `z` for qubits and `z-d<d>` otherwise.
pub fn computational(d: usize) -> Result<MeasurementSet> {
    let name = if d == 2 { "z".to_string() } else { format!("z-d{d}") };
    MeasurementSet::new(name, (0..d).map(|i| CVector::basis(d, i)).collect())
}

fn qubit_kets(labels: &[&str]) -> Vec<CVector> {
    let h = FRAC_1_SQRT_2;
    labels
        .iter()
        .map(|l| match *l {
            "0" => CVector::basis(2, 0),
            "1" => CVector::basis(2, 1),
            "+y" => CVector::new(vec![c(h, 0.0), c(0.0, h)]),
            "-y" => CVector::new(vec![c(h, 0.0), c(0.0, -h)]),
            "+x" => CVector::new(vec![c(h, 0.0), c(h, 0.0)]),
            "-x" => CVector::new(vec![c(h, 0.0), c(-h, 0.0)]),
            _ => unreachable!("unknown qubit ket label"),
        })
        .collect()
}

/// Resolves `z`, `zy`, `zyx`, `mub-d3`, `mub-d4` and `z-d<d>`.
///
/// Outcome indices follow the ket order listed here, computational basis
/// first.
pub fn builtin_set(name: &str) -> Result<MeasurementSet> {
    match name {
        "z" => computational(2),
        "zy" => MeasurementSet::new("zy", qubit_kets(&["0", "1", "+y", "-y"])),
        "zyx" => MeasurementSet::new("zyx", qubit_kets(&["0", "1", "+y", "-y", "+x", "-x"])),
        "mub-d3" => mub_d3(),
        "mub-d4" => mub_d4(),
        _ => match name.strip_prefix("z-d").and_then(|d| d.parse::<usize>().ok()) {
            Some(d) if (2..=MAX_DIM).contains(&d) => computational(d),
            _ => Err(Error::UnknownName(format!("measurement set {name:?}"))),
        },
    }
}

/// Complete set of four mutually unbiased bases for a qutrit:
/// `|e^k_m⟩ = Σ_j ω^{k j² + m j} |j⟩ / √3` plus the computational basis.
fn mub_d3() -> Result<MeasurementSet> {
    let d = 3usize;
    let mut kets: Vec<CVector> = (0..d).map(|i| CVector::basis(d, i)).collect();
    let norm = 1.0 / (d as f64).sqrt();
    for k in 0..d {
        for m in 0..d {
            let entries = (0..d)
                .map(|j| {
                    let phase = 2.0 * PI * ((k * j * j + m * j) % d) as f64 / d as f64;
                    C64::from_polar(norm, phase)
                })
                .collect();
            kets.push(CVector::new(entries));
        }
    }
    MeasurementSet::new("mub-d3", kets)
}

/// Five mutually unbiased bases for two qubits, as joint eigenbases of the
/// commuting Pauli classes {ZI, IZ}, {XI, IX}, {YI, IY}, {XY, YZ}, {YX, ZY}.
fn mub_d4() -> Result<MeasurementSet> {
    let (x, y, z) = (pauli_x(), pauli_y(), pauli_z());
    let id = CMatrix::identity(2);
    let classes = [
        (x.tensor(&id), id.tensor(&x)),
        (y.tensor(&id), id.tensor(&y)),
        (x.tensor(&y), y.tensor(&z)),
        (y.tensor(&x), z.tensor(&y)),
    ];
    let mut kets: Vec<CVector> = (0..4).map(|i| CVector::basis(4, i)).collect();
    let id4 = CMatrix::identity(4);
    for (p1, p2) in &classes {
        for (s1, s2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let proj = (&id4 + &p1.scale_real(s1)) * (&id4 + &p2.scale_real(s2));
            let proj = proj.scale_real(0.25);
            kets.push(rank_one_ket(&proj));
        }
    }
    MeasurementSet::new("mub-d4", kets)
}

/// Normalized range vector of a rank-one projector, phase fixed so that its
/// largest-modulus entry is real positive.
fn rank_one_ket(proj: &CMatrix) -> CVector {
    let d = proj.rows();
    let col = (0..d)
        .max_by(|&a, &b| proj.get(a, a).re.total_cmp(&proj.get(b, b).re))
        .unwrap();
    let v = CVector::new((0..d).map(|r| proj.get(r, col)).collect()).normalized();
    let pivot = v.get(col);
    v.scale(pivot.conj() / pivot.norm())
}

/// POVM `{M_m}` induced by a measurement set.
#[derive(Debug, Clone, PartialEq)]
pub struct Povm {
    elements: Vec<CMatrix>,
    set: MeasurementSet,
}

impl Povm {
    pub fn elements(&self) -> &[CMatrix] {
        &self.elements
    }

    pub fn set(&self) -> &MeasurementSet {
        &self.set
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Outcome probabilities `Tr[M_m ρ M_m†]` for an arbitrary positive
    /// operator (not necessarily normalized).
    pub fn probabilities(&self, rho: &CMatrix) -> Vec<f64> {
        self.elements
            .iter()
            .map(|m| {
                // M is diagonal: Tr[MρM†] = Σ_i |M_ii|² ρ_ii
                (0..m.rows())
                    .map(|i| m.get(i, i).norm_sqr() * rho.get(i, i).re)
                    .sum::<f64>()
                    .max(0.0)
            })
            .collect()
    }
}

/// `M_m = Σ_i (⟨φ_m|i⟩/√α) |i⟩⟨i|`.
pub fn build_povm(set: &MeasurementSet) -> Povm {
    let scale = 1.0 / set.alpha().sqrt();
    let elements = set
        .kets()
        .iter()
        .map(|ket| {
            let diag: Vec<C64> = ket.entries().iter().map(|a| a.conj() * scale).collect();
            CMatrix::diagonal(&diag)
        })
        .collect();
    Povm {
        elements,
        set: set.clone(),
    }
}

/// True iff the outer products `|φ_m⟩⟨φ_m|` span all `d × d` operators.
pub fn is_informationally_complete(set: &MeasurementSet) -> bool {
    let d = set.dim();
    let rows: Vec<C64> = set
        .kets()
        .iter()
        .flat_map(|k| k.normalized().projector().to_row_major())
        .collect();
    let gram_rows = CMatrix::from_row_major(set.len(), d * d, rows).unwrap();
    gram_rows.rank(RANK_TOL) == d * d
}

/// Partitions a set into orthonormal bases (lists of ket indices) so the
/// POVM can be realized by picking a basis uniformly and projecting.
///
/// Every ket must have squared norm `α / (#bases)`; otherwise the uniform
/// basis choice would not reproduce `Tr[M_m† M_m ρ]`.
pub fn sampling_decomposition(set: &MeasurementSet) -> Result<Vec<Vec<usize>>> {
    let d = set.dim();
    if !set.len().is_multiple_of(d) {
        return Err(Error::InvalidMeasurementSet(format!(
            "{}: {} kets do not split into bases of size {d}",
            set.name(),
            set.len()
        )));
    }
    let n_bases = set.len() / d;
    let expected_norm_sq = set.alpha() / n_bases as f64;
    let kets = set.kets();
    if kets
        .iter()
        .any(|k| (k.norm().powi(2) - expected_norm_sq).abs() > DEFAULT_TOL)
    {
        return Err(Error::InvalidMeasurementSet(format!(
            "{}: kets are not equally weighted bases",
            set.name()
        )));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (m, ket) in kets.iter().enumerate() {
        let slot = groups.iter_mut().find(|g| {
            g.len() < d
                && g.iter()
                    .all(|&other| kets[other].inner(ket).norm() <= DEFAULT_TOL)
        });
        match slot {
            Some(g) => g.push(m),
            None => groups.push(vec![m]),
        }
    }
    if groups.len() != n_bases || groups.iter().any(|g| g.len() != d) {
        return Err(Error::InvalidMeasurementSet(format!(
            "{}: kets do not partition into orthonormal bases",
            set.name()
        )));
    }
    Ok(groups)
}

/// Outcome probabilities from the basis-choice realization: pick one of the
/// bases uniformly, then project onto its (normalized) kets after the CSUM.
/// Used to cross-check [`Povm::probabilities`].
pub fn sampled_basis_probabilities(
    set: &MeasurementSet,
    bases: &[Vec<usize>],
    rho: &CMatrix,
) -> Vec<f64> {
    let d = set.dim();
    let mut probs = vec![0.0; set.len()];
    let weight = 1.0 / bases.len() as f64;
    for basis in bases {
        for &m in basis {
            let phi = set.kets()[m].normalized();
            // after CSUM from |0⟩ the ancilla copies the system's basis label:
            // P(m) = Σ_i ρ_ii |⟨φ|i⟩|²
            let p: f64 = (0..d).map(|i| rho.get(i, i).re * phi.get(i).norm_sqr()).sum();
            probs[m] += weight * p;
        }
    }
    probs
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::qcore::ZERO;
    use crate::qmodel::DensityMatrix;

    fn all_sets() -> Vec<MeasurementSet> {
        ["z", "zy", "zyx", "mub-d3", "mub-d4", "z-d3"]
            .iter()
            .map(|n| builtin_set(n).unwrap())
            .collect()
    }

    #[test]
    fn builtin_alphas() {
        assert!((builtin_set("z").unwrap().alpha() - 1.0).abs() < 1e-15);
        assert!((builtin_set("zy").unwrap().alpha() - 2.0).abs() < 1e-15);
        assert!((builtin_set("zyx").unwrap().alpha() - 3.0).abs() < 1e-15);
        assert!((builtin_set("mub-d3").unwrap().alpha() - 4.0).abs() < 1e-12);
        assert!((builtin_set("mub-d4").unwrap().alpha() - 5.0).abs() < 1e-12);
        assert!(matches!(builtin_set("zx"), Err(Error::UnknownName(_))));
    }

    #[test]
    fn build_povm_examples() {
        let z = build_povm(&builtin_set("z").unwrap());
        assert_eq!(z.elements()[0], CMatrix::unit(2, 0, 0));
        assert_eq!(z.elements()[1], CMatrix::unit(2, 1, 1));

        // |+y⟩: ⟨+y|0⟩ = 1/√2, ⟨+y|1⟩ = −i/√2, α = 2
        let zy = build_povm(&builtin_set("zy").unwrap());
        let expected = CMatrix::diagonal(&[c(0.5, 0.0), c(0.0, -0.5)]);
        assert!(zy.elements()[2].approx_eq(&expected, 1e-15));

        for set in all_sets() {
            let povm = build_povm(&set);
            let d = set.dim();
            let sum = povm
                .elements()
                .iter()
                .fold(CMatrix::zeros(d, d), |acc, m| &acc + &(&m.adjoint() * m));
            assert!(sum.approx_eq(&CMatrix::identity(d), 1e-12), "{}", set.name());
            for m in povm.elements() {
                for r in 0..d {
                    for col in 0..d {
                        if r != col {
                            assert_eq!(m.get(r, col), ZERO);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn informational_completeness() {
        assert!(!is_informationally_complete(&builtin_set("z").unwrap()));
        assert!(!is_informationally_complete(&builtin_set("zy").unwrap()));
        assert!(is_informationally_complete(&builtin_set("zyx").unwrap()));
        assert!(is_informationally_complete(&builtin_set("mub-d3").unwrap()));
        assert!(is_informationally_complete(&builtin_set("mub-d4").unwrap()));
    }

    #[test]
    fn completeness_is_invariant_under_rescaling_and_permutation() {
        for name in ["zy", "zyx", "mub-d3"] {
            let set = builtin_set(name).unwrap();
            let expected = is_informationally_complete(&set);
            let mut kets: Vec<CVector> = set.kets().iter().map(|k| k.scale(c(1.7, 0.0))).collect();
            kets.reverse();
            let scaled = MeasurementSet::new("scaled", kets).unwrap();
            assert_eq!(is_informationally_complete(&scaled), expected);
        }
    }

    #[test]
    fn invalid_sets_are_rejected() {
        let lone = MeasurementSet::new("x", vec![CVector::basis(2, 0)]);
        assert!(lone.is_err());
        let skew = MeasurementSet::new(
            "skew",
            vec![CVector::basis(2, 0), CVector::from_real(&[1.0, 1.0])],
        );
        assert!(matches!(skew, Err(Error::InvalidMeasurementSet(_))));
    }

    #[test]
    fn sampling_decomposition_examples() {
        let zyx = sampling_decomposition(&builtin_set("zyx").unwrap()).unwrap();
        assert_eq!(zyx, vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
        assert_eq!(sampling_decomposition(&builtin_set("zy").unwrap()).unwrap().len(), 2);
        assert_eq!(sampling_decomposition(&builtin_set("mub-d4").unwrap()).unwrap().len(), 5);

        let zy = builtin_set("zy").unwrap();
        let bases = sampling_decomposition(&zy).unwrap();
        let rho0 = CMatrix::unit(2, 0, 0);
        let probs = sampled_basis_probabilities(&zy, &bases, &rho0);
        assert!((probs[2] - 0.25).abs() < 1e-15);
        let direct = build_povm(&zy).probabilities(&rho0);
        assert!((direct[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sampling_decomposition_rejects_unequal_weights() {
        let kets = vec![
            CVector::basis(2, 0).scale(c(2.0, 0.0)),
            CVector::basis(2, 1).scale(c(2.0, 0.0)),
            CVector::new(vec![c(FRAC_1_SQRT_2, 0.0), c(FRAC_1_SQRT_2, 0.0)]),
            CVector::new(vec![c(FRAC_1_SQRT_2, 0.0), c(-FRAC_1_SQRT_2, 0.0)]),
        ];
        let set = MeasurementSet::new("uneven", kets).unwrap();
        assert!(sampling_decomposition(&set).is_err());
    }

    #[test]
    fn probabilities_are_normalized_and_match_basis_realization() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for set in all_sets() {
            let povm = build_povm(&set);
            let bases = sampling_decomposition(&set).unwrap();
            for _ in 0..100 {
                let rho = DensityMatrix::random(&mut rng, set.dim());
                let direct = povm.probabilities(rho.matrix());
                let total: f64 = direct.iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                let via_bases = sampled_basis_probabilities(&set, &bases, rho.matrix());
                for (a, b) in direct.iter().zip(&via_bases) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
