//! Quantum objects: density matrices, observables with spectral data,
//! unitary and Kraus channels, and the named gates used by the
//! measurement circuit (single-qubit rotations, CNOT/CSUM, Mølmer–Sørensen).

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::qcore::{c, CMatrix, CVector, C64, DEFAULT_TOL, I, MAX_DIM, ONE, ZERO};

/// Eigenvalues closer than this are merged into a single projector.
pub const DEGENERACY_TOL: f64 = 1e-9;

pub fn pauli_x() -> CMatrix {
    CMatrix::from_row_major(2, 2, vec![ZERO, ONE, ONE, ZERO]).unwrap()
}

pub fn pauli_y() -> CMatrix {
    CMatrix::from_row_major(2, 2, vec![ZERO, -I, I, ZERO]).unwrap()
}

pub fn pauli_z() -> CMatrix {
    CMatrix::from_row_major(2, 2, vec![ONE, ZERO, ZERO, -ONE]).unwrap()
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    if d > MAX_DIM {
        return Err(Error::DimensionTooLarge(d));
    }
    Ok(())
}

/// A trace-one positive semidefinite operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    mat: CMatrix,
}

impl DensityMatrix {
    pub fn new(mat: CMatrix) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::InvalidState(format!(
                "not square: {}x{}",
                mat.rows(),
                mat.cols()
            )));
        }
        check_dim(mat.rows())?;
        if !mat.is_hermitian(DEFAULT_TOL) {
            return Err(Error::InvalidState("not Hermitian".into()));
        }
        let tr = mat.trace()?;
        if (tr - ONE).norm() > DEFAULT_TOL {
            return Err(Error::InvalidState(format!("trace {tr} is not 1")));
        }
        if !mat.is_psd(DEFAULT_TOL) {
            return Err(Error::InvalidState("negative eigenvalue".into()));
        }
        Ok(DensityMatrix { mat })
    }

    /// Pure state `|ψ⟩⟨ψ|`; the ket is normalized first.
    pub fn from_ket(ket: &CVector) -> Result<Self> {
        if ket.norm() == 0.0 {
            return Err(Error::InvalidState("zero ket".into()));
        }
        Self::new(ket.normalized().projector())
    }

    pub fn zero(d: usize) -> Result<Self> {
        check_dim(d)?;
        Ok(DensityMatrix {
            mat: CMatrix::unit(d, 0, 0),
        })
    }

    /// `|+⟩⟨+|` for a qubit.
    pub fn plus() -> Self {
        DensityMatrix {
            mat: CMatrix::from_real(2, 2, &[0.5, 0.5, 0.5, 0.5]).unwrap(),
        }
    }

    pub fn maximally_mixed(d: usize) -> Result<Self> {
        check_dim(d)?;
        Ok(DensityMatrix {
            mat: CMatrix::identity(d).scale_real(1.0 / d as f64),
        })
    }

    /// Random full-rank state `G G† / Tr[G G†]` with uniformly drawn entries.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Self {
        let g = random_matrix(rng, d);
        let m = &g * &g.adjoint();
        let tr = m.trace().unwrap().re;
        DensityMatrix {
            mat: m.scale_real(1.0 / tr),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn into_matrix(self) -> CMatrix {
        self.mat
    }

    /// `Tr[ρ A]`.
    pub fn expectation(&self, a: &CMatrix) -> Result<C64> {
        self.mat.compose(a)?.trace()
    }
}

fn random_matrix<R: Rng + ?Sized>(rng: &mut R, d: usize) -> CMatrix {
    let entries = (0..d * d)
        .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    CMatrix::from_row_major(d, d, entries).unwrap()
}

/// Random unitary from the QR factor of a random complex matrix.
pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R, d: usize) -> CMatrix {
    let g = random_matrix(rng, d);
    let q: DMatrix<C64> = g.as_nalgebra().clone().qr().q();
    CMatrix::from_nalgebra(q)
}

/// Hermitian operator together with its spectral decomposition
/// `A = Σ_i a_i Π_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    label: String,
    mat: CMatrix,
    eigenvalues: Vec<f64>,
    projectors: Vec<CMatrix>,
}

impl Observable {
    /// Computes the spectral decomposition of a Hermitian matrix.
    ///
    /// Diagonal matrices keep projector index `i` aligned with the first
    /// computational basis state carrying that eigenvalue, so for `Z` the
    /// index 0 projector is `|0⟩⟨0|`. Other matrices list eigenvalues in
    /// descending order.
    pub fn from_matrix(label: impl Into<String>, mat: CMatrix) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::InvalidObservable("not square".into()));
        }
        check_dim(mat.rows())?;
        if !mat.is_hermitian(DEFAULT_TOL) {
            return Err(Error::InvalidObservable("not Hermitian".into()));
        }
        let (eigenvalues, projectors) = if mat.is_diagonal(0.0) {
            diagonal_spectrum(&mat)
        } else if mat.rows() == 2 {
            qubit_spectrum(&mat)
        } else {
            numeric_spectrum(&mat)?
        };
        Ok(Observable {
            label: label.into(),
            mat,
            eigenvalues,
            projectors,
        })
    }

    /// Builds `Σ_i a_i Π_i` from explicit spectral data, checking that the
    /// projectors are orthogonal and complete.
    pub fn from_spectral(
        label: impl Into<String>,
        eigenvalues: Vec<f64>,
        projectors: Vec<CMatrix>,
    ) -> Result<Self> {
        if eigenvalues.len() != projectors.len() || projectors.is_empty() {
            return Err(Error::InvalidObservable(
                "eigenvalue and projector counts differ".into(),
            ));
        }
        let d = projectors[0].rows();
        check_dim(d)?;
        let mut sum = CMatrix::zeros(d, d);
        let mut mat = CMatrix::zeros(d, d);
        for (k, p) in projectors.iter().enumerate() {
            if p.shape() != (d, d) {
                return Err(Error::InvalidObservable("projector shapes differ".into()));
            }
            for (l, q) in projectors.iter().enumerate() {
                let expected = if k == l { p.clone() } else { CMatrix::zeros(d, d) };
                if !(p * q).approx_eq(&expected, DEFAULT_TOL) {
                    return Err(Error::InvalidObservable(
                        "projectors are not orthogonal idempotents".into(),
                    ));
                }
            }
            sum = &sum + p;
            mat = &mat + &p.scale_real(eigenvalues[k]);
        }
        if !sum.approx_eq(&CMatrix::identity(d), DEFAULT_TOL) {
            return Err(Error::InvalidObservable("projectors do not sum to I".into()));
        }
        Ok(Observable {
            label: label.into(),
            mat,
            eigenvalues,
            projectors,
        })
    }

    pub fn identity(d: usize) -> Result<Self> {
        Self::from_matrix("I", CMatrix::identity(d))
    }

    /// `|k⟩⟨k|` in dimension `d`, as an observable with eigenvalues {1, 0}.
    pub fn projector(d: usize, k: usize) -> Result<Self> {
        if k >= d {
            return Err(Error::InvalidParameter(format!("projector index {k} >= {d}")));
        }
        Self::from_matrix(format!("P{k}"), CMatrix::unit(d, k, k))
    }

    pub fn pauli_x() -> Self {
        Self::from_matrix("X", pauli_x()).unwrap()
    }

    pub fn pauli_y() -> Self {
        Self::from_matrix("Y", pauli_y()).unwrap()
    }

    pub fn pauli_z() -> Self {
        Self::from_matrix("Z", pauli_z()).unwrap()
    }

    /// Resolves `I`, `X`, `Y`, `Z` (qubits only for the Paulis) and `P<k>`.
    pub fn named(name: &str, d: usize) -> Result<Self> {
        match name {
            "I" => Self::identity(d),
            "X" | "Y" | "Z" if d != 2 => Err(Error::UnknownName(format!(
                "{name} is only defined for qubits (dimension {d})"
            ))),
            "X" => Ok(Self::pauli_x()),
            "Y" => Ok(Self::pauli_y()),
            "Z" => Ok(Self::pauli_z()),
            _ => match name.strip_prefix('P').and_then(|k| k.parse::<usize>().ok()) {
                Some(k) => Self::projector(d, k),
                None => Err(Error::UnknownName(format!("observable {name:?}"))),
            },
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn projectors(&self) -> &[CMatrix] {
        &self.projectors
    }

    /// Real diagonal entries, if the operator is diagonal in the
    /// computational basis.
    pub fn diagonal(&self, tol: f64) -> Option<Vec<f64>> {
        if !self.mat.is_diagonal(tol) {
            return None;
        }
        Some(self.mat.diagonal_entries().iter().map(|z| z.re).collect())
    }
}

fn diagonal_spectrum(mat: &CMatrix) -> (Vec<f64>, Vec<CMatrix>) {
    let d = mat.rows();
    let mut values: Vec<f64> = Vec::new();
    let mut projectors: Vec<CMatrix> = Vec::new();
    for i in 0..d {
        let a = mat.get(i, i).re;
        match values.iter().position(|&v| (v - a).abs() <= DEGENERACY_TOL) {
            Some(k) => projectors[k].set(i, i, ONE),
            None => {
                values.push(a);
                projectors.push(CMatrix::unit(d, i, i));
            }
        }
    }
    (values, projectors)
}

fn qubit_spectrum(mat: &CMatrix) -> (Vec<f64>, Vec<CMatrix>) {
    let a = mat.get(0, 0).re;
    let dd = mat.get(1, 1).re;
    let b = mat.get(0, 1);
    let mean = 0.5 * (a + dd);
    let r = (0.25 * (a - dd).powi(2) + b.norm_sqr()).sqrt();
    if 2.0 * r <= DEGENERACY_TOL {
        return (vec![mean], vec![CMatrix::identity(2)]);
    }
    let (hi, lo) = (mean + r, mean - r);
    let id = CMatrix::identity(2);
    let p_hi = (mat - &id.scale_real(lo)).scale_real(1.0 / (hi - lo));
    let p_lo = &id - &p_hi;
    (vec![hi, lo], vec![p_hi, p_lo])
}

fn numeric_spectrum(mat: &CMatrix) -> Result<(Vec<f64>, Vec<CMatrix>)> {
    let d = mat.rows();
    let (vals, vecs) = mat.hermitian_eigen()?;
    let mut values: Vec<f64> = Vec::new();
    let mut projectors: Vec<CMatrix> = Vec::new();
    for (val, vec) in vals.iter().zip(&vecs).rev() {
        let p = vec.projector();
        match values.iter().position(|&v| (v - val).abs() <= DEGENERACY_TOL) {
            Some(k) => projectors[k] = &projectors[k] + &p,
            None => {
                values.push(*val);
                projectors.push(p);
            }
        }
    }
    debug_assert_eq!(projectors.iter().map(|p| p.rows()).sum::<usize>(), d * values.len());
    Ok((values, projectors))
}

/// `A(t) = U† A U`, with the projectors transformed the same way.
pub fn heisenberg(a: &Observable, u: &Channel) -> Result<Observable> {
    let um = u
        .unitary_matrix()
        .ok_or_else(|| Error::InvalidChannel("Heisenberg evolution needs a unitary".into()))?;
    if um.rows() != a.dim() {
        return Err(Error::DimensionMismatch {
            op: "heisenberg",
            left: a.matrix().shape(),
            right: um.shape(),
        });
    }
    let ud = um.adjoint();
    Ok(Observable {
        label: a.label.clone(),
        mat: a.mat.conjugate_by(&ud),
        eigenvalues: a.eigenvalues.clone(),
        projectors: a.projectors.iter().map(|p| p.conjugate_by(&ud)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    Unitary,
    Kraus,
}

/// A CPTP map given either by one unitary or by a Kraus set.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    kind: ChannelKind,
    operators: Vec<CMatrix>,
}

impl Channel {
    pub fn unitary(u: CMatrix) -> Result<Self> {
        check_dim(u.rows())?;
        if !u.is_unitary(DEFAULT_TOL) {
            return Err(Error::InvalidChannel("matrix is not unitary".into()));
        }
        Ok(Channel {
            kind: ChannelKind::Unitary,
            operators: vec![u],
        })
    }

    pub fn kraus(operators: Vec<CMatrix>) -> Result<Self> {
        let first = operators
            .first()
            .ok_or_else(|| Error::InvalidChannel("empty Kraus set".into()))?;
        let d = first.rows();
        check_dim(d)?;
        let mut sum = CMatrix::zeros(d, d);
        for k in &operators {
            if k.shape() != (d, d) {
                return Err(Error::InvalidChannel("Kraus operator shapes differ".into()));
            }
            sum = &sum + &(&k.adjoint() * k);
        }
        if !sum.approx_eq(&CMatrix::identity(d), DEFAULT_TOL) {
            return Err(Error::InvalidChannel(
                "Kraus operators are not trace preserving".into(),
            ));
        }
        Ok(Channel {
            kind: ChannelKind::Kraus,
            operators,
        })
    }

    pub fn identity(d: usize) -> Result<Self> {
        Self::unitary(CMatrix::identity(d))
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn operators(&self) -> &[CMatrix] {
        &self.operators
    }

    pub fn dim(&self) -> usize {
        self.operators[0].rows()
    }

    pub fn unitary_matrix(&self) -> Option<&CMatrix> {
        match self.kind {
            ChannelKind::Unitary => Some(&self.operators[0]),
            ChannelKind::Kraus => None,
        }
    }

    /// `Σ_k K ρ K†` on an arbitrary (possibly unnormalized) operator.
    pub fn apply_to(&self, rho: &CMatrix) -> Result<CMatrix> {
        if rho.rows() != self.dim() || !rho.is_square() {
            return Err(Error::DimensionMismatch {
                op: "apply_channel",
                left: rho.shape(),
                right: self.operators[0].shape(),
            });
        }
        let mut out = CMatrix::zeros(rho.rows(), rho.cols());
        for k in &self.operators {
            out = &out + &rho.conjugate_by(k);
        }
        Ok(out)
    }

    /// Sequential composition: `self` first, then `next`.
    pub fn then(&self, next: &Channel) -> Result<Channel> {
        if self.dim() != next.dim() {
            return Err(Error::DimensionMismatch {
                op: "then",
                left: self.operators[0].shape(),
                right: next.operators[0].shape(),
            });
        }
        let operators: Vec<CMatrix> = next
            .operators
            .iter()
            .flat_map(|b| self.operators.iter().map(move |a| b * a))
            .collect();
        if self.kind == ChannelKind::Unitary && next.kind == ChannelKind::Unitary {
            Channel::unitary(operators.into_iter().next().unwrap())
        } else {
            Channel::kraus(operators)
        }
    }
}

/// `U ρ U†` or `Σ K ρ K†`, validated as a density matrix.
pub fn apply_channel(rho: &DensityMatrix, channel: &Channel) -> Result<DensityMatrix> {
    DensityMatrix::new(channel.apply_to(rho.matrix())?)
}

/// `R(θ, φ) = [[cos θ/2, −i e^{−iφ} sin θ/2], [−i e^{iφ} sin θ/2, cos θ/2]]`.
pub fn rotation_matrix(theta: f64, phi: f64) -> CMatrix {
    let (s, co) = (0.5 * theta).sin_cos();
    let off_upper = -I * C64::from_polar(1.0, -phi) * s;
    let off_lower = -I * C64::from_polar(1.0, phi) * s;
    CMatrix::from_row_major(2, 2, vec![c(co, 0.0), off_upper, off_lower, c(co, 0.0)]).unwrap()
}

pub fn rotation_gate(theta: f64, phi: f64) -> Channel {
    Channel {
        kind: ChannelKind::Unitary,
        operators: vec![rotation_matrix(theta, phi)],
    }
}

/// `R_x(θ) = R(θ, 0) = exp(−iθX/2)`.
pub fn rx(theta: f64) -> Channel {
    rotation_gate(theta, 0.0)
}

/// Which azimuth realizes a `y`-axis rotation.
///
/// `Literal` is `R(θ, −π/2) = exp(+iθY/2)`; `Standard` is
/// `R(θ, +π/2) = exp(−iθY/2)`. The two differ in the sense of rotation and
/// give opposite signs for every three-time term linear in `⟨Z(t₃)⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RyConvention {
    #[default]
    Standard,
    Literal,
}

impl RyConvention {
    pub fn phi(self) -> f64 {
        match self {
            RyConvention::Standard => FRAC_PI_2,
            RyConvention::Literal => -FRAC_PI_2,
        }
    }
}

pub fn ry(theta: f64, convention: RyConvention) -> Channel {
    rotation_gate(theta, convention.phi())
}

/// `Σ_{i,j} |i, i⊕j⟩⟨i, j|`; control is the first (system) factor.
pub fn csum_matrix(d: usize) -> Result<CMatrix> {
    if d < 2 {
        return Err(Error::InvalidParameter(format!("CSUM needs d >= 2, got {d}")));
    }
    if d * d > MAX_DIM {
        return Err(Error::DimensionTooLarge(d * d));
    }
    let mut u = CMatrix::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            u.set(i * d + (i + j) % d, i * d + j, ONE);
        }
    }
    Ok(u)
}

pub fn csum_gate(d: usize) -> Result<Channel> {
    Ok(Channel {
        kind: ChannelKind::Unitary,
        operators: vec![csum_matrix(d)?],
    })
}

pub fn cnot() -> Channel {
    csum_gate(2).unwrap()
}

/// `exp(iπ/4 X⊗X) = cos(π/4) I + i sin(π/4) X⊗X`.
pub fn ms_matrix() -> CMatrix {
    let xx = pauli_x().tensor(&pauli_x());
    let id = CMatrix::identity(4);
    &id.scale_real(FRAC_PI_4.cos()) + &xx.scale(I * FRAC_PI_4.sin())
}

pub fn ms_gate() -> Channel {
    Channel {
        kind: ChannelKind::Unitary,
        operators: vec![ms_matrix()],
    }
}

/// One element of a two-qubit gate sequence. Qubit 0 is the system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateOp {
    Rotation { qubit: usize, theta: f64, phi: f64 },
    Ms,
}

impl GateOp {
    pub fn matrix(&self) -> CMatrix {
        match *self {
            GateOp::Ms => ms_matrix(),
            GateOp::Rotation { qubit, theta, phi } => {
                let r = rotation_matrix(theta, phi);
                let id = CMatrix::identity(2);
                if qubit == 0 {
                    r.tensor(&id)
                } else {
                    id.tensor(&r)
                }
            }
        }
    }
}

/// CNOT (system control, ancilla target) as one MS gate dressed by four
/// single-qubit rotations, in time order.
pub fn cnot_from_ms() -> Vec<GateOp> {
    vec![
        GateOp::Rotation { qubit: 0, theta: FRAC_PI_2, phi: FRAC_PI_2 },
        GateOp::Ms,
        GateOp::Rotation { qubit: 0, theta: FRAC_PI_2, phi: 0.0 },
        GateOp::Rotation { qubit: 1, theta: FRAC_PI_2, phi: 0.0 },
        GateOp::Rotation { qubit: 0, theta: FRAC_PI_2, phi: -FRAC_PI_2 },
    ]
}

/// Product of a time-ordered gate list (later gates multiply on the left).
pub fn sequence_unitary(ops: &[GateOp]) -> CMatrix {
    ops.iter()
        .fold(CMatrix::identity(4), |acc, op| &op.matrix() * &acc)
}

fn pauli_strings(n_qubits: usize) -> Vec<CMatrix> {
    let single = [CMatrix::identity(2), pauli_x(), pauli_y(), pauli_z()];
    let mut out = vec![CMatrix::identity(1)];
    for _ in 0..n_qubits {
        out = out
            .iter()
            .flat_map(|p| single.iter().map(move |s| p.tensor(s)))
            .collect();
    }
    out
}

/// `ρ ↦ (1−p) ρ + p I/d` on `n_qubits`, written as Kraus operators over the
/// Pauli strings (identity first).
pub fn depolarizing_channel(p: f64, n_qubits: usize) -> Result<Channel> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("depolarizing p = {p} not in [0, 1]")));
    }
    if n_qubits == 0 || (1usize << n_qubits) > MAX_DIM {
        return Err(Error::InvalidParameter(format!("unsupported qubit count {n_qubits}")));
    }
    let strings = pauli_strings(n_qubits);
    let n = strings.len() as f64;
    let ops = strings
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            let weight = if k == 0 { 1.0 - p + p / n } else { p / n };
            s.scale_real(weight.sqrt())
        })
        .collect();
    Channel::kraus(ops)
}

/// Depolarizing strength that turns a pure state (for the two-qubit gate,
/// a Bell state) into one with fidelity `f`: `F = 1 − p (d−1)/d`, `d = 2^n`.
pub fn depolarizing_from_fidelity(f: f64, n_qubits: usize) -> Result<f64> {
    let d = (1usize << n_qubits) as f64;
    let floor = 1.0 / d;
    if !(floor..=1.0).contains(&f) {
        return Err(Error::InvalidParameter(format!(
            "fidelity {f} not in [{floor}, 1]"
        )));
    }
    Ok((1.0 - f) * d / (d - 1.0))
}

/// Phase flip with probability `p`: `{√(1−p) I, √p Z}`.
pub fn dephasing_channel(p: f64) -> Result<Channel> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("dephasing p = {p} not in [0, 1]")));
    }
    Channel::kraus(vec![
        CMatrix::identity(2).scale_real((1.0 - p).sqrt()),
        pauli_z().scale_real(p.sqrt()),
    ])
}
