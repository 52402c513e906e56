//! Weight decompositions `BρA = Σ_m γ_m M_m ρ M_m†` over a measurement set.
//!
//! With diagonal `B = diag(b)` and `A = diag(a)` the identity reduces to the
//! linear system `Tγ = αy`, one row per matrix unit `|i⟩⟨j|` (index `i + j·d`).
//! At the last time of a protocol only the trace survives, so a reduced
//! system that keeps the `i = j` rows is also available.


use microlp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem, Variable};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::povm::{build_povm, MeasurementSet};
use crate::qcore::{CMatrix, CVector, C64, ZERO};
use crate::qmodel::Observable;
use crate::serde_complex;

/// Largest residual accepted for `Tγ = αy`.
pub const FEASIBILITY_TOL: f64 = 1e-8;
const DIAGONAL_TOL: f64 = 1e-12;
const NULL_TOL: f64 = 1e-9;
const INITIAL_ANGLES: usize = 16;
const MAX_CUT_ROUNDS: usize = 400;
const GAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScope {
    /// Full operator identity on every ρ.
    #[default]
    Full,
    /// Only `Tr[BρA]` is reproduced; enough for the final measurement time.
    TraceOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Minimum-2-norm solution.
    AnyFeasible,
    /// Minimize `max_m |γ_m|`.
    #[default]
    MinInfNorm,
}

/// A diagonal operator kept by label and diagonal entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalOperator {
    pub label: String,
    pub diagonal: Vec<f64>,
}

impl DiagonalOperator {
    pub fn from_observable(obs: &Observable) -> Result<Self> {
        let diagonal = obs.diagonal(DIAGONAL_TOL).ok_or_else(|| {
            Error::InvalidObservable(format!(
                "{} is not diagonal in the computational basis; rotate the frame first",
                obs.label()
            ))
        })?;
        Ok(Self {
            label: obs.label().to_string(),
            diagonal,
        })
    }

    pub fn matrix(&self) -> CMatrix {
        let entries: Vec<C64> = self.diagonal.iter().map(|&x| C64::new(x, 0.0)).collect();
        CMatrix::diagonal(&entries)
    }
}

#[derive(Debug, Clone)]
pub struct WeightSystem {
    pub t: CMatrix,
    pub y: CVector,
    pub alpha: f64,
    pub scope: WeightScope,
    pub set_name: String,
    pub left: DiagonalOperator,
    pub right: DiagonalOperator,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub set: String,
    pub left: DiagonalOperator,
    pub right: DiagonalOperator,
    pub scope: WeightScope,
    #[serde(with = "serde_complex::vec")]
    pub gammas: Vec<C64>,
    pub gamma_max: f64,
}

impl WeightVector {
    pub fn new(
        set: impl Into<String>,
        left: DiagonalOperator,
        right: DiagonalOperator,
        scope: WeightScope,
        gammas: Vec<C64>,
    ) -> Self {
        let gamma_max = inf_norm(&gammas);
        Self {
            set: set.into(),
            left,
            right,
            scope,
            gammas,
            gamma_max,
        }
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }
}

fn inf_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn operators(set: &MeasurementSet, b: &Observable, a: &Observable) -> Result<(DiagonalOperator, DiagonalOperator)> {
    let d = set.dim();
    for obs in [b, a] {
        if obs.dim() != d {
            return Err(Error::DimensionMismatch {
                op: "build_system",
                left: (d, d),
                right: (obs.dim(), obs.dim()),
            });
        }
    }
    Ok((DiagonalOperator::from_observable(b)?, DiagonalOperator::from_observable(a)?))
}

/// Full system: rows indexed by `i + j·d` over all matrix units.
pub fn build_system(set: &MeasurementSet, b: &Observable, a: &Observable) -> Result<WeightSystem> {
    let (left, right) = operators(set, b, a)?;
    let d = set.dim();
    let kets = set.kets();
    let mut t = CMatrix::zeros(d * d, kets.len());
    let mut y = Vec::with_capacity(d * d);
    for j in 0..d {
        for i in 0..d {
            let row = i + j * d;
            for (m, phi) in kets.iter().enumerate() {
                t.set(row, m, phi.get(j).conj() * phi.get(i));
            }
            y.push(C64::new(right.diagonal[i] * left.diagonal[j], 0.0));
        }
    }
    Ok(WeightSystem {
        t,
        y: CVector::new(y),
        alpha: set.alpha(),
        scope: WeightScope::Full,
        set_name: set.name().to_string(),
        left,
        right,
        dim: d,
    })
}

/// Trace-only system: the `i = j` rows of the full system.
pub fn build_final_system(set: &MeasurementSet, b: &Observable, a: &Observable) -> Result<WeightSystem> {
    let (left, right) = operators(set, b, a)?;
    let d = set.dim();
    let kets = set.kets();
    let mut t = CMatrix::zeros(d, kets.len());
    let mut y = Vec::with_capacity(d);
    for i in 0..d {
        for (m, phi) in kets.iter().enumerate() {
            t.set(i, m, C64::new(phi.get(i).norm_sqr(), 0.0));
        }
        y.push(C64::new(right.diagonal[i] * left.diagonal[i], 0.0));
    }
    Ok(WeightSystem {
        t,
        y: CVector::new(y),
        alpha: set.alpha(),
        scope: WeightScope::TraceOnly,
        set_name: set.name().to_string(),
        left,
        right,
        dim: d,
    })
}

pub fn build_scoped_system(
    set: &MeasurementSet,
    b: &Observable,
    a: &Observable,
    scope: WeightScope,
) -> Result<WeightSystem> {
    match scope {
        WeightScope::Full => build_system(set, b, a),
        WeightScope::TraceOnly => build_final_system(set, b, a),
    }
}

impl WeightSystem {
    /// `‖Tγ − αy‖_∞`.
    pub fn residual(&self, gammas: &[C64]) -> f64 {
        let g = DVector::from_column_slice(gammas);
        let lhs = self.t.as_nalgebra() * g;
        lhs.iter()
            .zip(self.y.entries())
            .map(|(l, y)| (l - y * self.alpha).norm())
            .fold(0.0, f64::max)
    }

    /// Minimum-2-norm solution via SVD pseudo-inverse and a basis for the
    /// null space of `T`.
    fn particular_and_null(&self) -> Result<(Vec<C64>, Vec<Vec<C64>>)> {
        let (r, m) = self.t.shape();
        let rows = r.max(m);
        let mut padded = DMatrix::<C64>::zeros(rows, m);
        padded.view_mut((0, 0), (r, m)).copy_from(self.t.as_nalgebra());
        let svd = padded.svd(true, true);
        let u = svd.u.as_ref().ok_or_else(|| Error::Solver("SVD without U".into()))?;
        let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Solver("SVD without V".into()))?;
        let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let cutoff = NULL_TOL * sigma_max.max(1.0);

        let mut rhs = DVector::<C64>::zeros(rows);
        for (k, yk) in self.y.entries().into_iter().enumerate() {
            rhs[k] = yk * self.alpha;
        }
        let mut gamma = DVector::<C64>::zeros(m);
        let mut null = Vec::new();
        for (k, &s) in svd.singular_values.iter().enumerate() {
            let v_row = v_t.row(k);
            if s > cutoff {
                let coef = u.column(k).dotc(&rhs) / s;
                for c in 0..m {
                    gamma[c] += v_row[c].conj() * coef;
                }
            } else {
                null.push(v_row.iter().map(|z| z.conj()).collect());
            }
        }
        Ok((gamma.iter().copied().collect(), null))
    }
}

pub fn solve_weights(system: &WeightSystem, objective: Objective) -> Result<WeightVector> {
    let (gamma0, null) = system.particular_and_null()?;
    let residual = system.residual(&gamma0);
    if residual > FEASIBILITY_TOL {
        return Err(Error::Infeasible { residual });
    }
    let gammas = match objective {
        Objective::AnyFeasible => gamma0,
        Objective::MinInfNorm => minimize_inf_norm(&gamma0, &null)?,
    };
    let residual = system.residual(&gammas);
    if residual > FEASIBILITY_TOL {
        return Err(Error::Solver(format!("solution drifted off the constraint set ({residual:.3e})")));
    }
    Ok(WeightVector::new(
        system.set_name.clone(),
        system.left.clone(),
        system.right.clone(),
        system.scope,
        gammas,
    ))
}

/// Convenience: build and solve in one call.
pub fn weights_for(
    set: &MeasurementSet,
    b: &Observable,
    a: &Observable,
    scope: WeightScope,
    objective: Objective,
) -> Result<WeightVector> {
    solve_weights(&build_scoped_system(set, b, a, scope)?, objective)
}

/// Minimize `max_m |γ_m|` over `γ = γ0 + Σ_k c_k n_k`, `c ∈ ℝ`, where the
/// real directions are `n_k` and `i·n_k` for each complex null vector.
///
/// Each modulus bound `|γ_m| ≤ t` is relaxed to `Re(e^{-iψ}γ_m) ≤ t` for a
/// finite set of angles ψ; angles at the current `arg γ_m` are added until
/// the relaxation's `t` meets the true `max |γ_m|`.
fn minimize_inf_norm(gamma0: &[C64], null: &[Vec<C64>]) -> Result<Vec<C64>> {
    if null.is_empty() {
        return Ok(gamma0.to_vec());
    }
    let dirs: Vec<Vec<C64>> = null
        .iter()
        .flat_map(|n| [n.clone(), n.iter().map(|z| z * C64::new(0.0, 1.0)).collect()])
        .collect();
    let q = dirs.len();
    let m = gamma0.len();
    let t0 = inf_norm(gamma0);

    let combine = |c: &[f64]| -> Vec<C64> {
        (0..m)
            .map(|i| gamma0[i] + dirs.iter().zip(c).map(|(d, &ck)| d[i] * ck).sum::<C64>())
            .collect()
    };

    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let cs: Vec<Variable> = (0..q).map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    let t = lp.add_var(1.0, (0.0, f64::INFINITY));
    // Re(e^{-iψ}(γ0_i + Σ c_k d_k,i)) ≤ t
    let cut = |i: usize, psi: f64| -> (LinearExpr, f64) {
        let rot = C64::from_polar(1.0, -psi);
        let mut expr = LinearExpr::empty();
        for (var, d) in cs.iter().zip(&dirs) {
            expr.add(*var, (rot * d[i]).re);
        }
        expr.add(t, -1.0);
        (expr, -(rot * gamma0[i]).re)
    };
    for i in 0..m {
        for k in 0..INITIAL_ANGLES {
            let (expr, rhs) = cut(i, 2.0 * std::f64::consts::PI * k as f64 / INITIAL_ANGLES as f64);
            lp.add_constraint(expr, ComparisonOp::Le, rhs);
        }
    }
    let mut sol = lp.solve().map_err(|e| Error::Solver(format!("minimax LP: {e}")))?;

    let mut best = gamma0.to_vec();
    let mut best_ub = t0;
    for _ in 0..MAX_CUT_ROUNDS {
        let c: Vec<f64> = cs.iter().map(|v| *sol.var_value(*v)).collect();
        let lower = *sol.var_value(t);
        let gamma = combine(&c);
        let ub = inf_norm(&gamma);
        if ub < best_ub {
            best_ub = ub;
            best = gamma.clone();
        }
        let tol = GAP_TOL * best_ub.max(1.0);
        if best_ub - lower <= tol {
            break;
        }
        let violated: Vec<usize> = (0..m).filter(|&i| gamma[i].norm() > lower + tol).collect();
        if violated.is_empty() {
            break;
        }
        for i in violated {
            let (expr, rhs) = cut(i, gamma[i].arg());
            sol = sol
                .add_constraint(expr, ComparisonOp::Le, rhs)
                .map_err(|e| Error::Solver(format!("minimax LP: {e}")))?;
        }
    }
    Ok(best)
}

/// Maximum deviation of the decomposition over the matrix units. For
/// trace-only weights the comparison is between traces.
pub fn verify_weights(set: &MeasurementSet, w: &WeightVector) -> Result<f64> {
    let d = set.dim();
    if w.gammas.len() != set.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} outcomes",
            w.gammas.len(),
            set.len()
        )));
    }
    if w.left.diagonal.len() != d || w.right.diagonal.len() != d {
        return Err(Error::ShapeMismatch("operator dimension differs from the set".into()));
    }
    let povm = build_povm(set);
    let b = w.left.matrix();
    let a = w.right.matrix();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let e = CMatrix::unit(d, i, j);
            let target = &(&b * &e) * &a;
            let mut recon = CMatrix::zeros(d, d);
            for (g, mm) in w.gammas.iter().zip(povm.elements()) {
                let term = (&(mm * &e) * &mm.adjoint()).scale(*g);
                recon = &recon + &term;
            }
            let dev = match w.scope {
                WeightScope::Full => target.max_abs_diff(&recon),
                WeightScope::TraceOnly => (target.trace()? - recon.trace()?).norm(),
            };
            worst = worst.max(dev);
        }
    }
    Ok(worst)
}

/// Samples needed so that real and imaginary parts of a mean with per-sample
/// bound `gamma_max_product` both land within ε with probability ≥ 1 − δ.
pub fn hoeffding_n(gamma_max_product: f64, epsilon: f64, delta: f64) -> Result<u64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(gamma_max_product >= 0.0 && gamma_max_product.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gamma_max_product must be non-negative, got {gamma_max_product}"
        )));
    }
    let n = gamma_max_product.powi(2) * (4.0 / delta).ln() / (2.0 * epsilon * epsilon);
    Ok(n.ceil() as u64)
}

/// Apply a decomposition to an operator: `Σ_m γ_m M_m X M_m†`.
pub fn reconstruct(set: &MeasurementSet, gammas: &[C64], x: &CMatrix) -> Result<CMatrix> {
    if gammas.len() != set.len() {
        return Err(Error::ShapeMismatch(format!("{} weights for {} outcomes", gammas.len(), set.len())));
    }
    let povm = build_povm(set);
    let mut acc = CMatrix::zeros(set.dim(), set.dim());
    for (g, mm) in gammas.iter().zip(povm.elements()) {
        if *g == ZERO {
            continue;
        }
        let term = mm.compose(x)?.compose(&mm.adjoint())?.scale(*g);
        acc = acc.try_add(&term)?;
    }
    Ok(acc)
}
