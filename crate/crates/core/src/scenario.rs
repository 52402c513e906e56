//! The qubit experiment: `ρ = |+⟩⟨+|`, `U₁ = R_x(θ)`, `U₂ = R_y(θ²)`, Z
//! measured at every time.

use crate::error::Result;
use crate::estimate::{exact_correlation, exact_qpd, expected_qpd, lgi_k, standard_e_choices, LgiResult, QpdTable};
use crate::povm::builtin_set;
use crate::protocol::{noisy_distribution, NoiseModel, Protocol, Step};
use crate::qcore::{CMatrix, C64};
use crate::qmodel::{rx, ry, Channel, DensityMatrix, Observable, RyConvention};
use crate::weights::{weights_for, Objective, WeightScope, WeightVector};

/// Angles where the QPDs are tabulated.
pub const QPD_THETAS: [f64; 2] = [0.3 * std::f64::consts::PI, 0.74 * std::f64::consts::PI];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Scenario {
    pub convention: RyConvention,
}

impl Scenario {
    pub fn new(convention: RyConvention) -> Self {
        Self { convention }
    }

    pub fn initial(&self) -> DensityMatrix {
        DensityMatrix::plus()
    }

    /// `[R_x(θ), R_y(θ²)]`.
    pub fn evolutions(&self, theta: f64) -> [Channel; 2] {
        [rx(theta), ry(theta * theta, self.convention)]
    }

    fn protocol(&self, theta: f64, sets: &[&str]) -> Result<Protocol> {
        let mut pre = vec![Channel::identity(2)?];
        pre.extend(self.evolutions(theta).into_iter().take(sets.len() - 1));
        let steps = pre
            .into_iter()
            .zip(sets)
            .map(|(ch, s)| Ok(Step::new(ch, builtin_set(s)?)))
            .collect::<Result<Vec<_>>>()?;
        Protocol::new(self.initial(), steps, true)
    }

    /// `zy` then a direct Z measurement.
    pub fn two_time_protocol(&self, theta: f64) -> Result<Protocol> {
        self.protocol(theta, &["zy", "z"])
    }

    pub fn three_time_protocol(&self, theta: f64) -> Result<Protocol> {
        self.protocol(theta, &["zy", "zy", "z"])
    }

    /// `zyx` at the first two times, then a direct Z measurement.
    pub fn qpd_protocol(&self, theta: f64, times: usize) -> Result<Protocol> {
        match times {
            2 => self.protocol(theta, &["zyx", "z"]),
            _ => self.protocol(theta, &["zyx", "zyx", "z"]),
        }
    }

    /// Projective Z measurements at every time.
    pub fn projective_protocol(&self, theta: f64, times: usize) -> Result<Protocol> {
        let sets = vec!["z"; times.clamp(1, 3)];
        self.protocol(theta, &sets)
    }

    pub fn exact_c2(&self, theta: f64) -> Result<C64> {
        let z = Observable::pauli_z();
        exact_correlation(&self.initial(), &[z.clone(), z], &self.evolutions(theta)[..1])
    }

    pub fn exact_c3(&self, theta: f64) -> Result<C64> {
        let z = Observable::pauli_z();
        exact_correlation(&self.initial(), &[z.clone(), z.clone(), z], &self.evolutions(theta))
    }

    pub fn exact_qpd(&self, theta: f64, times: usize) -> Result<QpdTable> {
        let proj: Vec<CMatrix> = Observable::pauli_z().projectors().to_vec();
        let ev = self.evolutions(theta);
        exact_qpd(&self.initial(), &vec![proj; times], &ev[..times - 1])
    }

    pub fn exact_lgi(&self, theta: f64) -> Result<LgiResult> {
        lgi_k(&self.exact_qpd(theta, 3)?, &standard_e_choices())
    }

    /// K the estimator converges to under gate noise and readout error,
    /// with MS-decomposed entangling gates.
    pub fn noisy_lgi(&self, theta: f64, noise: &NoiseModel) -> Result<LgiResult> {
        let p = self.qpd_protocol(theta, 3)?;
        let dist = noisy_distribution(&p, true, noise)?;
        lgi_k(&expected_qpd(&dist, &qpd_weight_table(3)?)?, &standard_e_choices())
    }
}

/// Closed form `−sin θ² − cos θ cos θ²` for the standard convention.
pub fn lgi_closed_form(theta: f64) -> f64 {
    let t2 = theta * theta;
    -t2.sin() - theta.cos() * t2.cos()
}

fn weight(set: &str, a: &str, scope: WeightScope) -> Result<WeightVector> {
    weights_for(
        &builtin_set(set)?,
        &Observable::identity(2)?,
        &Observable::named(a, 2)?,
        scope,
        Objective::MinInfNorm,
    )
}

/// `γ(Z)` on `zy` for each intermediate time and trace-only `γ(Z)` on `z`
/// for the final one.
pub fn correlation_weights(times: usize) -> Result<Vec<WeightVector>> {
    let mut out = Vec::with_capacity(times);
    for _ in 1..times {
        out.push(weight("zy", "Z", WeightScope::Full)?);
    }
    out.push(weight("z", "Z", WeightScope::TraceOnly)?);
    Ok(out)
}

/// `γ(Π_i)` on `zyx` for each intermediate time and on `z` for the last.
pub fn qpd_weight_table(times: usize) -> Result<Vec<Vec<WeightVector>>> {
    let mut out = Vec::with_capacity(times);
    for _ in 1..times {
        out.push(vec![weight("zyx", "P0", WeightScope::Full)?, weight("zyx", "P1", WeightScope::Full)?]);
    }
    out.push(vec![
        weight("z", "P0", WeightScope::TraceOnly)?,
        weight("z", "P1", WeightScope::TraceOnly)?,
    ]);
    Ok(out)
}

/// Weights reproducing projective statistics: `γ(Π_i)` on `z` at every time.
pub fn projective_weight_table(times: usize) -> Result<Vec<Vec<WeightVector>>> {
    (0..times)
        .map(|_| {
            Ok(vec![
                weight("z", "P0", WeightScope::TraceOnly)?,
                weight("z", "P1", WeightScope::TraceOnly)?,
            ])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::estimate::{estimate_correlation, estimate_lgi, expected_correlation, marginal};
    use crate::protocol::{exact_distribution, explicit_circuit_distribution, sample};
    use crate::qcore::c;

    #[test]
    fn correlations_match_closed_forms() {
        let s = Scenario::default();
        for theta in [0.0, 0.3 * PI, 0.74 * PI] {
            assert!((s.exact_c2(theta).unwrap() - c(theta.cos(), -theta.sin())).norm() < 1e-12);
            let d2 = exact_distribution(&s.two_time_protocol(theta).unwrap()).unwrap();
            let mean = expected_correlation(&d2, &correlation_weights(2).unwrap()).unwrap();
            assert!((mean - s.exact_c2(theta).unwrap()).norm() < 1e-12);
            let d3 = exact_distribution(&s.three_time_protocol(theta).unwrap()).unwrap();
            let mean = expected_correlation(&d3, &correlation_weights(3).unwrap()).unwrap();
            assert!((mean - s.exact_c3(theta).unwrap()).norm() < 1e-12);
        }
    }

    #[test]
    fn qpd_table_at_large_angle() {
        let q = Scenario::default().exact_qpd(0.74 * PI, 3).unwrap();
        let frozen = [
            ([0, 0, 0], c(0.0950, -0.2194)),
            ([0, 0, 1], c(-0.0161, 0.0372)),
            ([0, 1, 0], c(0.2383, 0.1031)),
            ([1, 0, 0], c(0.5071, 0.2194)),
            ([1, 0, 1], c(-0.0859, -0.0372)),
            ([1, 1, 1], c(0.0342, -0.0791)),
        ];
        for (idx, v) in frozen {
            assert!((q.get(&idx) - v).norm() < 1e-4, "{idx:?}: {}", q.get(&idx));
        }
    }

    #[test]
    fn literal_convention_mirrors_indices() {
        let std_q = Scenario::new(RyConvention::Standard).exact_qpd(0.74 * PI, 3).unwrap();
        let lit_q = Scenario::new(RyConvention::Literal).exact_qpd(0.74 * PI, 3).unwrap();
        for (idx, v) in std_q.iter() {
            let flipped: Vec<usize> = idx.iter().map(|i| 1 - i).collect();
            assert!((lit_q.get(&flipped) - v).norm() < 1e-12);
        }
        let k_lit = Scenario::new(RyConvention::Literal).exact_lgi(0.74 * PI).unwrap().k;
        assert!((k_lit + 0.332_936_192_731_446_26).abs() < 1e-9);
    }

    #[test]
    fn lgi_violation_at_large_angle() {
        let k = Scenario::default().exact_lgi(0.74 * PI).unwrap().k;
        assert!((k - lgi_closed_form(0.74 * PI)).abs() < 1e-12);
        assert!((k - 1.206_743_186_894_206_2).abs() < 1e-9);
    }

    #[test]
    fn noise_lowers_k() {
        let s = Scenario::default();
        let mut prev = f64::INFINITY;
        for p in [0.0, 0.02, 0.05, 0.1] {
            let noise = NoiseModel {
                entangling_depolarizing_p: p,
                ..NoiseModel::noiseless()
            };
            let k = s.noisy_lgi(0.74 * PI, &noise).unwrap().k;
            if p == 0.0 {
                assert!((k - s.exact_lgi(0.74 * PI).unwrap().k).abs() < 1e-12);
            }
            assert!(k < prev);
            prev = k;
        }
    }

    #[test]
    fn projective_baseline_is_balanced() {
        let s = Scenario::default();
        for theta in [0.2, 0.74 * PI, 3.0] {
            let d = exact_distribution(&s.projective_protocol(theta, 3).unwrap()).unwrap();
            let m = d.marginal(2);
            assert!((m[0] - 0.5).abs() < 1e-12);
            let qm = marginal(&s.exact_qpd(theta, 3).unwrap(), 2).unwrap();
            assert!((qm.values[0] - (1.0 - (theta * theta).sin()) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn path_equivalence_on_presets() {
        let s = Scenario::default();
        let p = s.qpd_protocol(0.74 * PI, 3).unwrap();
        let a = exact_distribution(&p).unwrap();
        let b = explicit_circuit_distribution(&p, true, None).unwrap();
        assert!(a.tv_distance(&b).unwrap() < 1e-10);
    }

    #[test]
    fn sampled_estimators_on_presets() {
        let s = Scenario::default();
        let theta = 0.74 * PI;
        let rec = sample(&s.qpd_protocol(theta, 3).unwrap(), 20_000, 2).unwrap();
        let lgi = estimate_lgi(&rec, &qpd_weight_table(3).unwrap(), &standard_e_choices()).unwrap();
        assert!((lgi.k.value.re - s.exact_lgi(theta).unwrap().k).abs() < 4.0 * lgi.k.sem_re);
        let rec = sample(&s.three_time_protocol(theta).unwrap(), 20_000, 3).unwrap();
        let e = estimate_correlation(&rec, &correlation_weights(3).unwrap()).unwrap();
        assert!(e.within(s.exact_c3(theta).unwrap(), 4.0));
    }
}
