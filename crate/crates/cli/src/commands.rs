//! Subcommand implementations. Each returns serializable data; `main`
//! decides where it goes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ancilla_qpd::estimate::{
    estimate_correlation, estimate_lgi, estimate_qpd, exact_correlation, exact_qpd, expected_correlation,
    expected_qpd, lgi_k, marginal, standard_e_choices, sweep, Estimate, LgiEstimate, LgiResult, Marginal,
    QpdTableJson, SweepRow, ThetaGrid,
};
use ancilla_qpd::povm::builtin_set;
use ancilla_qpd::protocol::{
    exact_distribution, noisy_distribution, sample, sample_from_distribution, NoiseModel, Protocol,
    TrajectoryRecord,
};
use ancilla_qpd::qmodel::{Channel, DensityMatrix, Observable, RyConvention};
use ancilla_qpd::scenario::lgi_closed_form;
use ancilla_qpd::weights::{build_scoped_system, solve_weights, verify_weights, Objective, WeightScope, WeightVector};
use ancilla_qpd::{Error, C64};
use serde::{Deserialize, Serialize};

use crate::config::{EstimatorSpec, RunConfig};
use crate::error::CliError;

pub const SEED_ENV: &str = "ANCILLA_QPD_SEED";
pub const DEFAULT_SEED: u64 = 1;

/// Flag, then config, then environment, then the built-in default.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not a u64"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScopeChoice {
    /// Full identity when solvable, otherwise trace-only.
    Auto,
    Full,
    Final,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsOutput {
    #[serde(flatten)]
    pub weights: WeightVector,
    pub residual: f64,
}

pub fn cmd_weights(
    set_name: &str,
    b_name: &str,
    a_name: &str,
    objective: Objective,
    scope: ScopeChoice,
) -> Result<(WeightsOutput, Option<String>), CliError> {
    let set = builtin_set(set_name)?;
    let b = Observable::named(b_name, set.dim())?;
    let a = Observable::named(a_name, set.dim())?;
    let solve = |s: WeightScope| solve_weights(&build_scoped_system(&set, &b, &a, s)?, objective);
    let (weights, warning) = match scope {
        ScopeChoice::Full => (solve(WeightScope::Full)?, None),
        ScopeChoice::Final => (solve(WeightScope::TraceOnly)?, None),
        ScopeChoice::Auto => match solve(WeightScope::Full) {
            Ok(w) => (w, None),
            Err(Error::Infeasible { residual }) => (
                solve(WeightScope::TraceOnly)?,
                Some(format!(
                    "set {set_name} cannot reproduce {b_name}·ρ·{a_name} for every ρ (residual {residual:.3e}); \
                     returning final-time (trace-only) weights"
                )),
            ),
            Err(e) => return Err(e.into()),
        },
    };
    let residual = verify_weights(&set, &weights)?;
    Ok((WeightsOutput { weights, residual }, warning))
}

/// Weights derived from a config's estimator; the last time only needs the
/// trace identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigWeights {
    Correlation(Vec<WeightVector>),
    Qpd(Vec<Vec<WeightVector>>),
}

fn step_scope(p: &Protocol, k: usize) -> WeightScope {
    if k + 1 == p.len() {
        WeightScope::TraceOnly
    } else {
        WeightScope::Full
    }
}

fn solve_for(p: &Protocol, k: usize, a: &Observable) -> Result<WeightVector, CliError> {
    let set = p.measured_set(k);
    let b = Observable::identity(set.dim())?;
    Ok(solve_weights(&build_scoped_system(set, &b, a, step_scope(p, k))?, Objective::MinInfNorm)?)
}

fn projector_observables(obs: &Observable) -> Result<Vec<Observable>, CliError> {
    obs.projectors()
        .iter()
        .enumerate()
        .map(|(i, p)| Ok(Observable::from_matrix(format!("{}[{i}]", obs.label()), p.clone())?))
        .collect()
}

pub fn config_weights(cfg: &RunConfig, p: &Protocol) -> Result<ConfigWeights, CliError> {
    match cfg.estimator() {
        EstimatorSpec::Correlation(names) => {
            let obs = cfg.observables(&names)?;
            Ok(ConfigWeights::Correlation(
                obs.iter().enumerate().map(|(k, a)| solve_for(p, k, a)).collect::<Result<_, _>>()?,
            ))
        }
        EstimatorSpec::Qpd(names) => {
            let obs = cfg.observables(&names)?;
            Ok(ConfigWeights::Qpd(
                obs.iter()
                    .enumerate()
                    .map(|(k, a)| {
                        projector_observables(a)?
                            .iter()
                            .map(|pa| solve_for(p, k, pa))
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<_, _>>()?,
            ))
        }
    }
}

/// State at `t₁` and the unitary evolutions between later times.
fn oracle_inputs(p: &Protocol) -> Result<(DensityMatrix, Vec<Channel>), CliError> {
    let rho = ancilla_qpd::qmodel::apply_channel(p.initial(), &p.steps()[0].pre_channel)?;
    let channels = p.steps()[1..].iter().map(|s| s.pre_channel.clone()).collect();
    Ok((rho, channels))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qpd: Option<QpdTableJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marginals: Option<Vec<Marginal>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lgi: Option<LgiResult>,
    /// Mean the estimator converges to under the configured noise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noisy_correlation: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noisy_lgi: Option<LgiResult>,
    pub distribution: BTreeMap<String, f64>,
}

fn pair(z: C64) -> [f64; 2] {
    [z.re, z.im]
}

fn binary3(shape: &[usize]) -> bool {
    shape == [2, 2, 2]
}

pub fn cmd_oracle(cfg: &RunConfig) -> Result<OracleOutput, CliError> {
    let p = cfg.protocol()?;
    let (rho, channels) = oracle_inputs(&p)?;
    let dist = exact_distribution(&p)?;
    let noisy = match &cfg.noise {
        Some(n) => Some(noisy_distribution(&p, p.dim() == 2, n)?),
        None => None,
    };
    let mut out = OracleOutput {
        theta: cfg.theta,
        correlation: None,
        qpd: None,
        marginals: None,
        lgi: None,
        noisy_correlation: None,
        noisy_lgi: None,
        distribution: dist.to_map(),
    };
    match (cfg.estimator(), config_weights(cfg, &p)?) {
        (EstimatorSpec::Correlation(names), ConfigWeights::Correlation(w)) => {
            out.correlation = Some(pair(exact_correlation(&rho, &cfg.observables(&names)?, &channels)?));
            if let Some(nd) = &noisy {
                out.noisy_correlation = Some(pair(expected_correlation(nd, &w)?));
            }
        }
        (EstimatorSpec::Qpd(names), ConfigWeights::Qpd(table)) => {
            let lists: Vec<_> = cfg
                .observables(&names)?
                .iter()
                .map(|o| o.projectors().to_vec())
                .collect();
            let q = exact_qpd(&rho, &lists, &channels)?;
            out.marginals = Some((0..lists.len()).map(|t| marginal(&q, t)).collect::<Result<_, _>>()?);
            if binary3(q.index_shape()) {
                out.lgi = Some(lgi_k(&q, &standard_e_choices())?);
                if let Some(nd) = &noisy {
                    out.noisy_lgi = Some(lgi_k(&expected_qpd(nd, &table)?, &standard_e_choices())?);
                }
            }
            out.qpd = Some(q.to_json());
        }
        _ => unreachable!("weights follow the estimator kind"),
    }
    Ok(out)
}

/// Samples trajectories; with noise, from the explicit-circuit distribution
/// including readout error.
pub fn cmd_sample(cfg: &RunConfig, n: usize, seed: u64) -> Result<Vec<TrajectoryRecord>, CliError> {
    let p = cfg.protocol()?;
    match &cfg.noise {
        Some(noise) => {
            let dist = noisy_distribution(&p, p.dim() == 2, noise)?;
            Ok(sample_from_distribution(&dist, n, seed)?)
        }
        None => Ok(sample(&p, n, seed)?),
    }
}

pub fn write_trajectories<W: Write>(w: W, records: &[TrajectoryRecord], n_steps: usize) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["traj_id".to_string()];
    header.extend((1..=n_steps).map(|k| format!("m_{k}")));
    out.write_record(&header)?;
    for (id, r) in records.iter().enumerate() {
        let mut row = vec![id.to_string()];
        row.extend(r.outcomes.iter().map(usize::to_string));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectories<R: Read>(r: R) -> Result<Vec<TrajectoryRecord>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rdr.headers()?.clone();
    let n_steps = header.len().saturating_sub(1);
    let ok = header.get(0) == Some("traj_id")
        && n_steps > 0
        && (1..=n_steps).all(|k| header.get(k) == Some(format!("m_{k}").as_str()));
    if !ok {
        return Err(CliError::Config(format!("trajectory header must be traj_id, m_1, ..., m_N; got {header:?}")));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let outcomes = row
            .iter()
            .skip(1)
            .map(|s| s.parse::<usize>().map_err(|_| CliError::Config(format!("bad outcome {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(TrajectoryRecord { outcomes });
    }
    if out.is_empty() {
        return Err(CliError::Config("trajectory file has no rows".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructOutput {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<Estimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qpd: Option<QpdTableJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lgi: Option<LgiEstimate>,
    /// Product of per-time gamma_max values, bounding each trajectory term.
    pub term_bound: f64,
}

pub fn cmd_reconstruct(
    cfg: &RunConfig,
    records: &[TrajectoryRecord],
    weights: Option<ConfigWeights>,
) -> Result<ReconstructOutput, CliError> {
    let p = cfg.protocol()?;
    let weights = match weights {
        Some(w) => w,
        None => config_weights(cfg, &p)?,
    };
    let expected_len = match &weights {
        ConfigWeights::Correlation(w) => w.len(),
        ConfigWeights::Qpd(t) => t.len(),
    };
    if let Some(r) = records.iter().find(|r| r.outcomes.len() != expected_len) {
        return Err(CliError::Config(format!(
            "trajectory length {} does not match {} weight time steps",
            r.outcomes.len(),
            expected_len
        )));
    }
    Ok(match weights {
        ConfigWeights::Correlation(w) => ReconstructOutput {
            n: records.len(),
            correlation: Some(estimate_correlation(records, &w)?),
            qpd: None,
            lgi: None,
            term_bound: w.iter().map(|v| v.gamma_max).product(),
        },
        ConfigWeights::Qpd(table) => {
            let q = estimate_qpd(records, &table)?;
            let lgi = if binary3(q.index_shape()) {
                Some(estimate_lgi(records, &table, &standard_e_choices())?)
            } else {
                None
            };
            ReconstructOutput {
                n: records.len(),
                correlation: None,
                qpd: Some(q.to_json()),
                lgi,
                term_bound: table
                    .iter()
                    .map(|row| row.iter().map(|v| v.gamma_max).fold(0.0, f64::max))
                    .product(),
            }
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LgiOutput {
    pub theta: f64,
    pub convention: String,
    pub exact: LgiResult,
    /// `−sin θ² − cos θ cos θ²`.
    pub closed_form: f64,
    /// K under the opposite `R_y` sign convention.
    pub other_convention_k: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noisy: Option<LgiResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampled: Option<LgiEstimate>,
    /// One-sided 95 % test `K − 1.645·SEM > 1` on the sampled value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampled_violation: Option<bool>,
}

pub fn cmd_lgi(cfg: &RunConfig, n: usize, seed: u64) -> Result<LgiOutput, CliError> {
    let theta = cfg
        .theta
        .ok_or_else(|| CliError::Config("lgi needs a theta value".into()))?;
    let p = cfg.protocol()?;
    let table = match config_weights(cfg, &p)? {
        ConfigWeights::Qpd(t) if t.len() == 3 && t.iter().all(|r| r.len() == 2) => t,
        _ => return Err(CliError::Config("lgi needs a three-time binary qpd estimator".into())),
    };
    let exact_for = |c: &RunConfig| -> Result<LgiResult, CliError> {
        let p = c.protocol()?;
        let (rho, channels) = oracle_inputs(&p)?;
        let names = match c.estimator() {
            EstimatorSpec::Qpd(n) => n,
            EstimatorSpec::Correlation(n) => n,
        };
        let lists: Vec<_> = c.observables(&names)?.iter().map(|o| o.projectors().to_vec()).collect();
        Ok(lgi_k(&exact_qpd(&rho, &lists, &channels)?, &standard_e_choices())?)
    };
    let exact = exact_for(cfg)?;
    let mut other = cfg.clone();
    other.ry_convention = match cfg.ry_convention {
        crate::config::ConventionSpec::Standard => crate::config::ConventionSpec::Literal,
        crate::config::ConventionSpec::Literal => crate::config::ConventionSpec::Standard,
    };
    let noisy = match &cfg.noise {
        Some(noise) => Some(lgi_k(
            &expected_qpd(&noisy_distribution(&p, true, noise)?, &table)?,
            &standard_e_choices(),
        )?),
        None => None,
    };
    let sampled = if n > 0 {
        let records = cmd_sample(cfg, n, seed)?;
        Some(estimate_lgi(&records, &table, &standard_e_choices())?)
    } else {
        None
    };
    Ok(LgiOutput {
        theta,
        convention: convention_name(cfg.convention()).into(),
        closed_form: lgi_closed_form(theta),
        other_convention_k: exact_for(&other)?.k,
        exact,
        noisy,
        sampled_violation: sampled.as_ref().map(|s| s.k.value.re - 1.645 * s.k.sem_re > 1.0),
        sampled,
    })
}

pub fn convention_name(c: RyConvention) -> &'static str {
    match c {
        RyConvention::Standard => "standard",
        RyConvention::Literal => "literal",
    }
}

/// Sweeps the config over θ: the correlation for correlation estimators and
/// K for three-time binary QPD estimators. `n = 0` skips sampling.
pub fn cmd_sweep(cfg: &RunConfig, grid: &ThetaGrid, n: usize, seed: u64) -> Result<Vec<SweepRow>, CliError> {
    let exact = |theta: f64| -> ancilla_qpd::Result<C64> {
        let c = cfg.with_theta(theta);
        let v = cmd_oracle(&c).map_err(to_core)?;
        match (v.correlation, v.lgi) {
            (Some([re, im]), _) => Ok(C64::new(re, im)),
            (None, Some(l)) => Ok(C64::new(l.k, 0.0)),
            _ => Err(Error::InvalidParameter("sweep needs a correlation or three-time qpd estimator".into())),
        }
    };
    let sampled = |theta: f64, k: usize| -> ancilla_qpd::Result<Estimate> {
        let c = cfg.with_theta(theta);
        let records = cmd_sample(&c, n, seed.wrapping_add(k as u64)).map_err(to_core)?;
        let out = cmd_reconstruct(&c, &records, None).map_err(to_core)?;
        match (out.correlation, out.lgi) {
            (Some(e), _) => Ok(e),
            (None, Some(l)) => Ok(l.k),
            _ => Err(Error::InvalidParameter("sweep needs a correlation or three-time qpd estimator".into())),
        }
    };
    Ok(if n > 0 {
        sweep(grid, exact, Some(sampled))?
    } else {
        sweep(grid, exact, None::<fn(f64, usize) -> ancilla_qpd::Result<Estimate>>)?
    })
}

fn to_core(e: CliError) -> Error {
    match e {
        CliError::Numerical(m) => Error::Solver(m),
        CliError::Config(m) | CliError::Io(m) => Error::InvalidParameter(m),
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["theta", "re_exact", "im_exact", "re_est", "im_est", "sem_re", "sem_im"])?;
    for r in rows {
        let mut rec = vec![fmt_f64(r.theta), fmt_f64(r.exact.re), fmt_f64(r.exact.im)];
        match &r.estimate {
            Some(e) => rec.extend([e.value.re, e.value.im, e.sem_re, e.sem_im].map(fmt_f64)),
            None => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = to_json(value);
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes")
}

pub fn read_noise(path: &Path) -> Result<NoiseModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn read_weights(path: &Path) -> Result<ConfigWeights, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Default angle for the large-angle checks.
pub const THETA_STAR: f64 = 0.74 * PI;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    #[test]
    fn weights_examples() {
        let (w, warn) = cmd_weights("zy", "I", "Z", Objective::MinInfNorm, ScopeChoice::Auto).unwrap();
        assert!((w.weights.gamma_max - 2.0).abs() < 1e-9 && warn.is_none());
        let (w, warn) = cmd_weights("z", "I", "Z", Objective::MinInfNorm, ScopeChoice::Auto).unwrap();
        assert!(warn.is_some());
        assert_eq!(w.weights.gammas, vec![C64::new(1.0, 0.0), C64::new(-1.0, 0.0)]);
        let err = cmd_weights("z", "I", "Z", Objective::MinInfNorm, ScopeChoice::Full).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(5), Some(6)).unwrap(), 5);
        assert_eq!(resolve_seed(None, Some(6)).unwrap(), 6);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let recs = vec![
            TrajectoryRecord { outcomes: vec![0, 3, 1] },
            TrajectoryRecord { outcomes: vec![2, 1, 0] },
        ];
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &recs, 3).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("traj_id,m_1,m_2,m_3\n"));
        assert_eq!(read_trajectories(buf.as_slice()).unwrap(), recs);
        assert!(read_trajectories("id,a\n0,1\n".as_bytes()).is_err());
    }

    #[test]
    fn oracle_two_time() {
        let out = cmd_oracle(&preset("two-time").unwrap()).unwrap();
        let [re, im] = out.correlation.unwrap();
        assert!((re - (0.3 * PI).cos()).abs() < 1e-12 && (im + (0.3 * PI).sin()).abs() < 1e-12);
    }

    #[test]
    fn reconstruct_length_mismatch() {
        let cfg = preset("two-time").unwrap();
        let recs = vec![TrajectoryRecord { outcomes: vec![0, 1, 0] }];
        assert_eq!(cmd_reconstruct(&cfg, &recs, None).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn lgi_at_large_angle() {
        let cfg = preset("qpd").unwrap().with_theta(THETA_STAR);
        let out = cmd_lgi(&cfg, 0, 1).unwrap();
        assert!((out.exact.k - out.closed_form).abs() < 1e-12);
        assert!(out.exact.k > 1.0 && out.other_convention_k < 0.0);
    }
}
