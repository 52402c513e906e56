//! Run configuration: one strict JSON document describing a protocol and
//! what to estimate from it.

use std::f64::consts::PI;
use std::path::Path;

use ancilla_qpd::povm::{builtin_set, MeasurementSet};
use ancilla_qpd::protocol::{NoiseModel, Protocol, Step};
use ancilla_qpd::qcore::{CMatrix, CVector, C64};
use ancilla_qpd::qmodel::{rotation_gate, rx, ry, Channel, DensityMatrix, Observable, RyConvention};
use ancilla_qpd::estimate::ThetaGrid;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub type ComplexRows = Vec<Vec<[f64; 2]>>;

/// A literal angle or an expression in the run's `theta`: `"theta"`,
/// `"theta^2"`, `"<k>*theta"`, `"<k>*pi"` or `"pi"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Angle {
    Value(f64),
    Expr(String),
}

impl Angle {
    pub fn resolve(&self, theta: Option<f64>) -> Result<f64, CliError> {
        let expr = match self {
            Angle::Value(v) => return Ok(*v),
            Angle::Expr(s) => s.replace(' ', ""),
        };
        let need_theta = || theta.ok_or_else(|| CliError::Config(format!("angle {expr:?} needs a theta value")));
        if expr == "theta" {
            return need_theta();
        }
        if expr == "theta^2" {
            return Ok(need_theta()?.powi(2));
        }
        if expr == "pi" {
            return Ok(PI);
        }
        if let Some((k, var)) = expr.split_once('*') {
            let k: f64 = k
                .parse()
                .map_err(|_| CliError::Config(format!("bad angle coefficient in {expr:?}")))?;
            return match var {
                "theta" => Ok(k * need_theta()?),
                "pi" => Ok(k * PI),
                _ => Err(CliError::Config(format!("unknown angle variable in {expr:?}"))),
            };
        }
        Err(CliError::Config(format!("cannot parse angle {expr:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialSpec {
    /// `plus`, `zero`, `one` or `maximally_mixed`.
    Named(String),
    Matrix { matrix: ComplexRows },
    Ket { ket: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    Identity,
    Rx(Angle),
    /// Uses the run's `ry_convention`.
    Ry(Angle),
    Rotation { theta: Angle, phi: Angle },
    Unitary(ComplexRows),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SetSpec {
    Named(String),
    Kets {
        name: Option<String>,
        kets: Vec<Vec<[f64; 2]>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    /// Evolution since the previous time; omitted means identity.
    #[serde(default = "identity_spec")]
    pub channel: ChannelSpec,
    pub set: SetSpec,
}

fn identity_spec() -> ChannelSpec {
    ChannelSpec::Identity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    /// One observable name per time.
    Correlation(Vec<String>),
    /// One observable per time whose spectral projectors index the QPD.
    Qpd(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConventionSpec {
    #[default]
    Standard,
    Literal,
}

impl From<ConventionSpec> for RyConvention {
    fn from(c: ConventionSpec) -> Self {
        match c {
            ConventionSpec::Standard => RyConvention::Standard,
            ConventionSpec::Literal => RyConvention::Literal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dim: usize,
    pub initial: InitialSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default)]
    pub ry_convention: ConventionSpec,
    pub steps: Vec<StepSpec>,
    #[serde(default)]
    pub final_projective: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_trajectories: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_grid: Option<ThetaGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

fn complex_rows(rows: &ComplexRows) -> Result<CMatrix, CliError> {
    let rows: Vec<Vec<C64>> = rows
        .iter()
        .map(|r| r.iter().map(|[re, im]| C64::new(*re, *im)).collect())
        .collect();
    Ok(CMatrix::from_rows(&rows)?)
}

fn ket(entries: &[[f64; 2]]) -> CVector {
    CVector::new(entries.iter().map(|[re, im]| C64::new(*re, *im)).collect())
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.steps.is_empty() {
            return Err(CliError::Config("at least one step is required".into()));
        }
        if let Some(EstimatorSpec::Correlation(v) | EstimatorSpec::Qpd(v)) = &self.estimator {
            if v.len() != self.steps.len() {
                return Err(CliError::Config(format!(
                    "estimator lists {} observables for {} steps",
                    v.len(),
                    self.steps.len()
                )));
            }
        }
        self.protocol().map(|_| ())
    }

    pub fn convention(&self) -> RyConvention {
        self.ry_convention.into()
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        Self {
            theta: Some(theta),
            ..self.clone()
        }
    }

    pub fn initial_state(&self) -> Result<DensityMatrix, CliError> {
        let d = self.dim;
        let rho = match &self.initial {
            InitialSpec::Named(n) => match n.as_str() {
                "plus" if d == 2 => DensityMatrix::plus(),
                "zero" => DensityMatrix::zero(d)?,
                "one" if d == 2 => DensityMatrix::from_ket(&CVector::basis(2, 1))?,
                "maximally_mixed" => DensityMatrix::maximally_mixed(d)?,
                other => return Err(CliError::Config(format!("unknown initial state {other:?} for d = {d}"))),
            },
            InitialSpec::Matrix { matrix } => DensityMatrix::new(complex_rows(matrix)?)?,
            InitialSpec::Ket { ket: k } => DensityMatrix::from_ket(&ket(k).normalized())?,
        };
        if rho.dim() != d {
            return Err(CliError::Config(format!("initial state has dimension {}, expected {d}", rho.dim())));
        }
        Ok(rho)
    }

    pub fn channel(&self, spec: &ChannelSpec) -> Result<Channel, CliError> {
        let qubit = |name: &str| {
            if self.dim == 2 {
                Ok(())
            } else {
                Err(CliError::Config(format!("{name} needs dim 2")))
            }
        };
        Ok(match spec {
            ChannelSpec::Identity => Channel::identity(self.dim)?,
            ChannelSpec::Rx(a) => {
                qubit("rx")?;
                rx(a.resolve(self.theta)?)
            }
            ChannelSpec::Ry(a) => {
                qubit("ry")?;
                ry(a.resolve(self.theta)?, self.convention())
            }
            ChannelSpec::Rotation { theta, phi } => {
                qubit("rotation")?;
                rotation_gate(theta.resolve(self.theta)?, phi.resolve(self.theta)?)
            }
            ChannelSpec::Unitary(rows) => Channel::unitary(complex_rows(rows)?)?,
        })
    }

    pub fn set(&self, spec: &SetSpec) -> Result<MeasurementSet, CliError> {
        let set = match spec {
            SetSpec::Named(n) => builtin_set(n)?,
            SetSpec::Kets { name, kets } => MeasurementSet::new(
                name.clone().unwrap_or_else(|| "custom".into()),
                kets.iter().map(|k| ket(k)).collect(),
            )?,
        };
        if set.dim() != self.dim {
            return Err(CliError::Config(format!(
                "set {} has dimension {}, expected {}",
                set.name(),
                set.dim(),
                self.dim
            )));
        }
        Ok(set)
    }

    pub fn protocol(&self) -> Result<Protocol, CliError> {
        let steps = self
            .steps
            .iter()
            .map(|s| Ok(Step::new(self.channel(&s.channel)?, self.set(&s.set)?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Protocol::new(self.initial_state()?, steps, self.final_projective)?)
    }

    /// Estimator in effect; defaults to Z at every time.
    pub fn estimator(&self) -> EstimatorSpec {
        self.estimator
            .clone()
            .unwrap_or_else(|| EstimatorSpec::Correlation(vec!["Z".into(); self.steps.len()]))
    }

    pub fn observables(&self, names: &[String]) -> Result<Vec<Observable>, CliError> {
        names.iter().map(|n| Ok(Observable::named(n, self.dim)?)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Built-in configurations for the qubit experiment.
pub fn preset(name: &str) -> Result<RunConfig, CliError> {
    let zy_or = |s: &str| SetSpec::Named(s.into());
    let (sets, estimator): (Vec<&str>, EstimatorSpec) = match name {
        "two-time" => (vec!["zy", "z"], EstimatorSpec::Correlation(vec!["Z".into(); 2])),
        "three-time" => (vec!["zy", "zy", "z"], EstimatorSpec::Correlation(vec!["Z".into(); 3])),
        "qpd-two-time" => (vec!["zyx", "z"], EstimatorSpec::Qpd(vec!["Z".into(); 2])),
        "qpd" => (vec!["zyx", "zyx", "z"], EstimatorSpec::Qpd(vec!["Z".into(); 3])),
        "projective" => (vec!["z", "z", "z"], EstimatorSpec::Qpd(vec!["Z".into(); 3])),
        other => return Err(CliError::Config(format!("unknown preset {other:?}"))),
    };
    let channels = [
        ChannelSpec::Identity,
        ChannelSpec::Rx(Angle::Expr("theta".into())),
        ChannelSpec::Ry(Angle::Expr("theta^2".into())),
    ];
    Ok(RunConfig {
        dim: 2,
        initial: InitialSpec::Named("plus".into()),
        theta: Some(0.3 * PI),
        ry_convention: ConventionSpec::Standard,
        steps: sets
            .iter()
            .zip(channels)
            .map(|(s, channel)| StepSpec { channel, set: zy_or(s) })
            .collect(),
        final_projective: true,
        estimator: Some(estimator),
        n_trajectories: Some(100),
        seed: None,
        noise: None,
        theta_grid: None,
        out_dir: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ancilla_qpd::protocol::exact_distribution;

    #[test]
    fn angle_expressions() {
        let t = Some(0.5);
        assert_eq!(Angle::Expr("theta".into()).resolve(t).unwrap(), 0.5);
        assert_eq!(Angle::Expr("theta^2".into()).resolve(t).unwrap(), 0.25);
        assert_eq!(Angle::Expr("2*theta".into()).resolve(t).unwrap(), 1.0);
        assert_eq!(Angle::Expr("0.5*pi".into()).resolve(None).unwrap(), 0.5 * PI);
        assert!(Angle::Expr("theta".into()).resolve(None).is_err());
        assert!(Angle::Expr("phi".into()).resolve(t).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = serde_json::to_value(preset("two-time").unwrap()).unwrap();
        v["thetta"] = serde_json::json!(1.0);
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(CliError::Config(_))));
        let mut v = serde_json::to_value(preset("two-time").unwrap()).unwrap();
        v["steps"][0]["sett"] = serde_json::json!("z");
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn round_trip_gives_same_protocol() {
        for name in ["two-time", "three-time", "qpd", "qpd-two-time", "projective"] {
            let cfg = preset(name).unwrap();
            let back = RunConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
            let a = exact_distribution(&cfg.protocol().unwrap()).unwrap();
            let b = exact_distribution(&back.protocol().unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn explicit_entries() {
        let text = r#"{
            "dim": 2,
            "initial": {"ket": [[1, 0], [1, 0]]},
            "steps": [
                {"set": {"kets": [[[1, 0], [0, 0]], [[0, 0], [1, 0]]]}},
                {"channel": {"rotation": {"theta": "0.5*pi", "phi": 0}}, "set": "zyx"}
            ]
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.protocol().unwrap().outcome_counts(), vec![2, 6]);
    }

    #[test]
    fn mismatched_estimator_rejected() {
        let mut cfg = preset("two-time").unwrap();
        cfg.estimator = Some(EstimatorSpec::Correlation(vec!["Z".into()]));
        assert!(cfg.validate().is_err());
    }
}
