//! Full qubit-experiment reproduction: correlation sweeps, QPD tables,
//! marginals, the projective baseline and the Leggett–Garg sweep.

use std::f64::consts::PI;
use std::path::Path;

use ancilla_qpd::estimate::{
    estimate_correlation, estimate_lgi, estimate_qpd, expected_qpd, lgi_k, marginal, populations,
    standard_e_choices, QpdTable, QpdTableJson, SweepRow, ThetaGrid,
};
use ancilla_qpd::protocol::{exact_distribution, explicit_circuit_distribution, sample, NoiseModel};
use ancilla_qpd::qmodel::{Observable, RyConvention};
use ancilla_qpd::scenario::{correlation_weights, lgi_closed_form, projective_weight_table, qpd_weight_table, Scenario, QPD_THETAS};
use ancilla_qpd::C64;
use serde::{Deserialize, Serialize};

use crate::commands::{convention_name, fmt_f64, write_json_file, write_sweep_csv};
use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub criterion: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpdSnapshot {
    pub theta: f64,
    pub exact: QpdTableJson,
    pub sampled: QpdTableJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalRow {
    pub theta: f64,
    /// `p(0)` at the second time from the exact three-time QPD.
    pub qpd_t2: f64,
    /// `p(0)` at the final time from the exact three-time QPD.
    pub qpd_t3: f64,
    /// `p(0)` at the final time with no earlier measurement.
    pub unmeasured_t3: f64,
    /// `p(0)` at the final time after projective measurements.
    pub projective_t3: f64,
    /// `p(0)` at the final time from the sampled QPD.
    pub sampled_t3: f64,
    pub sampled_t3_sem: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoisePoint {
    pub depolarizing_p: f64,
    pub k: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Work {
    pub grid_points: usize,
    pub trajectories_sampled: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproReport {
    pub convention: String,
    pub n_trajectories: usize,
    pub seed: u64,
    pub theta_grid: ThetaGrid,
    pub gamma_max_zy_z: f64,
    pub gamma_max_zyx_projectors: [f64; 2],
    pub fig3a_two_time_correlation: Vec<SweepRow>,
    pub fig3b_three_time_correlation: Vec<SweepRow>,
    pub fig3c_two_time_qpd: Vec<QpdSnapshot>,
    pub fig3d_three_time_qpd: Vec<QpdSnapshot>,
    pub fig3e_marginals: Vec<MarginalRow>,
    pub fig3f_lgi: Vec<SweepRow>,
    pub fig3f_projective_k: Vec<[f64; 2]>,
    pub k_at_large_angle: f64,
    pub k_other_convention: f64,
    pub noisy_k: Vec<NoisePoint>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub work: Work,
}

fn seed_for(seed: u64, tag: u64, k: usize) -> u64 {
    seed.wrapping_add(tag.wrapping_mul(1_000_003)).wrapping_add(k as u64)
}

fn check(criterion: &str, passed: bool, detail: String) -> Check {
    Check {
        criterion: criterion.into(),
        passed,
        detail,
    }
}

fn exact_row(theta: f64, exact: C64) -> SweepRow {
    SweepRow { theta, exact, estimate: None }
}

pub fn run_fig3(n: usize, seed: u64, grid: &ThetaGrid, convention: RyConvention) -> Result<ReproReport, CliError> {
    if n < 2 {
        return Err(CliError::Config("fig3 needs at least two trajectories per point".into()));
    }
    let s = Scenario::new(convention);
    let thetas = grid.points()?;
    let w2 = correlation_weights(2)?;
    let w3 = correlation_weights(3)?;
    let qpd3 = qpd_weight_table(3)?;
    let qpd2 = qpd_weight_table(2)?;
    let mut sampled_total = 0usize;
    let mut checks = Vec::new();

    // (a), (b): correlation sweeps.
    let mut fig3a = Vec::new();
    let mut fig3b = Vec::new();
    let mut worst_closed = 0.0f64;
    for (k, &theta) in thetas.iter().enumerate() {
        let c2 = s.exact_c2(theta)?;
        worst_closed = worst_closed.max((c2 - C64::new(theta.cos(), -theta.sin())).norm());
        let r2 = sample(&s.two_time_protocol(theta)?, n, seed_for(seed, 1, k))?;
        fig3a.push(SweepRow {
            estimate: Some(estimate_correlation(&r2, &w2)?),
            ..exact_row(theta, c2)
        });
        let r3 = sample(&s.three_time_protocol(theta)?, n, seed_for(seed, 2, k))?;
        fig3b.push(SweepRow {
            estimate: Some(estimate_correlation(&r3, &w3)?),
            ..exact_row(theta, s.exact_c3(theta)?)
        });
        sampled_total += 2 * n;
    }
    checks.push(check(
        "3 two-time correlation closed form",
        worst_closed < 1e-12,
        format!("max |C_ZZ − (cos θ − i sin θ)| = {worst_closed:.3e} over {} points", thetas.len()),
    ));
    let within = fig3a
        .iter()
        .chain(&fig3b)
        .filter(|r| r.estimate.unwrap().within(r.exact, 4.0))
        .count();
    let total = fig3a.len() + fig3b.len();
    checks.push(check(
        "4 Monte Carlo consistency (run budget)",
        within as f64 >= 0.95 * total as f64,
        format!("{within}/{total} sampled correlations within 4·SEM at n = {n}"),
    ));

    // (c), (d): QPD tables at the two tabulated angles.
    let mut fig3c = Vec::new();
    let mut fig3d = Vec::new();
    let mut sampled_norm_ok = true;
    for (k, &theta) in QPD_THETAS.iter().enumerate() {
        for (times, table, out) in [(2usize, &qpd2, &mut fig3c), (3, &qpd3, &mut fig3d)] {
            let exact = s.exact_qpd(theta, times)?;
            let rec = sample(&s.qpd_protocol(theta, times)?, n, seed_for(seed, 3 + times as u64, k))?;
            sampled_total += n;
            let est = estimate_qpd(&rec, table)?;
            let (ar, ai) = est.aggregate_sem();
            sampled_norm_ok &= (est.sum().re - 1.0).abs() <= 4.0 * ar + 1e-12 && est.sum().im.abs() <= 4.0 * ai + 1e-12;
            out.push(QpdSnapshot {
                theta,
                exact: exact.to_json(),
                sampled: est.to_json(),
            });
        }
    }

    // Exact normalization and marginal preservation over the whole grid.
    let mut worst_norm = 0.0f64;
    let mut worst_marginal = 0.0f64;
    let proj = Observable::pauli_z().projectors().to_vec();
    for &theta in &thetas {
        for times in [2, 3] {
            let q = s.exact_qpd(theta, times)?;
            worst_norm = worst_norm.max((q.sum() - C64::new(1.0, 0.0)).norm());
            let ev = s.evolutions(theta);
            for t in 0..times {
                let m = marginal(&q, t)?;
                let pops = populations(&s.initial(), &proj, &ev[..t])?;
                worst_marginal = worst_marginal.max(m.imag_residue);
                for (a, b) in m.values.iter().zip(&pops) {
                    worst_marginal = worst_marginal.max((a - b).abs());
                }
            }
        }
    }
    checks.push(check(
        "5 QPD normalization and marginals (exact)",
        worst_norm < 1e-12 && worst_marginal < 1e-12,
        format!("max |Σ𝒬 − 1| = {worst_norm:.3e}, max marginal deviation = {worst_marginal:.3e}"),
    ));
    checks.push(check(
        "5 QPD normalization (sampled)",
        sampled_norm_ok,
        format!("sampled table sums within 4·aggregate SEM at n = {n}"),
    ));

    // (e): marginals against the projective baseline.
    let mut fig3e = Vec::new();
    let ptable = projective_weight_table(3)?;
    for (k, &theta) in thetas.iter().enumerate() {
        let q = s.exact_qpd(theta, 3)?;
        let proj_dist = exact_distribution(&s.projective_protocol(theta, 3)?)?;
        let rec = sample(&s.qpd_protocol(theta, 3)?, n, seed_for(seed, 7, k))?;
        sampled_total += n;
        let est = estimate_qpd(&rec, &qpd3)?;
        let sm = marginal(&est, 2)?;
        let sem = marginal_sem(&est, 2);
        fig3e.push(MarginalRow {
            theta,
            qpd_t2: marginal(&q, 1)?.values[0],
            qpd_t3: marginal(&q, 2)?.values[0],
            unmeasured_t3: populations(&s.initial(), &proj, &s.evolutions(theta))?[0],
            projective_t3: proj_dist.marginal(2)[0],
            sampled_t3: sm.values[0],
            sampled_t3_sem: sem,
        });
    }
    let max_dev = fig3e.iter().map(|r| (r.qpd_t3 - 0.5).abs()).fold(0.0, f64::max);
    let proj_dev = fig3e.iter().map(|r| (r.projective_t3 - 0.5).abs()).fold(0.0, f64::max);
    checks.push(check(
        "6 back-action contrast",
        max_dev > 0.3 && proj_dev < 1e-12,
        format!("max |QPD final marginal − 1/2| = {max_dev:.4}, projective baseline max deviation = {proj_dev:.3e}"),
    ));

    // Negativity at the large angle.
    let theta_star = QPD_THETAS[1];
    let q_star = s.exact_qpd(theta_star, 3)?;
    let negatives: Vec<String> = q_star
        .iter()
        .filter(|(_, v)| v.re < 0.0)
        .map(|(i, _)| format!("{i:?}"))
        .collect();
    let target = q_star.get(&[0, 1, 0]).re < 0.0 && q_star.get(&[1, 1, 0]).re < 0.0;
    checks.push(check(
        "7 three-time QPD negativity at (0,1,0) and (1,1,0)",
        target,
        format!(
            "Re 𝒬(0,1,0) = {:.4}, Re 𝒬(1,1,0) = {:.4}; negative real parts at {}",
            q_star.get(&[0, 1, 0]).re,
            q_star.get(&[1, 1, 0]).re,
            negatives.join(", ")
        ),
    ));

    // (f): LGI sweep, sampled and projective.
    let mut fig3f = Vec::new();
    let mut fig3f_proj = Vec::new();
    for (k, &theta) in thetas.iter().enumerate() {
        let rec = sample(&s.qpd_protocol(theta, 3)?, n, seed_for(seed, 8, k))?;
        sampled_total += n;
        let est = estimate_lgi(&rec, &qpd3, &standard_e_choices())?;
        fig3f.push(SweepRow {
            estimate: Some(est.k),
            ..exact_row(theta, C64::new(s.exact_lgi(theta)?.k, 0.0))
        });
        let pd = exact_distribution(&s.projective_protocol(theta, 3)?)?;
        fig3f_proj.push([theta, lgi_k(&expected_qpd(&pd, &ptable)?, &standard_e_choices())?.k]);
    }
    let k_star = s.exact_lgi(theta_star)?.k;
    let k_other = Scenario::new(match convention {
        RyConvention::Standard => RyConvention::Literal,
        RyConvention::Literal => RyConvention::Standard,
    })
    .exact_lgi(theta_star)?
    .k;
    let closed = lgi_closed_form(theta_star);
    checks.push(check(
        "8 LGI violation (oracle)",
        (k_star - 1.208).abs() <= 0.005 && k_star > 1.0 && (k_star - 1.17).abs() <= 0.06,
        format!("K(0.74π) = {k_star:.6}, closed form {closed:.6}, other convention {k_other:.6}"),
    ));
    let rec = sample(&s.qpd_protocol(theta_star, 3)?, n, seed_for(seed, 9, 0))?;
    sampled_total += n;
    let k_est = estimate_lgi(&rec, &qpd3, &standard_e_choices())?.k;
    checks.push(check(
        "8 LGI violation (Monte Carlo, run budget)",
        k_est.value.re - 1.645 * k_est.sem_re > 1.0,
        format!("K̂ = {:.4} ± {:.4} at n = {n}", k_est.value.re, k_est.sem_re),
    ));
    let classical_max = fig3f_proj.iter().map(|r| r[1]).fold(f64::NEG_INFINITY, f64::max);
    checks.push(check(
        "8 projective baseline respects the classical bound",
        classical_max <= 1.0 + 1e-9,
        format!("max projective K = {classical_max:.6}"),
    ));

    // θ = 0.
    let k0 = s.exact_lgi(0.0)?.k;
    let c0 = s.exact_c2(0.0)?;
    checks.push(check(
        "9 θ = 0 degenerate case",
        k0 == -1.0 && c0 == C64::new(1.0, 0.0),
        format!("K = {k0}, C_ZZ = {} + {}i", c0.re, c0.im),
    ));

    // Path equivalence.
    let mut worst_tv = 0.0f64;
    for &theta in &QPD_THETAS {
        for p in [
            s.two_time_protocol(theta)?,
            s.three_time_protocol(theta)?,
            s.qpd_protocol(theta, 3)?,
        ] {
            let a = exact_distribution(&p)?;
            for ms in [false, true] {
                worst_tv = worst_tv.max(a.tv_distance(&explicit_circuit_distribution(&p, ms, None)?)?);
            }
        }
    }
    checks.push(check(
        "10 Kraus and explicit-circuit paths agree",
        worst_tv < 1e-10,
        format!("max total variation = {worst_tv:.3e}"),
    ));

    // Gate noise.
    let mut noisy_k = Vec::new();
    for p in [0.0, 0.02, 0.05, 0.1] {
        let noise = NoiseModel {
            entangling_depolarizing_p: p,
            ..NoiseModel::noiseless()
        };
        noisy_k.push(NoisePoint {
            depolarizing_p: p,
            k: s.noisy_lgi(theta_star, &noise)?.k,
        });
    }
    let decreasing = noisy_k.windows(2).all(|w| w[1].k < w[0].k);
    checks.push(check(
        "14 noise monotonicity",
        decreasing,
        format!(
            "K(0.74π) = {}",
            noisy_k.iter().map(|p| format!("{:.6} (p = {})", p.k, p.depolarizing_p)).collect::<Vec<_>>().join(", ")
        ),
    ));

    let gamma = |set: &str, a: &str| -> Result<f64, CliError> {
        Ok(crate::commands::cmd_weights(set, "I", a, ancilla_qpd::weights::Objective::MinInfNorm, crate::commands::ScopeChoice::Full)?
            .0
            .weights
            .gamma_max)
    };
    let t2_flat = fig3e.iter().map(|r| (r.qpd_t2 - 0.5).abs()).fold(0.0, f64::max);
    let notes = vec![
        format!(
            "R_y convention: {} (R_y(θ) = exp(∓iθY/2)); it reproduces the LGI violation, K(0.74π) = {k_star:.4}, while the other sign gives {k_other:.4}.",
            convention_name(convention)
        ),
        format!(
            "Under this convention the large-angle negativity appears at {}; the other convention moves it to the bit-flipped indices.",
            negatives.join(", ")
        ),
        format!(
            "The second-time z marginal is 1/2 for every θ on |+⟩ (max deviation {t2_flat:.1e}); the θ-dependent marginal is the final-time one, reported as qpd_t3."
        ),
        format!("Reported experimental K ≈ 1.17 versus noiseless oracle {k_star:.4}."),
    ];

    Ok(ReproReport {
        convention: convention_name(convention).into(),
        n_trajectories: n,
        seed,
        theta_grid: *grid,
        gamma_max_zy_z: gamma("zy", "Z")?,
        gamma_max_zyx_projectors: [gamma("zyx", "P0")?, gamma("zyx", "P1")?],
        fig3a_two_time_correlation: fig3a,
        fig3b_three_time_correlation: fig3b,
        fig3c_two_time_qpd: fig3c,
        fig3d_three_time_qpd: fig3d,
        fig3e_marginals: fig3e,
        fig3f_lgi: fig3f,
        fig3f_projective_k: fig3f_proj,
        k_at_large_angle: k_star,
        k_other_convention: k_other,
        noisy_k,
        checks,
        notes,
        work: Work {
            grid_points: thetas.len(),
            trajectories_sampled: sampled_total,
        },
    })
}

fn marginal_sem(q: &QpdTable, time: usize) -> f64 {
    // Entries of one marginal bin come from the same trajectories, so this
    // root-sum-square is an approximation; it is only used for plotting.
    q.iter()
        .filter(|(i, _)| i[time] == 0)
        .filter_map(|(i, _)| q.sem(&i).map(|s| s.0 * s.0))
        .sum::<f64>()
        .sqrt()
}

/// Writes the report and its plot-ready tables into `dir`.
pub fn write_fig3(dir: &Path, report: &ReproReport) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    write_json_file(&dir.join("fig3_report.json"), report)?;
    let csv_file = |name: &str| -> Result<std::fs::File, CliError> {
        let p = dir.join(name);
        std::fs::File::create(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    };
    write_sweep_csv(csv_file("fig3a_two_time_correlation.csv")?, &report.fig3a_two_time_correlation)?;
    write_sweep_csv(csv_file("fig3b_three_time_correlation.csv")?, &report.fig3b_three_time_correlation)?;
    write_sweep_csv(csv_file("fig3f_lgi.csv")?, &report.fig3f_lgi)?;
    let mut w = csv::Writer::from_writer(csv_file("fig3e_marginals.csv")?);
    w.write_record(["theta", "qpd_t2", "qpd_t3", "unmeasured_t3", "projective_t3", "sampled_t3", "sampled_t3_sem"])?;
    for r in &report.fig3e_marginals {
        w.write_record(
            [r.theta, r.qpd_t2, r.qpd_t3, r.unmeasured_t3, r.projective_t3, r.sampled_t3, r.sampled_t3_sem].map(fmt_f64),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Default grid used by the reproduction.
pub fn default_grid() -> ThetaGrid {
    ThetaGrid {
        start: 0.0,
        stop: PI,
        count: 41,
    }
}
