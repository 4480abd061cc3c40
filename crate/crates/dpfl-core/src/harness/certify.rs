//! Certification table emission: per-sample certified predictions,
//! certified accuracy per adversary count, attack-cost bound grids,
//! minimum-attacker bounds, privacy-tradeoff sweeps, and merged report
//! tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ensemble::{run_ensemble, EnsembleOutput};
use super::{csv_float, ExperimentPlan};
use crate::attackkit::{AttackKind, AttackSpec};
use crate::certkit::{
    certified_accuracy, certify_estimate, cost_bounds, hoeffding_calibrate, largest_certified_k,
    min_attackers, CostKind, SignRegime,
};
use crate::datakit::Dataset;
use crate::error::{DpflError, Result};

/// Per-sample certification results plus the accuracy curve over k.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionCertification {
    pub epsilon: f64,
    pub delta: f64,
    pub psi: f64,
    /// (prediction-correct, certified K bound) per test sample.
    pub per_sample: Vec<(bool, f64)>,
    /// (k, certified accuracy) per requested adversary count.
    pub accuracy: Vec<(u32, f64)>,
}

impl PredictionCertification {
    /// Largest k certified for any correctly predicted sample.
    pub fn max_certified_k(&self) -> Option<u64> {
        self.per_sample
            .iter()
            .filter(|(correct, _)| *correct)
            .filter_map(|(_, k)| largest_certified_k(*k))
            .max()
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 64 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Certifies every test sample of an ensemble at the plan's psi and writes
/// `certified_predictions.csv` (one row per sample, one 0/1 column per k)
/// and `certified_accuracy.csv` (one row per k).
pub fn certify_prediction(
    ensemble: &EnsembleOutput,
    test: &Dataset,
    k_grid: &[u32],
    psi: f64,
) -> Result<PredictionCertification> {
    let report = ensemble.privacy();
    if !report.epsilon.is_finite() {
        return Err(DpflError::Config(
            "cannot certify a non-private ensemble".into(),
        ));
    }
    let (epsilon, delta) = (report.epsilon, report.delta);
    let estimates = ensemble.estimates()?;
    if estimates.len() != test.len() {
        return Err(DpflError::Usage(
            "ensemble and test set have different sample counts".into(),
        ));
    }
    let mut per_sample = Vec::with_capacity(estimates.len());
    let mut rows = Vec::with_capacity(estimates.len());
    for (sample_id, (estimate, example)) in estimates.iter().zip(&test.examples).enumerate() {
        let calibrated = if psi < 1.0 {
            hoeffding_calibrate(estimate, psi)?
        } else {
            estimate.clone()
        };
        let certified = certify_estimate(&calibrated, epsilon, delta)?;
        let correct = certified.top == example.label;
        per_sample.push((correct, certified.k_bound));
        let mut row = format!(
            "{sample_id},{},{},{},{}",
            u8::from(correct),
            csv_float(calibrated.top_lower),
            csv_float(calibrated.runner_up_upper),
            csv_float(certified.k_bound),
        );
        for &k in k_grid {
            let flag = correct && f64::from(k) < certified.k_bound;
            row.push(',');
            row.push_str(if flag { "1" } else { "0" });
        }
        rows.push(row);
    }

    let mut header = "sample_id,correct,f_a,f_b,k_bound".to_string();
    for &k in k_grid {
        header.push_str(&format!(",cert_k{k}"));
    }
    let tables = ensemble.tables_dir();
    fs::create_dir_all(&tables)?;
    write_csv(&tables.join("certified_predictions.csv"), &header, &rows)?;

    let mut accuracy = Vec::with_capacity(k_grid.len());
    let mut acc_rows = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let value = certified_accuracy(&per_sample, f64::from(k))?;
        accuracy.push((k, value));
        acc_rows.push(format!("{k},{}", csv_float(value)));
    }
    write_csv(
        &tables.join("certified_accuracy.csv"),
        "k,certified_accuracy",
        &acc_rows,
    )?;

    Ok(PredictionCertification {
        epsilon,
        delta,
        psi,
        per_sample,
        accuracy,
    })
}

/// One (attack kind, k, gamma, alpha) cell of the cost grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostCellResult {
    pub kind: AttackKind,
    pub k: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub j_clean: f64,
    pub lower: f64,
    pub empirical: f64,
    pub upper: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub epsilon: f64,
    pub delta: f64,
    pub cells: Vec<CostCellResult>,
    /// (kind, tau, minimum attackers) rows.
    pub min_attacker_rows: Vec<(AttackKind, f64, f64)>,
}

fn cost_kind_of(kind: AttackKind) -> CostKind {
    match kind {
        AttackKind::LabelFlip => CostKind::LabelFlip,
        AttackKind::Backdoor | AttackKind::DistributedBackdoor => CostKind::Backdoor,
    }
}

fn attack_label(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::Backdoor => "backdoor",
        AttackKind::LabelFlip => "label-flip",
        AttackKind::DistributedBackdoor => "distributed-backdoor",
    }
}

/// Runs the attack grid against the plan's clean baseline: for every cell,
/// an O-run poisoned ensemble gives the empirical J(D') which is compared
/// against the certified bounds computed from the clean J(D). The k = 0
/// cell is the clean ensemble itself. Writes `cost_bounds.csv` and
/// `min_attackers.csv` under the parent plan's tables directory.
pub fn certify_cost(plan: &ExperimentPlan, root: &Path) -> Result<CostReport> {
    let grid = plan
        .attack_grid
        .clone()
        .ok_or_else(|| DpflError::Config("plan has no attack grid".into()))?;
    let clean_plan = plan.with_attack(None, grid.poison_runs, format!("{}-clean-cost", plan.name));
    let clean = run_ensemble(&clean_plan, root)?;
    let report = clean.privacy();
    if !report.epsilon.is_finite() {
        return Err(DpflError::Config(
            "cannot certify a non-private ensemble".into(),
        ));
    }
    let (epsilon, delta) = (report.epsilon, report.delta);

    let mut cells = Vec::new();
    for &kind in &grid.kinds {
        let j_clean = clean.mean_cost(cost_kind_of(kind))?;
        for &k in &grid.ks {
            for &gamma in &grid.gammas {
                for &alpha in &grid.alphas {
                    let (empirical, any_clamped) = if k == 0 {
                        // No adversaries: the poisoned ensemble is the clean
                        // ensemble, empirically and by definition.
                        (j_clean.value, j_clean.clamped)
                    } else {
                        let attack = AttackSpec {
                            kind,
                            k,
                            poison_fraction: alpha,
                            scale: gamma,
                            pattern: grid.pattern.clone(),
                            target_label: grid.target_label,
                            source_class: Some(grid.source_class),
                        };
                        let name = format!(
                            "{}-{}-k{k}-g{gamma}-a{alpha}",
                            plan.name,
                            attack_label(kind)
                        );
                        let cell_plan = plan.with_attack(Some(attack), grid.poison_runs, name);
                        let poisoned = run_ensemble(&cell_plan, root)?;
                        let cost = poisoned.mean_cost(cost_kind_of(kind))?;
                        (cost.value, cost.clamped)
                    };
                    let bounds = cost_bounds(
                        j_clean.value,
                        epsilon,
                        delta,
                        k as f64,
                        plan.c_bar,
                        SignRegime::NonNegative,
                    )?;
                    cells.push(CostCellResult {
                        kind,
                        k,
                        gamma,
                        alpha,
                        j_clean: j_clean.value,
                        lower: bounds.lower,
                        empirical,
                        upper: bounds.upper,
                        clamped: any_clamped || j_clean.clamped,
                    });
                }
            }
        }
    }

    let mut min_attacker_rows = Vec::new();
    for &kind in &grid.kinds {
        let j_clean = clean.mean_cost(cost_kind_of(kind))?;
        for &tau in &plan.tau_grid {
            let bound = min_attackers(
                j_clean.value,
                epsilon,
                delta,
                tau,
                plan.c_bar,
                SignRegime::NonNegative,
            )?;
            min_attacker_rows.push((kind, tau, bound));
        }
    }

    let tables = root.join("plans").join(plan.plan_id()).join("tables");
    fs::create_dir_all(&tables)?;
    let rows: Vec<String> = cells
        .iter()
        .map(|c| {
            format!(
                "{},{},{},{},{},{},{},{},{},{}",
                attack_label(c.kind),
                c.k,
                csv_float(c.gamma),
                csv_float(c.alpha),
                csv_float(epsilon),
                csv_float(c.j_clean),
                csv_float(c.lower),
                csv_float(c.empirical),
                csv_float(c.upper),
                u8::from(c.clamped),
            )
        })
        .collect();
    write_csv(
        &tables.join("cost_bounds.csv"),
        "kind,k,gamma,alpha,epsilon,j_clean,lower,empirical_j,upper,clamped",
        &rows,
    )?;
    let rows: Vec<String> = min_attacker_rows
        .iter()
        .map(|(kind, tau, bound)| {
            format!(
                "{},{},{},{}",
                attack_label(*kind),
                csv_float(*tau),
                csv_float(epsilon),
                csv_float(*bound)
            )
        })
        .collect();
    write_csv(
        &tables.join("min_attackers.csv"),
        "kind,tau,epsilon,k_lower_bound",
        &rows,
    )?;

    Ok(CostReport {
        epsilon,
        delta,
        cells,
        min_attacker_rows,
    })
}

/// One row of the privacy-tradeoff sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub epsilon: f64,
    /// Largest k certified for any correct sample, if any.
    pub max_certified_k: Option<u64>,
    /// Certified accuracy per k in the plan's k grid.
    pub accuracy: Vec<(u32, f64)>,
}

/// Sweeps the noise multiplier over `plan.sweep_sigmas`: one clean ensemble
/// and prediction certification per sigma. Emits `tradeoff.csv` under the
/// parent plan's tables directory, one row per sigma, exposing how the
/// largest certifiable k varies with epsilon.
pub fn sweep(plan: &ExperimentPlan, root: &Path) -> Result<Vec<SweepRow>> {
    if plan.sweep_sigmas.is_empty() {
        return Err(DpflError::Config("plan has no sweep sigmas".into()));
    }
    let (_, test, _) = super::build_world(plan)?;
    let mut rows = Vec::with_capacity(plan.sweep_sigmas.len());
    for &sigma in &plan.sweep_sigmas {
        let mut sub = plan.with_attack(None, plan.runs, format!("{}-sigma{sigma}", plan.name));
        sub.federation.noise_multiplier = sigma;
        sub.sweep_sigmas = Vec::new();
        let ensemble = run_ensemble(&sub, root)?;
        let certification = certify_prediction(&ensemble, &test, &plan.k_grid, plan.psi)?;
        rows.push(SweepRow {
            sigma,
            epsilon: certification.epsilon,
            max_certified_k: certification.max_certified_k(),
            accuracy: certification.accuracy,
        });
    }

    let tables = root.join("plans").join(plan.plan_id()).join("tables");
    fs::create_dir_all(&tables)?;
    let mut header = "sigma,epsilon,max_certified_k".to_string();
    for &k in &plan.k_grid {
        header.push_str(&format!(",cert_acc_k{k}"));
    }
    let csv_rows: Vec<String> = rows
        .iter()
        .map(|row| {
            let mut line = format!(
                "{},{},{}",
                csv_float(row.sigma),
                csv_float(row.epsilon),
                row.max_certified_k
                    .map_or_else(|| "-1".to_string(), |k| k.to_string()),
            );
            for (_, acc) in &row.accuracy {
                line.push(',');
                line.push_str(&csv_float(*acc));
            }
            line
        })
        .collect();
    write_csv(&tables.join("tradeoff.csv"), &header, &csv_rows)?;
    Ok(rows)
}

/// Merges per-plan tables into combined plot-data files under `out`:
/// every `certified_accuracy.csv`, `cost_bounds.csv`, and `tradeoff.csv`
/// found below `root/plans` is concatenated with a leading plan column.
pub fn report(root: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (table, merged_name) in [
        ("certified_accuracy.csv", "certified_accuracy_all.csv"),
        ("cost_bounds.csv", "cost_bounds_all.csv"),
        ("min_attackers.csv", "min_attackers_all.csv"),
        ("tradeoff.csv", "tradeoff_all.csv"),
    ] {
        let mut merged: Vec<String> = Vec::new();
        let mut header: Option<String> = None;
        let plans_dir = root.join("plans");
        let mut plan_dirs: Vec<PathBuf> = match fs::read_dir(&plans_dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect(),
            Err(_) => Vec::new(),
        };
        plan_dirs.sort();
        for plan_dir in plan_dirs {
            let path = plan_dir.join("tables").join(table);
            let Ok(content) = fs::read_to_string(&path) else {
                continue;
            };
            let plan_name = plan_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut lines = content.lines();
            if let Some(first) = lines.next() {
                header.get_or_insert_with(|| format!("plan,{first}"));
            }
            for line in lines {
                merged.push(format!("{plan_name},{line}"));
            }
        }
        if let Some(header) = header {
            let path = out.join(merged_name);
            write_csv(&path, &header, &merged)?;
            written.push(path);
        }
    }
    Ok(written)
}
