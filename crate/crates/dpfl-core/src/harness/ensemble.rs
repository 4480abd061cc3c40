//! Seeded Monte-Carlo ensembles of training runs with per-run persistence
//! and resume.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_world, map_indexed, ExperimentPlan};
use crate::certkit::{attack_cost, estimate_expectation, CostEval, CostKind, EnsembleEstimate};
use crate::datakit::Dataset;
use crate::error::{DpflError, Result};
use crate::fedsim::{run, FedEnv, RoundMeta};
use crate::modelkit::{predict_confidence, save_checkpoint};
use crate::privkit::PrivacyReport;
use crate::seed;

/// Everything persisted about one Monte-Carlo repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub plan_id: String,
    pub config_hash: String,
    pub run_index: usize,
    pub seed: u64,
    pub privacy: PrivacyReport,
    pub informal_dp: bool,
    /// Fraction of the test set this run's model classifies correctly.
    pub clean_accuracy: f64,
    /// Per-test-sample class confidences of this run's model.
    pub confidences: Vec<Vec<f64>>,
    /// Attack-cost evaluations of this run's model, keyed by cost kind.
    pub costs: Vec<(CostKind, CostEval)>,
    pub rounds: Vec<RoundMeta>,
    /// Checkpoint path relative to the run directory.
    pub checkpoint: String,
}

impl RunRecord {
    pub fn cost(&self, kind: CostKind) -> Option<CostEval> {
        self.costs.iter().find(|(k, _)| *k == kind).map(|(_, c)| *c)
    }
}

/// A completed ensemble: the plan directory plus all run records in run
/// order.
#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub plan: ExperimentPlan,
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
}

impl EnsembleOutput {
    pub fn tables_dir(&self) -> PathBuf {
        self.dir.join("tables")
    }

    /// Per-test-sample Monte-Carlo estimates (uncalibrated).
    pub fn estimates(&self) -> Result<Vec<EnsembleEstimate>> {
        let samples = self.records[0].confidences.len();
        (0..samples)
            .map(|i| {
                let per_run: Vec<Vec<f64>> = self
                    .records
                    .iter()
                    .map(|r| r.confidences[i].clone())
                    .collect();
                estimate_expectation(&per_run)
            })
            .collect()
    }

    /// Mean attack cost over the ensemble for one cost kind, with a flag
    /// when any run hit the cost clamp.
    pub fn mean_cost(&self, kind: CostKind) -> Result<CostEval> {
        let mut total = 0.0;
        let mut clamped = false;
        for record in &self.records {
            let eval = record.cost(kind).ok_or_else(|| {
                DpflError::Usage(format!("run {} has no {kind:?} cost", record.run_index))
            })?;
            total += eval.value;
            clamped |= eval.clamped;
        }
        Ok(CostEval {
            value: total / self.records.len() as f64,
            clamped,
        })
    }

    /// The (epsilon, delta) report shared by every run of the plan.
    pub fn privacy(&self) -> &PrivacyReport {
        &self.records[0].privacy
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A stored record is reusable when it matches the plan and has the right
/// shape; anything else gets quarantined and recomputed.
fn try_load_record(
    path: &Path,
    plan_id: &str,
    run_index: usize,
    test_len: usize,
) -> Option<RunRecord> {
    let bytes = fs::read(path).ok()?;
    let record: RunRecord = serde_json::from_slice(&bytes).ok()?;
    (record.plan_id == plan_id
        && record.run_index == run_index
        && record.confidences.len() == test_len)
        .then_some(record)
}

/// Which attack-cost functions to evaluate per run: the plan attack's kind
/// for poisoned plans, otherwise every kind in the attack grid (so clean
/// ensembles carry the matching J(D) estimates).
fn cost_kinds(plan: &ExperimentPlan) -> Vec<(CostKind, super::AttackGrid)> {
    let as_cost = |kind: crate::attackkit::AttackKind| match kind {
        crate::attackkit::AttackKind::LabelFlip => CostKind::LabelFlip,
        _ => CostKind::Backdoor,
    };
    if let Some(attack) = &plan.attack {
        let grid = super::AttackGrid {
            kinds: vec![attack.kind],
            ks: vec![],
            gammas: vec![],
            alphas: vec![],
            pattern: attack.pattern.clone(),
            target_label: attack.target_label,
            source_class: attack.source_class.unwrap_or(0),
            poison_runs: plan.runs,
        };
        vec![(as_cost(attack.kind), grid)]
    } else if let Some(grid) = &plan.attack_grid {
        let mut kinds: Vec<CostKind> = grid.kinds.iter().map(|&k| as_cost(k)).collect();
        kinds.sort_by_key(|k| matches!(k, CostKind::LabelFlip));
        kinds.dedup();
        kinds.into_iter().map(|k| (k, grid.clone())).collect()
    } else {
        Vec::new()
    }
}

fn execute_run(
    plan: &ExperimentPlan,
    env: &FedEnv<'_>,
    test: &Dataset,
    run_dir: &Path,
    plan_id: &str,
    run_index: usize,
) -> Result<RunRecord> {
    let run_seed = seed::run_seed(plan.base_seed, run_index as u64);
    let mut cfg = plan.federation.clone();
    cfg.seed = run_seed;
    let trained = run(&cfg, env, plan.attack.as_ref())?;

    let mut confidences = Vec::with_capacity(test.len());
    let mut correct = 0usize;
    for example in &test.examples {
        let probs = predict_confidence(&trained.params, &example.features)?;
        let top = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if top == example.label {
            correct += 1;
        }
        confidences.push(probs);
    }

    let mut costs = Vec::new();
    for (kind, grid) in cost_kinds(plan) {
        let eval = attack_cost(
            kind,
            &trained.params,
            &test.examples,
            &grid.pattern,
            grid.target_label,
            Some(grid.source_class),
            plan.c_bar,
        )?;
        costs.push((kind, eval));
    }

    fs::create_dir_all(run_dir)?;
    save_checkpoint(&trained.params, &run_dir.join("checkpoint.bin"))?;
    let record = RunRecord {
        plan_id: plan_id.to_string(),
        config_hash: plan.config_hash(),
        run_index,
        seed: run_seed,
        privacy: trained.report,
        informal_dp: trained.informal_dp,
        clean_accuracy: correct as f64 / test.len().max(1) as f64,
        confidences,
        costs,
        rounds: trained.rounds,
        checkpoint: "checkpoint.bin".to_string(),
    };
    write_atomic(&run_dir.join("record.json"), &serde_json::to_vec(&record)?)?;
    Ok(record)
}

/// Runs (or resumes) the plan's ensemble of `plan.runs` independent
/// repetitions with seeds derived from the base seed. Completed runs are
/// detected by a valid record and skipped; corrupt records are quarantined
/// to `record.json.corrupt` and recomputed.
pub fn run_ensemble(plan: &ExperimentPlan, root: &Path) -> Result<EnsembleOutput> {
    plan.validate()?;
    let plan_id = plan.plan_id();
    let dir = root.join("plans").join(&plan_id);
    fs::create_dir_all(dir.join("runs"))?;
    fs::create_dir_all(dir.join("tables"))?;
    write_atomic(&dir.join("plan.json"), &serde_json::to_vec_pretty(plan)?)?;

    let (train, test, partition) = build_world(plan)?;
    let env = FedEnv {
        data: &train,
        partition: &partition,
        arch: plan.model.arch(&train),
    };

    let results: Vec<Result<RunRecord>> = map_indexed(plan.runs, |o| {
        let run_dir = dir.join("runs").join(o.to_string());
        let record_path = run_dir.join("record.json");
        if record_path.exists() {
            if let Some(record) = try_load_record(&record_path, &plan_id, o, test.len()) {
                return Ok(record);
            }
            // Partial or mismatched record: quarantine and recompute.
            let _ = fs::rename(&record_path, run_dir.join("record.json.corrupt"));
        }
        execute_run(plan, &env, &test, &run_dir, &plan_id, o)
    });

    let mut records = Vec::with_capacity(plan.runs);
    for result in results {
        records.push(result?);
    }
    Ok(EnsembleOutput {
        plan: plan.clone(),
        dir,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_plan;
    use super::*;

    #[test]
    fn ensemble_runs_resume_and_skip_completed_work() {
        let root = tempfile::tempdir().unwrap();
        let plan = tiny_plan();
        let first = run_ensemble(&plan, root.path()).unwrap();
        assert_eq!(first.records.len(), 3);

        // Tag a stored record; a resumed ensemble must keep it verbatim
        // (zero retraining), not recompute it.
        let record_path = first.dir.join("runs/1/record.json");
        let mut tagged: RunRecord =
            serde_json::from_slice(&fs::read(&record_path).unwrap()).unwrap();
        tagged.clean_accuracy = -7.0;
        fs::write(&record_path, serde_json::to_vec(&tagged).unwrap()).unwrap();

        let second = run_ensemble(&plan, root.path()).unwrap();
        assert_eq!(second.records[1].clean_accuracy, -7.0);
        assert_eq!(second.records[0], first.records[0]);

        // A corrupt record is quarantined and regenerated.
        fs::write(&record_path, b"{ not json").unwrap();
        let third = run_ensemble(&plan, root.path()).unwrap();
        assert_eq!(third.records[1].clean_accuracy, first.records[1].clean_accuracy);
        assert!(first.dir.join("runs/1/record.json.corrupt").exists());
    }

    #[test]
    fn single_run_ensemble_estimate_equals_the_run() {
        let root = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan();
        plan.runs = 1;
        let out = run_ensemble(&plan, root.path()).unwrap();
        let estimates = out.estimates().unwrap();
        for (estimate, confidence) in estimates.iter().zip(&out.records[0].confidences) {
            assert_eq!(&estimate.mean, confidence);
        }
    }

    #[test]
    fn different_base_seeds_share_lineage_but_not_ensembles() {
        let root = tempfile::tempdir().unwrap();
        let plan_a = tiny_plan();
        let mut plan_b = tiny_plan();
        plan_b.base_seed = 8;
        let a = run_ensemble(&plan_a, root.path()).unwrap();
        let b = run_ensemble(&plan_b, root.path()).unwrap();
        assert_ne!(a.dir, b.dir);
        assert_eq!(a.records[0].config_hash, b.records[0].config_hash);
        assert_ne!(a.records[0].confidences, b.records[0].confidences);
    }
}
