//! Experiment orchestration: plans, config hashing, seeded Monte-Carlo
//! ensembles with resume, certification tables, sweeps, and merged reports.
//!
//! Output layout, per plan:
//!
//! ```text
//! <root>/plans/<plan_id>/
//!     plan.json
//!     runs/<o>/record.json      one per Monte-Carlo repetition
//!     runs/<o>/checkpoint.bin   model checkpoint (modelkit format)
//!     tables/*.csv              certification outputs
//! ```
//!
//! `plan_id` hashes the full plan including the base seed; `config_hash`
//! hashes the plan with seeds zeroed, so reruns of the same configuration
//! under different base seeds share a config lineage but never a directory.

mod certify;
mod ensemble;

pub use certify::{
    certify_cost, certify_prediction, report, sweep, CostCellResult, CostReport,
    PredictionCertification, SweepRow,
};
pub use ensemble::{run_ensemble, EnsembleOutput, RunRecord};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attackkit::{AttackKind, AttackSpec, Pattern};
use crate::datakit::{
    filter_binary, load_idx, partition_by_label_shard, partition_iid, synthesize_blobs, Dataset,
    Partition, PartitionStrategy,
};
use crate::error::{DpflError, Result};
use crate::fedsim::{Algorithm, FederationConfig};
use crate::modelkit::Arch;
use crate::privkit::{
    rdp_to_dp, sampled_gaussian_rdp, PrivacyLevel, PrivacyReport, RdpLedger,
};
use crate::seed;

/// Environment variable read by [`init_parallelism`].
pub const PARALLELISM_ENV: &str = "DPFL_PARALLELISM";

/// Configures the global worker pool from `DPFL_PARALLELISM`. No-op when the
/// variable is unset, unparsable, or the pool is already built.
pub fn init_parallelism() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(value) = std::env::var(PARALLELISM_ENV) {
            if let Ok(threads) = value.parse::<usize>() {
                if threads > 0 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(threads)
                        .build_global();
                }
            }
        }
    }
}

/// Fans `f` out over `0..n`, in parallel when the `parallel` feature is on.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_sequential(n, f)
    }
}

/// Sequential fallback, always available (benchmark baseline).
pub fn map_indexed_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Where the training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSpec {
    Synthetic {
        train: usize,
        test: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: usize,
        /// Restrict to two classes, remapped to 0/1.
        binary: Option<(usize, usize)>,
    },
}

impl DataSpec {
    /// Materializes (train, test); deterministic for synthetic sources.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSpec::Synthetic {
                train,
                test,
                dim,
                classes,
                separation,
                seed: data_seed,
            } => {
                let train_ds = synthesize_blobs(*train, *dim, *classes, *separation, *data_seed)?;
                let test_ds = synthesize_blobs(
                    *test,
                    *dim,
                    *classes,
                    *separation,
                    seed::derive(*data_seed, &[seed::DATA, 0x7e57]),
                )?;
                Ok((train_ds, test_ds))
            }
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                num_classes,
                binary,
            } => {
                let train_ds =
                    Dataset::new(load_idx(train_images, train_labels)?, *num_classes)?;
                let test_ds = Dataset::new(load_idx(test_images, test_labels)?, *num_classes)?;
                match binary {
                    Some((a, b)) => Ok((
                        filter_binary(&train_ds, *a, *b)?,
                        filter_binary(&test_ds, *a, *b)?,
                    )),
                    None => Ok((train_ds, test_ds)),
                }
            }
        }
    }
}

/// Model family; input and class counts come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ModelCfg {
    Logistic,
    Mlp { hidden: usize },
}

impl ModelCfg {
    pub fn arch(&self, data: &Dataset) -> Arch {
        match *self {
            ModelCfg::Logistic => Arch::Logistic {
                inputs: data.feature_dim(),
                classes: data.num_classes,
            },
            ModelCfg::Mlp { hidden } => Arch::Mlp {
                inputs: data.feature_dim(),
                hidden,
                classes: data.num_classes,
            },
        }
    }
}

/// Attack grid swept by `certify-cost`: one poisoned ensemble per
/// (kind, k, gamma, alpha) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackGrid {
    pub kinds: Vec<AttackKind>,
    /// Adversary counts; 0 denotes the clean cell.
    pub ks: Vec<usize>,
    pub gammas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub pattern: Pattern,
    pub target_label: usize,
    pub source_class: usize,
    /// Monte-Carlo repetitions per poisoned cell.
    #[serde(default = "default_poison_runs")]
    pub poison_runs: usize,
}

fn default_poison_runs() -> usize {
    100
}

fn default_psi() -> f64 {
    0.01
}
fn default_c_bar() -> f64 {
    5.0
}
fn default_runs() -> usize {
    1000
}
fn default_k_grid() -> Vec<u32> {
    vec![0, 1, 2, 4]
}
fn default_tau_grid() -> Vec<f64> {
    vec![1.0, 1.5, 2.0]
}

/// A full experiment description: the federation template, data and model,
/// Monte-Carlo repetition count, certification parameters, and optional
/// sweep/attack axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub federation: FederationConfig,
    pub model: ModelCfg,
    pub data: DataSpec,
    pub partition_strategy: PartitionStrategy,
    /// Poisoning applied to every run of this plan (None = clean).
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    /// Monte-Carlo repetitions O.
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Hoeffding error tolerance.
    #[serde(default = "default_psi")]
    pub psi: f64,
    /// Attack-cost range bound.
    #[serde(default = "default_c_bar")]
    pub c_bar: f64,
    #[serde(default = "default_k_grid")]
    pub k_grid: Vec<u32>,
    #[serde(default = "default_tau_grid")]
    pub tau_grid: Vec<f64>,
    /// Noise multipliers for the privacy-tradeoff sweep.
    #[serde(default)]
    pub sweep_sigmas: Vec<f64>,
    #[serde(default)]
    pub attack_grid: Option<AttackGrid>,
    pub base_seed: u64,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        if self.runs == 0 {
            return Err(DpflError::Config("need at least one run".into()));
        }
        if !(0.0 < self.psi && self.psi <= 1.0) {
            return Err(DpflError::Config("psi must lie in (0, 1]".into()));
        }
        if !(self.c_bar > 0.0) {
            return Err(DpflError::Config("c_bar must be positive".into()));
        }
        if let Some(attack) = &self.attack {
            attack.validate()?;
        }
        for &sigma in &self.sweep_sigmas {
            let mut swept = self.federation.clone();
            swept.noise_multiplier = sigma;
            swept.validate()?;
        }
        Ok(())
    }

    /// Hash of the full plan (seeds normalized into `base_seed` only; the
    /// display name is cosmetic and excluded, so identical computations
    /// share a directory).
    pub fn plan_id(&self) -> String {
        let mut canonical = self.clone();
        canonical.name = String::new();
        canonical.federation.seed = 0;
        hash_hex(&canonical)
    }

    /// Seed-independent lineage hash: plans differing only in base seed
    /// share it.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.name = String::new();
        canonical.federation.seed = 0;
        canonical.base_seed = 0;
        hash_hex(&canonical)
    }

    /// The derived clean/poisoned sibling used by the cost grid.
    pub fn with_attack(&self, attack: Option<AttackSpec>, runs: usize, name: String) -> Self {
        let mut plan = self.clone();
        plan.attack = attack;
        plan.runs = runs;
        plan.name = name;
        plan
    }
}

/// FNV-1a over the canonical JSON serialization (struct field order is
/// declaration order, floats print via the shortest round-trip form, so the
/// bytes — and the hash — are platform-stable).
fn hash_hex<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("plan serialization cannot fail");
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{hash:016x}")
}

/// CSV float format: 17 significant digits, round-trip exact for f64.
pub fn csv_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Builds the fixed per-plan world: train data, test data, partition. The
/// world depends on the data spec only, never on the base seed, so plans in
/// one config lineage train on the same user split.
pub fn build_world(plan: &ExperimentPlan) -> Result<(Dataset, Dataset, Partition)> {
    let (train, test) = plan.data.load()?;
    let partition_seed = match &plan.data {
        DataSpec::Synthetic { seed: s, .. } => seed::derive(*s, &[seed::DATA, 0x9a47]),
        DataSpec::Idx { .. } => seed::derive(0, &[seed::DATA, 0x9a47]),
    };
    let partition = match plan.partition_strategy {
        PartitionStrategy::Iid => partition_iid(&train, plan.federation.num_users, partition_seed)?,
        PartitionStrategy::ByLabelShard => {
            partition_by_label_shard(&train, plan.federation.num_users, partition_seed)?
        }
    };
    Ok((train, test, partition))
}

/// Privacy report straight from the accountant, without training.
///
/// For instance-level FedAvg with q < 1 this is the every-round-selection
/// upper bound; the trained run reports the (not larger) realized maximum.
pub fn accountant_report(cfg: &FederationConfig) -> Result<PrivacyReport> {
    cfg.validate()?;
    let mut ledger = RdpLedger::new(cfg.target_delta);
    match cfg.algorithm {
        Algorithm::PlainFedavg => Ok(PrivacyReport {
            epsilon: f64::INFINITY,
            delta: cfg.target_delta,
            optimal_order: 0,
            level: PrivacyLevel::User,
            rounds: cfg.rounds,
        }),
        Algorithm::UserdpFedavg => {
            let curve =
                ledger.curve(|a| sampled_gaussian_rdp(a, cfg.user_sampling, cfg.noise_multiplier))?;
            for _ in 0..cfg.rounds {
                ledger.accumulate(&curve)?;
            }
            rdp_to_dp(&ledger, cfg.target_delta, PrivacyLevel::User)
        }
        Algorithm::InsdpFedsgd => {
            let effective = cfg.noise_multiplier * (cfg.users_per_round() as f64).sqrt();
            let rate = cfg.batch_fraction * cfg.user_sampling;
            let curve = ledger.curve(|a| sampled_gaussian_rdp(a, rate, effective))?;
            for _ in 0..cfg.rounds {
                ledger.accumulate(&curve)?;
            }
            rdp_to_dp(&ledger, cfg.target_delta, PrivacyLevel::Instance)
        }
        Algorithm::InsdpFedavg => {
            let curve = ledger
                .curve(|a| sampled_gaussian_rdp(a, cfg.batch_fraction, cfg.noise_multiplier))?;
            for _ in 0..cfg.local_steps * cfg.rounds {
                ledger.accumulate(&curve)?;
            }
            let mut report = rdp_to_dp(&ledger, cfg.target_delta, PrivacyLevel::Instance)?;
            // The ledger counts local steps; the report counts FL rounds.
            report.rounds = cfg.rounds;
            Ok(report)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::ClippingStrategy;

    pub(crate) fn tiny_plan() -> ExperimentPlan {
        ExperimentPlan {
            name: "tiny".into(),
            federation: FederationConfig {
                num_users: 4,
                user_sampling: 0.5,
                rounds: 2,
                local_epochs: 1,
                local_steps: 1,
                learning_rate: 0.3,
                momentum: 0.9,
                weight_decay: 5e-4,
                batch_fraction: 0.5,
                clip_threshold: 1.0,
                noise_multiplier: 2.0,
                target_delta: 1e-3,
                clipping: ClippingStrategy::Flat,
                algorithm: Algorithm::UserdpFedavg,
                seed: 0,
            },
            model: ModelCfg::Logistic,
            data: DataSpec::Synthetic {
                train: 32,
                test: 8,
                dim: 4,
                classes: 2,
                separation: 8.0,
                seed: 21,
            },
            partition_strategy: PartitionStrategy::Iid,
            attack: None,
            runs: 3,
            psi: 0.01,
            c_bar: 5.0,
            k_grid: vec![0, 1],
            tau_grid: vec![1.0, 2.0],
            sweep_sigmas: vec![],
            attack_grid: None,
            base_seed: 7,
        }
    }

    #[test]
    fn hash_is_stable_and_seed_factored() {
        let plan = tiny_plan();
        assert_eq!(plan.plan_id(), plan.plan_id());
        let mut reseeded = plan.clone();
        reseeded.base_seed = 8;
        // Different ensembles, same config lineage.
        assert_ne!(plan.plan_id(), reseeded.plan_id());
        assert_eq!(plan.config_hash(), reseeded.config_hash());
        // Any semantically meaningful field changes both hashes.
        let mut changed = plan.clone();
        changed.federation.noise_multiplier = 2.5;
        assert_ne!(plan.plan_id(), changed.plan_id());
        assert_ne!(plan.config_hash(), changed.config_hash());
        // The per-run seed slot and the display name are not meaningful.
        let mut run_seeded = plan;
        run_seeded.federation.seed = 123;
        run_seeded.name = "renamed".into();
        assert_eq!(run_seeded.plan_id(), tiny_plan().plan_id());
    }

    #[test]
    fn csv_float_round_trips() {
        for x in [0.1, 1.0 / 3.0, 2.808e-1, 1e-300, -4.75] {
            let s = csv_float(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(csv_float(f64::INFINITY), "inf");
    }

    #[test]
    fn world_is_deterministic() {
        let plan = tiny_plan();
        let (a_train, a_test, a_part) = build_world(&plan).unwrap();
        let (b_train, b_test, b_part) = build_world(&plan).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        assert_eq!(a_part, b_part);
        a_part.validate(a_train.len()).unwrap();
    }

    #[test]
    fn accountant_dry_run_limits() {
        let mut cfg = tiny_plan().federation;
        cfg.num_users = 200;
        cfg.user_sampling = 0.1;
        cfg.rounds = 3;
        cfg.target_delta = 0.0029;
        cfg.noise_multiplier = 1e6;
        // The grid floors epsilon at log(1/delta)/63; "near zero" means
        // sitting on that floor.
        let tiny_eps = accountant_report(&cfg).unwrap().epsilon;
        assert!(tiny_eps < (1.0f64 / 0.0029).ln() / 63.0 + 1e-6, "{tiny_eps}");

        cfg.noise_multiplier = 1.0;
        let base = accountant_report(&cfg).unwrap().epsilon;
        cfg.rounds = 6;
        let doubled = accountant_report(&cfg).unwrap().epsilon;
        assert!(doubled > base);

        cfg.algorithm = Algorithm::PlainFedavg;
        assert!(accountant_report(&cfg).unwrap().epsilon.is_infinite());
    }

    #[test]
    fn accountant_matches_published_instance_level_anchors() {
        // Instance-level FedAvg: 10 users all selected, batch 50 of 1266,
        // 25 local steps, 3 rounds, sigma = 5 -> 0.3593 within 10%.
        let mut cfg = tiny_plan().federation;
        cfg.algorithm = Algorithm::InsdpFedavg;
        cfg.num_users = 10;
        cfg.user_sampling = 1.0;
        cfg.batch_fraction = 50.0 / 1266.0;
        cfg.local_steps = 25;
        cfg.rounds = 3;
        cfg.noise_multiplier = 5.0;
        cfg.target_delta = 1e-5;
        let eps = accountant_report(&cfg).unwrap().epsilon;
        assert!((eps - 0.3593).abs() / 0.3593 < 0.10, "{eps}");

        // One round with 100 local steps at batch 50 of 1000, sigma = 4
        // -> 0.6546 within 10%; this epsilon feeds the same certified-k
        // formulas as the user-level reports.
        cfg.batch_fraction = 50.0 / 1000.0;
        cfg.local_steps = 100;
        cfg.rounds = 1;
        cfg.noise_multiplier = 4.0;
        let eps = accountant_report(&cfg).unwrap().epsilon;
        assert!((eps - 0.6546).abs() / 0.6546 < 0.10, "{eps}");
        let at_user_level = crate::certkit::certified_k(0.9, 0.05, eps, 1e-5).unwrap();
        let at_instance_level = crate::certkit::certified_k(0.9, 0.05, eps, 1e-5).unwrap();
        assert_eq!(at_user_level, at_instance_level);
    }
}
