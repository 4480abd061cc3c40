//! The DP federated training algorithms plus a non-private FedAvg baseline,
//! with pluggable clipping strategies and attack injection.
//!
//! A single run is sequential (rounds form a dependency chain); Monte-Carlo
//! repetitions of runs share no mutable state and fan out in the harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attackkit::{scale_update, AttackSpec, PoisonedView};
use crate::datakit::{Dataset, LabeledExample, Partition};
use crate::error::{DpflError, Result};
use crate::modelkit::{grad, sgd_step, Arch, LayerView, ModelParams};
use crate::privkit::{
    clip, gaussian_noise_with, l2_norm, rdp_to_dp, sampled_gaussian_rdp, InstanceLedgerSet,
    PrivacyLevel, PrivacyReport, RdpLedger,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    UserdpFedavg,
    InsdpFedsgd,
    InsdpFedavg,
    PlainFedavg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClippingStrategy {
    Flat,
    PerLayer,
    FlatMedian,
    PerLayerMedian,
}

impl ClippingStrategy {
    pub fn per_layer(self) -> bool {
        matches!(self, ClippingStrategy::PerLayer | ClippingStrategy::PerLayerMedian)
    }

    pub fn median(self) -> bool {
        matches!(self, ClippingStrategy::FlatMedian | ClippingStrategy::PerLayerMedian)
    }
}

/// All training and privacy hyperparameters of one federated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Total users N.
    pub num_users: usize,
    /// User sampling probability q; m = max(ceil(q N), 1) users per round.
    pub user_sampling: f64,
    /// Federation rounds T.
    pub rounds: usize,
    /// Local epochs E (FedAvg-style algorithms).
    #[serde(default = "default_one")]
    pub local_epochs: usize,
    /// Local DP-SGD steps V per selected round (instance-level FedAvg).
    #[serde(default = "default_one")]
    pub local_steps: usize,
    /// Learning rate eta.
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Batch fraction p = L / |D_i|.
    pub batch_fraction: f64,
    /// Clipping threshold S.
    pub clip_threshold: f64,
    /// Noise multiplier sigma.
    pub noise_multiplier: f64,
    /// DP target delta.
    pub target_delta: f64,
    #[serde(default = "default_clipping")]
    pub clipping: ClippingStrategy,
    pub algorithm: Algorithm,
    pub seed: u64,
}

fn default_one() -> usize {
    1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_clipping() -> ClippingStrategy {
    ClippingStrategy::Flat
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 {
            return Err(DpflError::Config("need at least one user".into()));
        }
        if !(0.0 < self.user_sampling && self.user_sampling <= 1.0) {
            return Err(DpflError::Config(format!(
                "user sampling probability must lie in (0, 1], got {}",
                self.user_sampling
            )));
        }
        if !(0.0 < self.batch_fraction && self.batch_fraction <= 1.0) {
            return Err(DpflError::Config(format!(
                "batch fraction must lie in (0, 1], got {}",
                self.batch_fraction
            )));
        }
        if self.noise_multiplier < 0.0 {
            return Err(DpflError::Config("noise multiplier must be >= 0".into()));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(DpflError::Config("clipping threshold must be > 0".into()));
        }
        if self.rounds == 0 {
            return Err(DpflError::Config("need at least one round".into()));
        }
        if !(0.0 < self.target_delta && self.target_delta < 1.0) {
            return Err(DpflError::Config("delta must lie in (0, 1)".into()));
        }
        // Exactly one of E / V is meaningful per algorithm.
        match self.algorithm {
            Algorithm::UserdpFedavg | Algorithm::PlainFedavg => {
                if self.local_epochs == 0 {
                    return Err(DpflError::Config("local epochs must be >= 1".into()));
                }
            }
            Algorithm::InsdpFedavg => {
                if self.local_steps == 0 {
                    return Err(DpflError::Config("local steps must be >= 1".into()));
                }
            }
            Algorithm::InsdpFedsgd => {}
        }
        Ok(())
    }

    /// Users selected per round: `m = max(ceil(q N), 1)`.
    pub fn users_per_round(&self) -> usize {
        ((self.user_sampling * self.num_users as f64).ceil() as usize).max(1)
    }

    /// Local batch size for a dataset of `n` examples.
    pub fn batch_size(&self, n: usize) -> usize {
        (((self.batch_fraction * n as f64).ceil() as usize).max(1)).min(n.max(1))
    }
}

/// Immutable inputs shared by every run of a plan.
#[derive(Debug, Clone, Copy)]
pub struct FedEnv<'a> {
    pub data: &'a Dataset,
    pub partition: &'a Partition,
    pub arch: Arch,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Record the global parameter vector after every round.
    pub record_trajectory: bool,
}

/// Per-round metadata kept for audits and the run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMeta {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Pre-clip update norm per selected user.
    pub raw_update_norms: Vec<f64>,
    /// Post-clip norms per selected user and clipping scope; every entry is
    /// bounded by the matching threshold regardless of the attack scale.
    pub clipped_scope_norms: Vec<Vec<f64>>,
    /// Threshold actually used per clipping scope this round.
    pub thresholds: Vec<f64>,
    /// Privacy cost accumulated through this round.
    pub global_epsilon: f64,
}

/// Output of one federated training run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub params: ModelParams,
    pub report: PrivacyReport,
    pub rounds: Vec<RoundMeta>,
    /// Set for median clipping strategies: the threshold leaks a little
    /// information, so the reported epsilon is informal.
    pub informal_dp: bool,
    /// Global parameters after each round (only when requested).
    pub trajectory: Vec<Vec<f64>>,
    /// Instance-level algorithms: per-user local ledger accumulation
    /// counts (local steps times rounds selected). Empty otherwise.
    pub local_accumulations: Vec<usize>,
}

struct AggregateOutcome {
    update: Vec<f64>,
    thresholds: Vec<f64>,
    per_user_scope_norms: Vec<Vec<f64>>,
}

fn scopes(views: &[LayerView], strategy: ClippingStrategy, total_len: usize) -> Vec<LayerView> {
    if strategy.per_layer() {
        views.to_vec()
    } else {
        vec![LayerView {
            name: "flat".to_string(),
            offset: 0,
            len: total_len,
        }]
    }
}

fn lower_median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Server-side aggregation: clip each update per the strategy, sum, add
/// Gaussian noise per clipped scope, divide by the number of updates.
fn aggregate_with(
    deltas: &[Vec<f64>],
    views: &[LayerView],
    strategy: ClippingStrategy,
    s: f64,
    sigma: f64,
    rng: &mut impl rand::Rng,
) -> Result<AggregateOutcome> {
    if deltas.is_empty() {
        return Err(DpflError::Usage("aggregating an empty update set".into()));
    }
    let dim = deltas[0].len();
    if deltas.iter().any(|d| d.len() != dim) {
        return Err(DpflError::Shape("updates have inconsistent lengths".into()));
    }
    let scopes = scopes(views, strategy, dim);
    // Median strategies set each scope threshold to the (lower) median of
    // that scope's norms across this round's updates.
    let thresholds: Vec<f64> = scopes
        .iter()
        .map(|scope| {
            if strategy.median() {
                lower_median(
                    deltas
                        .iter()
                        .map(|d| l2_norm(&d[scope.offset..scope.offset + scope.len]))
                        .collect(),
                )
                .max(f64::MIN_POSITIVE)
            } else {
                s
            }
        })
        .collect();
    let mut sum = vec![0.0; dim];
    let mut per_user_scope_norms = Vec::with_capacity(deltas.len());
    for delta in deltas {
        let mut scope_norms = Vec::with_capacity(scopes.len());
        for (scope, &threshold) in scopes.iter().zip(&thresholds) {
            let clipped = clip(&delta[scope.offset..scope.offset + scope.len], threshold)?;
            scope_norms.push(l2_norm(&clipped));
            for (acc, v) in sum[scope.offset..scope.offset + scope.len]
                .iter_mut()
                .zip(&clipped)
            {
                *acc += v;
            }
        }
        per_user_scope_norms.push(scope_norms);
    }
    for (scope, &threshold) in scopes.iter().zip(&thresholds) {
        let noise = gaussian_noise_with(rng, scope.len, sigma, threshold)?;
        for (acc, n) in sum[scope.offset..scope.offset + scope.len]
            .iter_mut()
            .zip(&noise)
        {
            *acc += n;
        }
    }
    let inv = 1.0 / deltas.len() as f64;
    for acc in &mut sum {
        *acc *= inv;
    }
    Ok(AggregateOutcome {
        update: sum,
        thresholds,
        per_user_scope_norms,
    })
}

/// Seeded wrapper around the aggregation step.
pub fn aggregate(
    deltas: &[Vec<f64>],
    views: &[LayerView],
    strategy: ClippingStrategy,
    s: f64,
    sigma: f64,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    Ok(aggregate_with(deltas, views, strategy, s, sigma, &mut rng)?.update)
}

/// Without-replacement uniform draw of `m` indices out of `n`, ascending.
fn sample_indices(rng: &mut impl rand::Rng, n: usize, m: usize) -> Vec<usize> {
    let mut chosen = rand::seq::index::sample(rng, n, m).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Materializes a user's local dataset, applying the poisoning overlay when
/// one is active.
fn local_dataset(
    data: &Dataset,
    partition: &Partition,
    view: Option<&PoisonedView>,
    user: usize,
) -> Result<Vec<LabeledExample>> {
    partition.user_indices[user]
        .iter()
        .map(|&global| match view {
            Some(v) => v.example(data, global),
            None => Ok(data.examples[global].clone()),
        })
        .collect()
}

/// Multi-epoch local SGD (the FedAvg user update); returns the model delta.
fn local_fedavg_update(
    start: &ModelParams,
    local: &mut [LabeledExample],
    cfg: &FederationConfig,
    rng: &mut impl rand::Rng,
) -> Result<Vec<f64>> {
    use rand::seq::SliceRandom;
    let mut params = start.clone();
    let mut buffer = vec![0.0; start.len()];
    let batch = cfg.batch_size(local.len());
    for _ in 0..cfg.local_epochs {
        local.shuffle(rng);
        for chunk in local.chunks(batch) {
            let record = grad(&params, chunk)?;
            params = sgd_step(
                &params,
                &record.batch_mean,
                cfg.learning_rate,
                cfg.momentum,
                cfg.weight_decay,
                &mut buffer,
            )?;
        }
    }
    Ok(params
        .flat()
        .iter()
        .zip(start.flat())
        .map(|(w, w0)| w - w0)
        .collect())
}

/// One local DP-SGD step: per-example gradients on a sampled batch, each
/// clipped to S, summed, noised, and averaged over the batch size.
fn dp_sgd_step(
    params: &ModelParams,
    local: &[LabeledExample],
    cfg: &FederationConfig,
    rng: &mut impl rand::Rng,
) -> Result<ModelParams> {
    let batch_size = cfg.batch_size(local.len());
    let chosen = sample_indices(rng, local.len(), batch_size);
    let batch: Vec<LabeledExample> = chosen.iter().map(|&i| local[i].clone()).collect();
    let record = grad(params, &batch)?;
    let mut noisy_sum = gaussian_noise_with(
        rng,
        params.len(),
        cfg.noise_multiplier,
        cfg.clip_threshold,
    )?;
    for g in &record.per_example {
        let clipped = clip(g, cfg.clip_threshold)?;
        for (acc, v) in noisy_sum.iter_mut().zip(&clipped) {
            *acc += v;
        }
    }
    let inv = 1.0 / batch_size as f64;
    let step: Vec<f64> = noisy_sum
        .iter()
        .map(|v| -cfg.learning_rate * v * inv)
        .collect();
    params.offset_by(&step)
}

fn poisoned_view(
    cfg: &FederationConfig,
    env: &FedEnv,
    attack: Option<&AttackSpec>,
) -> Result<Option<PoisonedView>> {
    let Some(spec) = attack else { return Ok(None) };
    let view = match cfg.algorithm {
        Algorithm::UserdpFedavg | Algorithm::PlainFedavg => {
            PoisonedView::user_level(env.data, env.partition, spec)?
        }
        Algorithm::InsdpFedsgd | Algorithm::InsdpFedavg => {
            PoisonedView::instance_level(env.data, env.partition, spec)?
        }
    };
    Ok(Some(view))
}

fn check_env(cfg: &FederationConfig, env: &FedEnv) -> Result<()> {
    cfg.validate()?;
    env.arch.validate()?;
    if env.partition.num_users() != cfg.num_users {
        return Err(DpflError::Config(format!(
            "partition has {} users, config expects {}",
            env.partition.num_users(),
            cfg.num_users
        )));
    }
    if env.arch.inputs() != env.data.feature_dim() {
        return Err(DpflError::Shape(format!(
            "model expects {} inputs, data has {} features",
            env.arch.inputs(),
            env.data.feature_dim()
        )));
    }
    Ok(())
}

/// Dispatches on the configured algorithm.
pub fn run(
    cfg: &FederationConfig,
    env: &FedEnv,
    attack: Option<&AttackSpec>,
) -> Result<TrainedRun> {
    run_with_options(cfg, env, attack, RunOptions::default())
}

pub fn run_with_options(
    cfg: &FederationConfig,
    env: &FedEnv,
    attack: Option<&AttackSpec>,
    options: RunOptions,
) -> Result<TrainedRun> {
    match cfg.algorithm {
        Algorithm::UserdpFedavg => run_fedavg_like(cfg, env, attack, options, true),
        Algorithm::PlainFedavg => run_fedavg_like(cfg, env, attack, options, false),
        Algorithm::InsdpFedsgd => run_insdp_fedsgd_inner(cfg, env, attack, options),
        Algorithm::InsdpFedavg => run_insdp_fedavg_inner(cfg, env, attack, options),
    }
}

pub fn run_userdp_fedavg(
    cfg: &FederationConfig,
    env: &FedEnv,
    attack: Option<&AttackSpec>,
) -> Result<TrainedRun> {
    run_fedavg_like(cfg, env, attack, RunOptions::default(), true)
}

pub fn run_plain_fedavg(
    cfg: &FederationConfig,
    env: &FedEnv,
    attack: Option<&AttackSpec>,
) -> Result<TrainedRun> {
    run_fedavg_like(cfg, env, attack, RunOptions::default(), false)
}

fn run_fedavg_like(
    cfg: &FederationConfig,
    env: &FedEnv,
    attack: Option<&AttackSpec>,
    options: RunOptions,
    private: bool,
) -> Result<TrainedRun> {
    check_env(cfg, env)?;
    let view = poisoned_view(cfg, env, attack)?;
    let m = cfg.users_per_round();
    let mut params = ModelParams::init(env.arch, seed::derive(cfg.seed, &[seed::INIT]))?;
    let layer_views = env.arch.layer_views();
    let mut ledger = RdpLedger::new(cfg.target_delta);
    let curve = if private {
        ledger.curve(|a| sampled_gaussian_rdp(a, cfg.user_sampling, cfg.noise_multiplier))?
    } else {
        Vec::new()
    };
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut trajectory = Vec::new();
    for t in 1..=cfg.rounds {
        let mut sampling_rng =
            ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[seed::SAMPLING, t as u64]));
        let selected = sample_indices(&mut sampling_rng, cfg.num_users, m);
        let mut deltas = Vec::with_capacity(m);
        let mut raw_norms = Vec::with_capacity(m);
        for &user in &selected {
            let mut local_rng = ChaCha8Rng::seed_from_u64(seed::derive(
                cfg.seed,
                &[seed::LOCAL, t as u64, user as u64],
            ));
            let mut local = local_dataset(env.data, env.partition, view.as_ref(), user)?;
            let mut delta = local_fedavg_update(&params, &mut local, cfg, &mut local_rng)?;
            if let Some(v) = &view {
                if v.is_adversarial_user(user) {
                    delta = scale_update(&delta, v.spec().scale)?;
                }
            }
            raw_norms.push(l2_norm(&delta));
            deltas.push(delta);
        }
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[seed::NOISE, t as u64]));
        let outcome = if private {
            aggregate_with(
                &deltas,
                &layer_views,
                cfg.clipping,
                cfg.clip_threshold,
                cfg.noise_multiplier,
                &mut noise_rng,
            )?
        } else {
            // Non-private baseline: plain average of the raw updates.
            let dim = deltas[0].len();
            let mut sum = vec![0.0; dim];
            for delta in &deltas {
                for (acc, v) in sum.iter_mut().zip(delta) {
                    *acc += v;
                }
            }
            let inv = 1.0 / deltas.len() as f64;
            for acc in &mut sum {
                *acc *= inv;
            }
            AggregateOutcome {
                update: sum,
                thresholds: Vec::new(),
                per_user_scope_norms: Vec::new(),
            }
        };
        // User-level sensitivity: no scaled update survives past the clip.
        for scope_norms in &outcome.per_user_scope_norms {
            for (norm, threshold) in scope_norms.iter().zip(&outcome.thresholds) {
                if *norm > threshold + 1e-12 {
                    return Err(DpflError::Usage(format!(
                        "clipped norm {norm} exceeds threshold {threshold}"
                    )));
                }
            }
        }
        params = params.offset_by(&outcome.update)?;
        let global_epsilon = if private {
            ledger.accumulate(&curve)?;
            rdp_to_dp(&ledger, cfg.target_delta, PrivacyLevel::User)?.epsilon
        } else {
            f64::INFINITY
        };
        rounds.push(RoundMeta {
            round: t,
            selected,
            raw_update_norms: raw_norms,
            clipped_scope_norms: outcome.per_user_scope_norms,
            thresholds: outcome.thresholds,
            global_epsilon,
        });
        if options.record_trajectory {
            trajectory.push(params.flat().to_vec());
        }
    }
    let report = if private {
        rdp_to_dp(&ledger, cfg.target_delta, PrivacyLevel::User)?
    } else {
        PrivacyReport {
            epsilon: f64::INFINITY,
            delta: cfg.target_delta,
            optimal_order: 0,
            level: PrivacyLevel::User,
            rounds: cfg.rounds,
        }
    };
    Ok(TrainedRun {
        params,
        report,
        rounds,
        informal_dp: private && cfg.clipping.median(),
        trajectory,
        local_accumulations: Vec::new(),
    })
}

/// Instance-level DP FedSGD: every selected user takes one noisy SGD step on
/// per-example-clipped gradients; the accountant runs at sampling rate
/// `p * q` with effective noise `sigma * sqrt(m)`.
pub fn run_insdp_fedsgd(
    cfg: &FederationConfig,
    env: &FedEnv,
    attack: Option<&AttackSpec>,
) -> Result<TrainedRun> {
    run_insdp_fedsgd_inner(cfg, env, attack, RunOptions::default())
}

fn run_insdp_fedsgd_inner(
    cfg: &FederationConfig,
    env: &FedEnv,
    attack: Option<&AttackSpec>,
    options: RunOptions,
) -> Result<TrainedRun> {
    check_env(cfg, env)?;
    let view = poisoned_view(cfg, env, attack)?;
    let m = cfg.users_per_round();
    let mut params = ModelParams::init(env.arch, seed::derive(cfg.seed, &[seed::INIT]))?;
    let mut ledger = RdpLedger::new(cfg.target_delta);
    let effective_noise = cfg.noise_multiplier * (m as f64).sqrt();
    let instance_rate = cfg.batch_fraction * cfg.user_sampling;
    let curve = ledger.curve(|a| sampled_gaussian_rdp(a, instance_rate, effective_noise))?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut trajectory = Vec::new();
    for t in 1..=cfg.rounds {
        let mut sampling_rng =
            ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[seed::SAMPLING, t as u64]));
        let selected = sample_indices(&mut sampling_rng, cfg.num_users, m);
        let mut sum = vec![0.0; params.len()];
        let mut raw_norms = Vec::with_capacity(m);
        for &user in &selected {
            let mut local_rng = ChaCha8Rng::seed_from_u64(seed::derive(
                cfg.seed,
                &[seed::LOCAL, t as u64, user as u64],
            ));
            let local = local_dataset(env.data, env.partition, view.as_ref(), user)?;
            let next = dp_sgd_step(&params, &local, cfg, &mut local_rng)?;
            let delta: Vec<f64> = next
                .flat()
                .iter()
                .zip(params.flat())
                .map(|(w, w0)| w - w0)
                .collect();
            raw_norms.push(l2_norm(&delta));
            for (acc, v) in sum.iter_mut().zip(&delta) {
                *acc += v;
            }
        }
        let inv = 1.0 / m as f64;
        for acc in &mut sum {
            *acc *= inv;
        }
        params = params.offset_by(&sum)?;
        ledger.accumulate(&curve)?;
        let global_epsilon =
            rdp_to_dp(&ledger, cfg.target_delta, PrivacyLevel::Instance)?.epsilon;
        rounds.push(RoundMeta {
            round: t,
            selected,
            raw_update_norms: raw_norms,
            clipped_scope_norms: Vec::new(),
            thresholds: vec![cfg.clip_threshold],
            global_epsilon,
        });
        if options.record_trajectory {
            trajectory.push(params.flat().to_vec());
        }
    }
    let report = rdp_to_dp(&ledger, cfg.target_delta, PrivacyLevel::Instance)?;
    Ok(TrainedRun {
        params,
        report,
        rounds,
        informal_dp: false,
        trajectory,
        local_accumulations: Vec::new(),
    })
}

/// Instance-level DP FedAvg: selected users run V local DP-SGD steps, each
/// maintaining its own RDP ledger; unselected users carry their epsilon
/// forward unchanged and the global cost is the per-round maximum.
pub fn run_insdp_fedavg(
    cfg: &FederationConfig,
    env: &FedEnv,
    attack: Option<&AttackSpec>,
) -> Result<TrainedRun> {
    run_insdp_fedavg_inner(cfg, env, attack, RunOptions::default())
}

fn run_insdp_fedavg_inner(
    cfg: &FederationConfig,
    env: &FedEnv,
    attack: Option<&AttackSpec>,
    options: RunOptions,
) -> Result<TrainedRun> {
    check_env(cfg, env)?;
    let view = poisoned_view(cfg, env, attack)?;
    let m = cfg.users_per_round();
    let mut params = ModelParams::init(env.arch, seed::derive(cfg.seed, &[seed::INIT]))?;
    let mut ledgers = InstanceLedgerSet::new(cfg.num_users, cfg.target_delta);
    let step_curve = RdpLedger::new(cfg.target_delta)
        .curve(|a| sampled_gaussian_rdp(a, cfg.batch_fraction, cfg.noise_multiplier))?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut trajectory = Vec::new();
    for t in 1..=cfg.rounds {
        let mut sampling_rng =
            ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[seed::SAMPLING, t as u64]));
        let selected = sample_indices(&mut sampling_rng, cfg.num_users, m);
        let mut sum = vec![0.0; params.len()];
        let mut raw_norms = Vec::with_capacity(m);
        for &user in &selected {
            let mut local_rng = ChaCha8Rng::seed_from_u64(seed::derive(
                cfg.seed,
                &[seed::LOCAL, t as u64, user as u64],
            ));
            let local = local_dataset(env.data, env.partition, view.as_ref(), user)?;
            let mut local_params = params.clone();
            for _ in 0..cfg.local_steps {
                local_params = dp_sgd_step(&local_params, &local, cfg, &mut local_rng)?;
                ledgers.ledger_mut(user).accumulate(&step_curve)?;
            }
            ledgers.refresh(user)?;
            let delta: Vec<f64> = local_params
                .flat()
                .iter()
                .zip(params.flat())
                .map(|(w, w0)| w - w0)
                .collect();
            raw_norms.push(l2_norm(&delta));
            for (acc, v) in sum.iter_mut().zip(&delta) {
                *acc += v;
            }
        }
        let inv = 1.0 / m as f64;
        for acc in &mut sum {
            *acc *= inv;
        }
        params = params.offset_by(&sum)?;
        rounds.push(RoundMeta {
            round: t,
            selected,
            raw_update_norms: raw_norms,
            clipped_scope_norms: Vec::new(),
            thresholds: vec![cfg.clip_threshold],
            global_epsilon: ledgers.global_epsilon()?,
        });
        if options.record_trajectory {
            trajectory.push(params.flat().to_vec());
        }
    }
    let report = ledgers.global_report(cfg.rounds)?;
    let local_accumulations = (0..cfg.num_users)
        .map(|u| ledgers.ledger(u).rounds_applied())
        .collect();
    Ok(TrainedRun {
        params,
        report,
        rounds,
        informal_dp: false,
        trajectory,
        local_accumulations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attackkit::AttackKind;
    use crate::datakit::{partition_iid, synthesize_blobs};

    fn env<'a>(data: &'a Dataset, partition: &'a Partition) -> FedEnv<'a> {
        FedEnv {
            data,
            partition,
            arch: Arch::Logistic {
                inputs: data.feature_dim(),
                classes: data.num_classes,
            },
        }
    }

    fn base_config() -> FederationConfig {
        FederationConfig {
            num_users: 8,
            user_sampling: 0.5,
            rounds: 3,
            local_epochs: 1,
            local_steps: 2,
            learning_rate: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_fraction: 0.5,
            clip_threshold: 1.0,
            noise_multiplier: 1.0,
            target_delta: 1e-3,
            clipping: ClippingStrategy::Flat,
            algorithm: Algorithm::UserdpFedavg,
            seed: 11,
        }
    }

    fn blob_world() -> (Dataset, Partition) {
        let data = synthesize_blobs(64, 4, 2, 8.0, 5).unwrap();
        let partition = partition_iid(&data, 8, 3).unwrap();
        (data, partition)
    }

    #[test]
    fn users_per_round_uses_ceiling_with_floor_one() {
        let mut cfg = base_config();
        cfg.num_users = 200;
        cfg.user_sampling = 0.1;
        assert_eq!(cfg.users_per_round(), 20);
        cfg.user_sampling = 0.101;
        assert_eq!(cfg.users_per_round(), 21);
        cfg.num_users = 3;
        cfg.user_sampling = 0.01;
        assert_eq!(cfg.users_per_round(), 1);
    }

    #[test]
    fn runs_are_bit_deterministic() {
        let (data, partition) = blob_world();
        let e = env(&data, &partition);
        let cfg = base_config();
        let a = run(&cfg, &e, None).unwrap();
        let b = run(&cfg, &e, None).unwrap();
        assert_eq!(a.params.flat(), b.params.flat());
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.report, b.report);
        let mut other = cfg.clone();
        other.seed = 12;
        let c = run(&other, &e, None).unwrap();
        assert_ne!(a.params.flat(), c.params.flat());
    }

    #[test]
    fn noiseless_unclipped_userdp_equals_plain_fedavg() {
        let (data, partition) = blob_world();
        let e = env(&data, &partition);
        let mut cfg = base_config();
        cfg.noise_multiplier = 0.0;
        cfg.clip_threshold = 1e9;
        let opts = RunOptions {
            record_trajectory: true,
        };
        let user = run_with_options(&cfg, &e, None, opts).unwrap();
        let mut plain_cfg = cfg.clone();
        plain_cfg.algorithm = Algorithm::PlainFedavg;
        let plain = run_with_options(&plain_cfg, &e, None, opts).unwrap();
        assert_eq!(user.trajectory.len(), plain.trajectory.len());
        for (a, b) in user.trajectory.iter().zip(&plain.trajectory) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert!(user.report.epsilon.is_infinite());
        assert!(plain.report.epsilon.is_infinite());
    }

    #[test]
    fn scaled_updates_never_pierce_the_clip() {
        let (data, partition) = blob_world();
        let e = env(&data, &partition);
        let mut cfg = base_config();
        cfg.clip_threshold = 0.5;
        let attack = AttackSpec {
            kind: AttackKind::LabelFlip,
            k: 4,
            poison_fraction: 1.0,
            scale: 50.0,
            pattern: vec![],
            target_label: 0,
            source_class: Some(1),
        };
        let run_out = run(&cfg, &e, Some(&attack)).unwrap();
        for round in &run_out.rounds {
            for scope_norms in &round.clipped_scope_norms {
                for (norm, threshold) in scope_norms.iter().zip(&round.thresholds) {
                    assert!(norm <= &(threshold + 1e-12));
                }
            }
            // Adversarial users produce visibly scaled raw updates.
            assert!(round.raw_update_norms.iter().cloned().fold(0.0, f64::max) > 0.5);
        }
    }

    #[test]
    fn ledger_round_counts() {
        let (data, partition) = blob_world();
        let e = env(&data, &partition);
        let cfg = base_config();
        let out = run(&cfg, &e, None).unwrap();
        assert_eq!(out.report.rounds, cfg.rounds);
        assert_eq!(out.rounds.len(), cfg.rounds);

        let mut ins = cfg;
        ins.algorithm = Algorithm::InsdpFedavg;
        let out = run(&ins, &e, None).unwrap();
        assert_eq!(out.report.rounds, ins.rounds);
        // Each local ledger accumulated V steps per selected round.
        for user in 0..ins.num_users {
            let selected_rounds = out
                .rounds
                .iter()
                .filter(|r| r.selected.contains(&user))
                .count();
            assert_eq!(
                out.local_accumulations[user],
                ins.local_steps * selected_rounds
            );
        }
    }

    #[test]
    fn insdp_fedavg_single_user_epsilon_is_local_epsilon() {
        let data = synthesize_blobs(16, 4, 2, 8.0, 5).unwrap();
        let partition = partition_iid(&data, 1, 3).unwrap();
        let e = env(&data, &partition);
        let mut cfg = base_config();
        cfg.num_users = 1;
        cfg.user_sampling = 1.0;
        cfg.algorithm = Algorithm::InsdpFedavg;
        let out = run(&cfg, &e, None).unwrap();
        // Max over a singleton: the global epsilon equals the one local
        // DP-SGD accountant (V * T steps at rate p).
        let mut ledger = RdpLedger::new(cfg.target_delta);
        let curve = ledger
            .curve(|a| sampled_gaussian_rdp(a, cfg.batch_fraction, cfg.noise_multiplier))
            .unwrap();
        for _ in 0..cfg.local_steps * cfg.rounds {
            ledger.accumulate(&curve).unwrap();
        }
        let expected = rdp_to_dp(&ledger, cfg.target_delta, PrivacyLevel::Instance).unwrap();
        assert!((out.report.epsilon - expected.epsilon).abs() < 1e-12);
    }

    #[test]
    fn insdp_fedavg_unselected_users_keep_zero_epsilon() {
        let (data, partition) = blob_world();
        let e = env(&data, &partition);
        let mut cfg = base_config();
        cfg.algorithm = Algorithm::InsdpFedavg;
        cfg.user_sampling = 0.125; // one of eight users per round
        cfg.rounds = 2;
        let out = run(&cfg, &e, None).unwrap();
        assert!(out.report.epsilon > 0.0);
        // Epsilon growth is carried by selected users only; with two rounds
        // of one user each the global epsilon equals a 1-or-2-round local
        // accountant, strictly below an every-round one.
        let mut every_round = RdpLedger::new(cfg.target_delta);
        let curve = every_round
            .curve(|a| sampled_gaussian_rdp(a, cfg.batch_fraction, cfg.noise_multiplier))
            .unwrap();
        for _ in 0..cfg.local_steps * cfg.rounds {
            every_round.accumulate(&curve).unwrap();
        }
        let ceiling = rdp_to_dp(&every_round, cfg.target_delta, PrivacyLevel::Instance)
            .unwrap()
            .epsilon;
        assert!(out.report.epsilon <= ceiling + 1e-12);
    }

    #[test]
    fn insdp_fedsgd_degenerates_to_full_batch_step() {
        // q = 1, p = 1, sigma = 0, huge clip: one round is a plain
        // full-batch gradient step averaged over users.
        let data = synthesize_blobs(16, 4, 2, 8.0, 5).unwrap();
        let partition = partition_iid(&data, 4, 3).unwrap();
        let e = env(&data, &partition);
        let mut cfg = base_config();
        cfg.num_users = 4;
        cfg.user_sampling = 1.0;
        cfg.batch_fraction = 1.0;
        cfg.noise_multiplier = 0.0;
        cfg.clip_threshold = 1e9;
        cfg.rounds = 1;
        cfg.algorithm = Algorithm::InsdpFedsgd;
        let out = run(&cfg, &e, None).unwrap();

        let start = ModelParams::init(e.arch, seed::derive(cfg.seed, &[seed::INIT])).unwrap();
        let mut expected_update = vec![0.0; start.len()];
        for user in 0..4 {
            let local = local_dataset(&data, &partition, None, user).unwrap();
            // Mirror the per-user mean-of-clipped-gradients computation.
            let record = grad(&start, &local).unwrap();
            let mut user_sum = vec![0.0; start.len()];
            for g in &record.per_example {
                for (acc, v) in user_sum.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            for (acc, v) in expected_update.iter_mut().zip(&user_sum) {
                *acc += -cfg.learning_rate * v / local.len() as f64;
            }
        }
        for acc in &mut expected_update {
            *acc /= 4.0;
        }
        let expected = start.offset_by(&expected_update).unwrap();
        for (got, want) in out.params.flat().iter().zip(expected.flat()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn per_layer_with_single_scope_equals_flat() {
        let deltas = vec![vec![3.0, 4.0, 0.5], vec![-1.0, 0.2, 0.1]];
        let views = vec![LayerView {
            name: "all".into(),
            offset: 0,
            len: 3,
        }];
        let flat = aggregate(&deltas, &views, ClippingStrategy::Flat, 1.0, 0.7, 99).unwrap();
        let layered = aggregate(&deltas, &views, ClippingStrategy::PerLayer, 1.0, 0.7, 99).unwrap();
        assert_eq!(flat, layered);
    }

    #[test]
    fn median_strategy_uses_lower_median_norm() {
        // Norms 1, 2, 9 -> threshold 2.
        let deltas = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![9.0, 0.0]];
        let views = vec![LayerView {
            name: "all".into(),
            offset: 0,
            len: 2,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let outcome = aggregate_with(
            &deltas,
            &views,
            ClippingStrategy::FlatMedian,
            123.0,
            0.0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(outcome.thresholds, vec![2.0]);
        // Third update clipped from norm 9 to norm 2.
        assert!((outcome.per_user_scope_norms[2][0] - 2.0).abs() < 1e-12);
        // sum = (1 + 2*9/9, 2) .. i.e. [1+2, 2] / 3
        assert!((outcome.update[0] - 1.0).abs() < 1e-12);
        assert!((outcome.update[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_single_clean_update_is_identity() {
        let views = vec![LayerView {
            name: "all".into(),
            offset: 0,
            len: 2,
        }];
        let out = aggregate(
            &[vec![0.3, -0.4]],
            &views,
            ClippingStrategy::Flat,
            1.0,
            0.0,
            5,
        )
        .unwrap();
        assert_eq!(out, vec![0.3, -0.4]);
        assert!(aggregate(&[], &views, ClippingStrategy::Flat, 1.0, 0.0, 5).is_err());
    }

    #[test]
    fn median_runs_are_flagged_informal() {
        let (data, partition) = blob_world();
        let e = env(&data, &partition);
        let mut cfg = base_config();
        cfg.clipping = ClippingStrategy::FlatMedian;
        assert!(run(&cfg, &e, None).unwrap().informal_dp);
        cfg.clipping = ClippingStrategy::Flat;
        assert!(!run(&cfg, &e, None).unwrap().informal_dp);
    }

    #[test]
    fn userdp_run_reports_the_published_epsilon() {
        // 200 users at q = 0.1, T = 3, sigma = 3, delta = 0.0029.
        let data = synthesize_blobs(400, 4, 2, 8.0, 5).unwrap();
        let partition = partition_iid(&data, 200, 3).unwrap();
        let e = env(&data, &partition);
        let mut cfg = base_config();
        cfg.num_users = 200;
        cfg.user_sampling = 0.1;
        cfg.rounds = 3;
        cfg.noise_multiplier = 3.0;
        cfg.target_delta = 0.0029;
        let out = run(&cfg, &e, None).unwrap();
        assert!(
            (out.report.epsilon - 0.2808).abs() / 0.2808 < 0.10,
            "{}",
            out.report.epsilon
        );
        assert_eq!(out.report.rounds, 3);
    }

    #[test]
    fn insdp_fedsgd_run_epsilon_matches_dry_run_accountant() {
        let (data, partition) = blob_world();
        let e = env(&data, &partition);
        let mut cfg = base_config();
        cfg.algorithm = Algorithm::InsdpFedsgd;
        let out = run(&cfg, &e, None).unwrap();
        let mut ledger = RdpLedger::new(cfg.target_delta);
        let effective = cfg.noise_multiplier * (cfg.users_per_round() as f64).sqrt();
        let curve = ledger
            .curve(|a| {
                sampled_gaussian_rdp(a, cfg.batch_fraction * cfg.user_sampling, effective)
            })
            .unwrap();
        for _ in 0..cfg.rounds {
            ledger.accumulate(&curve).unwrap();
        }
        let expected = rdp_to_dp(&ledger, cfg.target_delta, PrivacyLevel::Instance).unwrap();
        assert_eq!(out.report.epsilon, expected.epsilon);
        assert_eq!(out.report.optimal_order, expected.optimal_order);
    }

    #[test]
    fn full_label_flip_collapses_source_class_accuracy() {
        // Every user flips class 1 to class 0; the trained model should
        // lose the source class relative to a clean run.
        let data = synthesize_blobs(64, 4, 2, 8.0, 5).unwrap();
        let partition = partition_iid(&data, 8, 3).unwrap();
        let e = env(&data, &partition);
        let mut cfg = base_config();
        cfg.noise_multiplier = 0.0;
        cfg.clip_threshold = 1e9;
        cfg.rounds = 5;
        cfg.user_sampling = 1.0;
        let attack = AttackSpec {
            kind: AttackKind::LabelFlip,
            k: 8,
            poison_fraction: 1.0,
            scale: 1.0,
            pattern: vec![],
            target_label: 0,
            source_class: Some(1),
        };
        let clean = run(&cfg, &e, None).unwrap();
        let poisoned = run(&cfg, &e, Some(&attack)).unwrap();
        let source_accuracy = |params: &ModelParams| {
            let test = synthesize_blobs(100, 4, 2, 8.0, 77).unwrap();
            let mut hits = 0;
            let mut total = 0;
            for ex in test.examples.iter().filter(|ex| ex.label == 1) {
                total += 1;
                let probs = crate::modelkit::predict_confidence(params, &ex.features).unwrap();
                if probs[1] > probs[0] {
                    hits += 1;
                }
            }
            hits as f64 / total as f64
        };
        let clean_acc = source_accuracy(&clean.params);
        let poisoned_acc = source_accuracy(&poisoned.params);
        assert!(
            poisoned_acc < clean_acc,
            "clean {clean_acc} poisoned {poisoned_acc}"
        );
        assert!(poisoned_acc < 0.5, "label flip had no effect: {poisoned_acc}");
    }

    #[test]
    fn config_partition_mismatch_rejected() {
        let (data, partition) = blob_world();
        let e = env(&data, &partition);
        let mut cfg = base_config();
        cfg.num_users = 9;
        assert!(matches!(run(&cfg, &e, None), Err(DpflError::Config(_))));
    }
}
