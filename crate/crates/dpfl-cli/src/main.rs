//! `dpfl`: command-line front end for the federated DP simulator and
//! certification harness. An experiment is described by a JSON plan file;
//! common fields can be overridden by flags. The worker-pool size is read
//! from `DPFL_PARALLELISM`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dpfl_core::attackkit::{AttackKind, AttackSpec};
use dpfl_core::datakit::{
    self, load_idx, partition_by_label_shard, partition_iid, Dataset, PartitionStrategy,
};
use dpfl_core::fedsim::{Algorithm, ClippingStrategy};
use dpfl_core::harness::{
    accountant_report, build_world, certify_cost, certify_prediction, init_parallelism, report,
    run_ensemble, sweep, ExperimentPlan,
};

#[derive(Parser)]
#[command(
    name = "dpfl",
    about = "Differentially private federated learning simulator with certified robustness against poisoning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset ingestion, synthesis, and partitioning.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Run a single training run of the plan (run index 0).
    Train {
        #[command(flatten)]
        plan: PlanArgs,
        /// Output directory root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the plan's full Monte-Carlo ensemble (resumable).
    Ensemble {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the privacy report for a configuration without training.
    Accountant {
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Certify predictions of the plan's clean ensemble.
    CertifyPred {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the attack grid and emit certified cost bounds.
    CertifyCost {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the noise multiplier and emit the privacy-tradeoff table.
    Sweep {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge per-plan tables under a root into combined plot-data CSVs.
    Report {
        /// Root directory that holds `plans/`.
        #[arg(long)]
        root: PathBuf,
        /// Output directory for the merged tables.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate Gaussian blob data and write it as a dataset JSON file.
    Synthesize {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ingest a local IDX image/label pair (standard MNIST layout).
    Fetch {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 10)]
        num_classes: usize,
        /// Keep two classes only, remapped to 0/1 ("a,b").
        #[arg(long)]
        binary: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset JSON file into per-user index lists.
    Partition {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        users: usize,
        #[arg(long, value_parser = parse_strategy, default_value = "iid")]
        strategy: PartitionStrategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Plan source plus field overrides. Flags win over the config file.
#[derive(Args)]
struct PlanArgs {
    /// JSON plan file supplying all fields.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    algorithm: Option<String>,
    /// Noise multiplier sigma.
    #[arg(long)]
    sigma: Option<f64>,
    /// Clipping threshold S.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    clipping: Option<String>,
    /// Total users N.
    #[arg(long)]
    users: Option<usize>,
    /// User sampling probability q.
    #[arg(long)]
    q: Option<f64>,
    /// Batch fraction p.
    #[arg(long)]
    p: Option<f64>,
    /// Federation rounds T.
    #[arg(long)]
    rounds: Option<usize>,
    /// Local epochs E.
    #[arg(long)]
    epochs: Option<usize>,
    /// Local DP-SGD steps V.
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate eta.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// DP target delta.
    #[arg(long)]
    delta: Option<f64>,
    /// Monte-Carlo repetitions O.
    #[arg(long)]
    runs: Option<usize>,
    /// Hoeffding error tolerance psi.
    #[arg(long)]
    psi: Option<f64>,
    /// Attack-cost range bound.
    #[arg(long)]
    c_bar: Option<f64>,
    /// Base seed for run derivation.
    #[arg(long)]
    seed: Option<u64>,
    /// Certification adversary counts, e.g. "0,1,2,4".
    #[arg(long)]
    k_grid: Option<String>,
    /// Sweep noise multipliers, e.g. "4,8,12".
    #[arg(long)]
    sigmas: Option<String>,
    /// Attack kind override: backdoor | label-flip | distributed-backdoor.
    #[arg(long)]
    attack_kind: Option<String>,
    /// Adversarial users / poisoned instances.
    #[arg(long)]
    attack_k: Option<usize>,
    /// Model-replacement scale gamma.
    #[arg(long)]
    gamma: Option<f64>,
    /// Poison fraction alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Trigger pattern as "index:value,index:value".
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long)]
    target_label: Option<usize>,
    #[arg(long)]
    source_class: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<PartitionStrategy, String> {
    match s {
        "iid" => Ok(PartitionStrategy::Iid),
        "by-label-shard" => Ok(PartitionStrategy::ByLabelShard),
        other => Err(format!("unknown strategy {other}")),
    }
}

fn parse_algorithm(s: &str) -> Result<Algorithm> {
    Ok(match s {
        "userdp-fedavg" => Algorithm::UserdpFedavg,
        "insdp-fedsgd" => Algorithm::InsdpFedsgd,
        "insdp-fedavg" => Algorithm::InsdpFedavg,
        "plain-fedavg" => Algorithm::PlainFedavg,
        other => bail!("unknown algorithm {other}"),
    })
}

fn parse_clipping(s: &str) -> Result<ClippingStrategy> {
    Ok(match s {
        "flat" => ClippingStrategy::Flat,
        "per-layer" => ClippingStrategy::PerLayer,
        "flat-median" => ClippingStrategy::FlatMedian,
        "per-layer-median" => ClippingStrategy::PerLayerMedian,
        other => bail!("unknown clipping strategy {other}"),
    })
}

fn parse_attack_kind(s: &str) -> Result<AttackKind> {
    Ok(match s {
        "backdoor" | "bkd" => AttackKind::Backdoor,
        "label-flip" | "lf" => AttackKind::LabelFlip,
        "distributed-backdoor" | "dba" => AttackKind::DistributedBackdoor,
        other => bail!("unknown attack kind {other}"),
    })
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|part| !part.is_empty())
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| anyhow::anyhow!("bad {what} entry: {part}"))
        })
        .collect()
}

fn parse_pattern(s: &str) -> Result<Vec<(usize, f64)>> {
    s.split(',')
        .filter(|part| !part.is_empty())
        .map(|part| {
            let (index, value) = part
                .split_once(':')
                .with_context(|| format!("pattern entry {part} is not index:value"))?;
            Ok((index.trim().parse()?, value.trim().parse()?))
        })
        .collect()
}

impl PlanArgs {
    fn load(&self) -> Result<ExperimentPlan> {
        let text = std::fs::read_to_string(&self.config)
            .with_context(|| format!("reading plan {}", self.config.display()))?;
        let mut plan: ExperimentPlan = serde_json::from_str(&text)
            .with_context(|| format!("parsing plan {}", self.config.display()))?;

        let fed = &mut plan.federation;
        if let Some(algorithm) = &self.algorithm {
            fed.algorithm = parse_algorithm(algorithm)?;
        }
        if let Some(clipping) = &self.clipping {
            fed.clipping = parse_clipping(clipping)?;
        }
        if let Some(sigma) = self.sigma {
            fed.noise_multiplier = sigma;
        }
        if let Some(clip) = self.clip {
            fed.clip_threshold = clip;
        }
        if let Some(users) = self.users {
            fed.num_users = users;
        }
        if let Some(q) = self.q {
            fed.user_sampling = q;
        }
        if let Some(p) = self.p {
            fed.batch_fraction = p;
        }
        if let Some(rounds) = self.rounds {
            fed.rounds = rounds;
        }
        if let Some(epochs) = self.epochs {
            fed.local_epochs = epochs;
        }
        if let Some(steps) = self.steps {
            fed.local_steps = steps;
        }
        if let Some(lr) = self.lr {
            fed.learning_rate = lr;
        }
        if let Some(momentum) = self.momentum {
            fed.momentum = momentum;
        }
        if let Some(weight_decay) = self.weight_decay {
            fed.weight_decay = weight_decay;
        }
        if let Some(delta) = self.delta {
            fed.target_delta = delta;
        }
        if let Some(runs) = self.runs {
            plan.runs = runs;
        }
        if let Some(psi) = self.psi {
            plan.psi = psi;
        }
        if let Some(c_bar) = self.c_bar {
            plan.c_bar = c_bar;
        }
        if let Some(seed) = self.seed {
            plan.base_seed = seed;
        }
        if let Some(k_grid) = &self.k_grid {
            plan.k_grid = parse_list(k_grid, "k grid")?;
        }
        if let Some(sigmas) = &self.sigmas {
            plan.sweep_sigmas = parse_list(sigmas, "sigma sweep")?;
        }

        let wants_attack = self.attack_kind.is_some()
            || self.attack_k.is_some()
            || self.gamma.is_some()
            || self.alpha.is_some()
            || self.pattern.is_some();
        if wants_attack {
            let mut attack = plan.attack.clone().unwrap_or(AttackSpec {
                kind: AttackKind::Backdoor,
                k: 1,
                poison_fraction: 1.0,
                scale: 1.0,
                pattern: Vec::new(),
                target_label: 0,
                source_class: None,
            });
            if let Some(kind) = &self.attack_kind {
                attack.kind = parse_attack_kind(kind)?;
            }
            if let Some(k) = self.attack_k {
                attack.k = k;
            }
            if let Some(gamma) = self.gamma {
                attack.scale = gamma;
            }
            if let Some(alpha) = self.alpha {
                attack.poison_fraction = alpha;
            }
            if let Some(pattern) = &self.pattern {
                attack.pattern = parse_pattern(pattern)?;
            }
            if let Some(target) = self.target_label {
                attack.target_label = target;
            }
            if let Some(source) = self.source_class {
                attack.source_class = Some(source);
            }
            plan.attack = Some(attack);
        }
        plan.validate()
            .map_err(|e| anyhow::anyhow!("invalid plan: {e}"))?;
        Ok(plan)
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn main() -> Result<()> {
    init_parallelism();
    let cli = Cli::parse();
    match cli.command {
        Command::Data { command } => data_command(command),
        Command::Train { plan, out } => {
            let mut plan = plan.load()?;
            plan.runs = 1;
            let ensemble = run_ensemble(&plan, &out)?;
            let record = &ensemble.records[0];
            println!(
                "run 0 of plan {} complete: epsilon={}, clean accuracy={:.4}",
                plan.plan_id(),
                record.privacy.epsilon,
                record.clean_accuracy
            );
            println!("record: {}", ensemble.dir.join("runs/0/record.json").display());
            Ok(())
        }
        Command::Ensemble { plan, out } => {
            let plan = plan.load()?;
            let ensemble = run_ensemble(&plan, &out)?;
            let mean_acc: f64 = ensemble
                .records
                .iter()
                .map(|r| r.clean_accuracy)
                .sum::<f64>()
                / ensemble.records.len() as f64;
            println!(
                "ensemble {} complete: {} runs, epsilon={}, mean clean accuracy={:.4}",
                plan.plan_id(),
                ensemble.records.len(),
                ensemble.privacy().epsilon,
                mean_acc
            );
            Ok(())
        }
        Command::Accountant { plan } => {
            let plan = plan.load()?;
            let report = accountant_report(&plan.federation)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::CertifyPred { plan, out } => {
            let plan = plan.load()?;
            let (_, test, _) = build_world(&plan)?;
            let ensemble = run_ensemble(&plan, &out)?;
            let certification = certify_prediction(&ensemble, &test, &plan.k_grid, plan.psi)?;
            for (k, accuracy) in &certification.accuracy {
                println!("k={k}: certified accuracy {accuracy:.4}");
            }
            println!(
                "tables: {}",
                ensemble.tables_dir().join("certified_predictions.csv").display()
            );
            Ok(())
        }
        Command::CertifyCost { plan, out } => {
            let plan = plan.load()?;
            let report = certify_cost(&plan, &out)?;
            println!(
                "epsilon={:.4}: {} cost cells certified",
                report.epsilon,
                report.cells.len()
            );
            for cell in &report.cells {
                println!(
                    "{:?} k={} gamma={} alpha={}: lower={:.4} empirical={:.4} upper={:.4}",
                    cell.kind, cell.k, cell.gamma, cell.alpha, cell.lower, cell.empirical,
                    cell.upper
                );
            }
            Ok(())
        }
        Command::Sweep { plan, out } => {
            let plan = plan.load()?;
            let rows = sweep(&plan, &out)?;
            for row in &rows {
                println!(
                    "sigma={} epsilon={:.4} max certified k={:?}",
                    row.sigma, row.epsilon, row.max_certified_k
                );
            }
            Ok(())
        }
        Command::Report { root, out } => {
            let written = report(&root, &out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn data_command(command: DataCommand) -> Result<()> {
    match command {
        DataCommand::Synthesize {
            n,
            dim,
            classes,
            separation,
            seed,
            out,
        } => {
            let data = datakit::synthesize_blobs(n, dim, classes, separation, seed)?;
            write_json(&out, &data)?;
            println!("wrote {} examples to {}", data.len(), out.display());
            Ok(())
        }
        DataCommand::Fetch {
            images,
            labels,
            num_classes,
            binary,
            out,
        } => {
            let examples = load_idx(&images, &labels)?;
            let mut data = Dataset::new(examples, num_classes)?;
            if let Some(binary) = binary {
                let classes: Vec<usize> = parse_list(&binary, "binary classes")?;
                if classes.len() != 2 {
                    bail!("--binary expects exactly two classes");
                }
                data = datakit::filter_binary(&data, classes[0], classes[1])?;
            }
            write_json(&out, &data)?;
            println!("wrote {} examples to {}", data.len(), out.display());
            Ok(())
        }
        DataCommand::Partition {
            data,
            users,
            strategy,
            seed,
            out,
        } => {
            let dataset = load_dataset(&data)?;
            let partition = match strategy {
                PartitionStrategy::Iid => partition_iid(&dataset, users, seed)?,
                PartitionStrategy::ByLabelShard => {
                    partition_by_label_shard(&dataset, users, seed)?
                }
            };
            write_json(&out, &partition)?;
            println!("wrote {users}-user partition to {}", out.display());
            Ok(())
        }
    }
}
