//! Command-line front end: run experiments, compare the two protocol arms,
//! inspect partitions, recompute metrics from feature dumps, and audit run
//! directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use fedfeat::config::{parse_config, DataSource, RunConfig};
use fedfeat::data::{load_cifar_bin, load_idx, synthetic, CifarVariant, Dataset};
use fedfeat::io::{
    audit_run_dir, dataset_checksum, load_features, save_features, save_params, write_manifest,
    FeatureDump, Manifest,
};
use fedfeat::metrics::metric_report;
use fedfeat::proto::{
    make_partition, rounds_csv, run_experiment_observed, ExperimentConfig, Mode, RoundReport,
};
use fedfeat::Result;

#[derive(Parser)]
#[command(name = "fedfeat", about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRunArgs {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's number of global rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Write features_round_<r>.bin dumps of the shared features.
    #[arg(long)]
    dump_features: bool,
    /// Write a model checkpoint after every round.
    #[arg(long)]
    checkpoints: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single arm of the protocol.
    Run {
        #[command(flatten)]
        common: CommonRunArgs,
        /// Protocol arm: fedavg or fedfeatplus.
        #[arg(long, default_value = "fedfeatplus")]
        mode: String,
    },
    /// Run both arms under one seed and emit a delta summary.
    Compare {
        #[command(flatten)]
        common: CommonRunArgs,
    },
    /// Print per-client label histograms for the configured partition.
    PartitionInspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute privacy metrics from saved feature dumps.
    Metrics {
        /// One or more features_round_<r>.bin files.
        files: Vec<PathBuf>,
        /// Histogram bin count.
        #[arg(long, default_value_t = 32)]
        bins: usize,
    },
    /// Verify that a run directory is complete.
    Audit {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "fedavg" => Ok(Mode::FedAvg),
        "fedfeatplus" => Ok(Mode::FedFeatPlus),
        other => Err(fedfeat::Error::Config(format!(
            "mode must be fedavg or fedfeatplus, got `{}`",
            other
        ))),
    }
}

fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match &cfg.source {
        DataSource::Synthetic(spec) => synthetic(spec),
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
        ),
        DataSource::Cifar {
            train,
            test,
            coarse_labels,
        } => {
            let variant = if *coarse_labels {
                CifarVariant::Cifar100
            } else {
                CifarVariant::Cifar10
            };
            (
                load_cifar_bin(train, variant)?,
                load_cifar_bin(test, variant)?,
            )
        }
    };
    if cfg.train_subset > 0 {
        train = train.subset(cfg.train_subset, cfg.exp.seed ^ 0x5ab5);
    }
    if cfg.test_subset > 0 {
        test = test.subset(cfg.test_subset, cfg.exp.seed ^ 0x7e57);
    }
    Ok((train, test))
}

fn apply_overrides(cfg: &mut RunConfig, common: &CommonRunArgs) {
    if let Some(seed) = common.seed {
        cfg.exp.seed = seed;
        if let DataSource::Synthetic(_) = cfg.source {
            // synthetic data keeps its own seed so the task itself is stable
        }
    }
    if let Some(rounds) = common.rounds {
        cfg.exp.global_rounds = rounds;
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn run_id(exp: &ExperimentConfig, mode: Mode, config_text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_text.as_bytes());
    hasher.update(exp.seed.to_le_bytes());
    hasher.update(mode.to_string().as_bytes());
    let digest = hasher.finalize();
    let hex: String = digest.iter().take(6).map(|b| format!("{:02x}", b)).collect();
    format!("{}-s{}-{}", mode, exp.seed, hex)
}

fn run_one_arm(
    cfg: &RunConfig,
    mode: Mode,
    dir: &Path,
    config_text: &str,
    train: &Dataset,
    test: &Dataset,
    dump_features: bool,
    checkpoints: bool,
) -> Result<Vec<RoundReport>> {
    fs::create_dir_all(dir)?;
    let started = unix_now();
    let reports = run_experiment_observed(&cfg.exp, mode, train, test, |artifacts| {
        if dump_features {
            save_features(
                &dir.join(format!("features_round_{}.bin", artifacts.round)),
                &FeatureDump {
                    round: artifacts.round,
                    fresh: artifacts.fresh_features.clone(),
                    noisy: artifacts.noisy_features.clone(),
                    labels: artifacts.feature_labels.to_vec(),
                },
            )?;
        }
        if checkpoints {
            save_params(
                &dir.join(format!("params_round_{}.bin", artifacts.round)),
                artifacts.model,
            )?;
        }
        Ok(())
    })?;
    fs::write(dir.join("rounds.csv"), rounds_csv(&reports))?;
    write_manifest(
        dir,
        &Manifest {
            run_id: run_id(&cfg.exp, mode, config_text),
            mode: mode.to_string(),
            seed: cfg.exp.seed,
            dataset_checksum: dataset_checksum(train),
            config_snapshot: config_text.to_string(),
            started_unix: started,
            finished_unix: unix_now(),
        },
    )?;
    Ok(reports)
}

fn max_acc(reports: &[RoundReport]) -> f64 {
    reports
        .iter()
        .map(|r| r.global_test_accuracy)
        .fold(0.0, f64::max)
}

fn cmd_run(common: &CommonRunArgs, mode: &str) -> Result<()> {
    let mode = parse_mode(mode)?;
    let config_text = fs::read_to_string(&common.config)?;
    let mut cfg = parse_config(&common.config)?;
    apply_overrides(&mut cfg, common);
    let (train, test) = load_datasets(&cfg)?;
    let reports = run_one_arm(
        &cfg,
        mode,
        &common.out,
        &config_text,
        &train,
        &test,
        common.dump_features,
        common.checkpoints,
    )?;
    if let Some(last) = reports.last() {
        println!(
            "{}: {} rounds, final accuracy {:.4}, max accuracy {:.4}",
            mode,
            reports.len(),
            last.global_test_accuracy,
            max_acc(&reports)
        );
    } else {
        println!("{}: 0 rounds", mode);
    }
    Ok(())
}

fn cmd_compare(common: &CommonRunArgs) -> Result<()> {
    let config_text = fs::read_to_string(&common.config)?;
    let mut cfg = parse_config(&common.config)?;
    apply_overrides(&mut cfg, common);
    let (train, test) = load_datasets(&cfg)?;
    fs::create_dir_all(&common.out)?;

    let arch = cfg.exp.arch.to_string();
    let mut summary = String::from("model,method,clients,max_accuracy,final_accuracy\n");
    let mut accs = Vec::new();
    for mode in [Mode::FedAvg, Mode::FedFeatPlus] {
        let dir = common.out.join(mode.to_string());
        let reports = run_one_arm(
            &cfg,
            mode,
            &dir,
            &config_text,
            &train,
            &test,
            common.dump_features,
            common.checkpoints,
        )?;
        let best = max_acc(&reports);
        let last = reports
            .last()
            .map(|r| r.global_test_accuracy)
            .unwrap_or(0.0);
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            arch, mode, cfg.exp.n_clients, best, last
        ));
        accs.push(best);
        println!("{}: max accuracy {:.4}", mode, best);
    }
    fs::write(common.out.join("summary.csv"), &summary)?;
    println!(
        "delta (fedfeatplus - fedavg) max accuracy: {:+.4}",
        accs[1] - accs[0]
    );
    Ok(())
}

fn cmd_partition_inspect(config: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = parse_config(config)?;
    if let Some(seed) = seed {
        cfg.exp.seed = seed;
    }
    let (train, _) = load_datasets(&cfg)?;
    let plan = make_partition(&cfg.exp, &train)?;
    let hists = plan.label_histograms(&train.labels, train.num_classes);
    println!(
        "client,size,distinct_labels,{}",
        (0..train.num_classes)
            .map(|c| format!("label_{}", c))
            .collect::<Vec<_>>()
            .join(",")
    );
    for (client, hist) in hists.iter().enumerate() {
        let size: usize = hist.iter().sum();
        let distinct = hist.iter().filter(|c| **c > 0).count();
        println!(
            "{},{},{},{}",
            client,
            size,
            distinct,
            hist.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
    }
    Ok(())
}

fn cmd_metrics(files: &[PathBuf], bins: usize) -> Result<()> {
    if files.is_empty() {
        return Err(fedfeat::Error::Config("no feature dumps given".into()));
    }
    let cfg = fedfeat::metrics::MetricConfig {
        bins,
        ..Default::default()
    };
    println!("file,round,rows,mi,ed,kl,fc");
    for f in files {
        let dump = load_features(f)?;
        let report = metric_report(&dump.fresh, &dump.noisy, &cfg)?;
        println!(
            "{},{},{},{},{},{},{}",
            f.display(),
            dump.round,
            dump.fresh.rows(),
            report.mi,
            report.ed,
            report.kl,
            report.fc
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, mode } => cmd_run(common, mode),
        Command::Compare { common } => cmd_compare(common),
        Command::PartitionInspect { config, seed } => {
            cmd_partition_inspect(config, seed.as_ref().copied())
        }
        Command::Metrics { files, bins } => cmd_metrics(files, *bins),
        Command::Audit { dir } => audit_run_dir(dir).map(|_| println!("ok: {}", dir.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
