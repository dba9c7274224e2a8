use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use smog::ablate::{run_suite, Suite};
use smog::config::{ConfigError, TrainConfig};
use smog::dataio::{gen_synthetic, load_dataset, save_dataset, DataError};
use smog::run::{entropy_histogram, entropy_state, pretrain, probe_state, state_from_checkpoint};

#[derive(Parser)]
#[command(name = "smog", about = "Group-contrastive self-supervised pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    SynthData {
        #[arg(long, default_value_t = 4)]
        classes: u16,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain per a TOML config, optionally resuming from a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe + kNN on frozen features of a checkpoint.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Test fraction of the split.
        #[arg(long, default_value_t = 0.2)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write probe.csv (defaults next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Group label-entropy report for a checkpoint.
    EntropyReport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid: beta | tricks | groups | update-op | objective.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit 2 for configuration problems, 3 for runtime failures.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(d) = cause.downcast_ref::<DataError>() {
            if matches!(d, DataError::Config(_)) {
                return 2;
            }
        }
    }
    3
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthData {
            classes,
            per_class,
            size,
            noise,
            seed,
            out,
        } => {
            let ds = gen_synthetic(classes, per_class, size, noise, seed)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} images ({classes} classes, {size}x{size}) to {}",
                ds.len(),
                out.display()
            );
        }
        Command::Pretrain { config, resume } => {
            let cfg = TrainConfig::from_path(&config)?;
            let res = pretrain(&cfg, resume.as_deref())?;
            println!(
                "done: metrics {} checkpoint {}",
                res.metrics_path.display(),
                res.final_ckpt.display()
            );
        }
        Command::Probe {
            ckpt,
            dataset,
            split,
            seed,
            out,
        } => {
            let ds = load_dataset(&dataset)?;
            let (mut state, cfg) = state_from_checkpoint(&ckpt, &ds)?;
            let res = probe_state(&mut state, &ds, cfg.augment.large_size, split, seed)?;
            let out = out.unwrap_or_else(|| sibling(&ckpt, "probe.csv"));
            let mut f = fs::File::create(&out)?;
            writeln!(f, "metric,value")?;
            writeln!(f, "probe_top1,{}", res.probe.top1)?;
            writeln!(f, "knn_top1,{}", res.knn)?;
            for (k, acc) in res.probe.per_class.iter().enumerate() {
                writeln!(f, "class_{k}_top1,{acc}")?;
            }
            println!(
                "probe top-1 {:.4}  knn top-1 {:.4}  ({})",
                res.probe.top1,
                res.knn,
                out.display()
            );
        }
        Command::EntropyReport {
            ckpt,
            dataset,
            seed,
            out,
        } => {
            let ds = load_dataset(&dataset)?;
            let (mut state, cfg) = state_from_checkpoint(&ckpt, &ds)?;
            let rep = entropy_state(&mut state, &ds, cfg.augment.large_size, seed)?;
            let out_dir = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
            fs::create_dir_all(&out_dir)?;
            let per_group = out_dir.join("entropy.csv");
            let mut f = fs::File::create(&per_group)?;
            writeln!(f, "group,entropy")?;
            for (k, h) in rep.per_group.iter().enumerate() {
                if let Some(h) = h {
                    writeln!(f, "{k},{h}")?;
                }
            }
            let max_h = (ds.class_count() as f64).ln().max(1e-9);
            let hist = entropy_histogram(&rep, 10, max_h);
            let hist_path = out_dir.join("entropy_hist.csv");
            let mut f = fs::File::create(&hist_path)?;
            writeln!(f, "bin,density")?;
            for (bin, density) in hist {
                writeln!(f, "{bin},{density}")?;
            }
            println!(
                "mean group entropy {:.4} (random baseline {:.4}) -> {}, {}",
                rep.mean_entropy,
                rep.random_baseline,
                per_group.display(),
                hist_path.display()
            );
        }
        Command::Ablate { suite, config, out } => {
            let cfg = TrainConfig::from_path(&config)?;
            let suite = Suite::parse(&suite)
                .ok_or_else(|| ConfigError::Invalid(format!("unknown suite `{suite}`")))?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from(&cfg.run_dir).join(format!("{}.csv", suite.name()))
            });
            let rows = run_suite(suite, &cfg, &out)?;
            for r in &rows {
                println!(
                    "{:<10} mean top-1 {:.4}{}",
                    r.label,
                    r.mean,
                    if r.collapsed { "  [collapsed]" } else { "" }
                );
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}
