//! Ablation suites: small grids over the grouping hyperparameters, each
//! emitting one CSV with a linear-probe accuracy per configuration.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;

use crate::config::TrainConfig;
use crate::dataio::load_dataset;
use crate::run::{pretrain, probe_state};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Beta,
    Tricks,
    Groups,
    UpdateOp,
    Objective,
}

impl Suite {
    pub fn parse(name: &str) -> Option<Suite> {
        Some(match name {
            "beta" => Suite::Beta,
            "tricks" => Suite::Tricks,
            "groups" => Suite::Groups,
            "update-op" => Suite::UpdateOp,
            "objective" => Suite::Objective,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Beta => "beta",
            Suite::Tricks => "tricks",
            Suite::Groups => "groups",
            Suite::UpdateOp => "update-op",
            Suite::Objective => "objective",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblateRow {
    pub label: String,
    /// Probe top-1 per seed.
    pub accs: Vec<f64>,
    pub mean: f64,
    pub collapsed: bool,
}

fn variants(suite: Suite, base: &TrainConfig) -> Vec<(String, TrainConfig, Vec<u64>)> {
    let one = vec![base.seed];
    let three = vec![base.seed, base.seed + 1, base.seed + 2];
    match suite {
        Suite::Beta => [0.0, 0.9, 0.99, 0.999]
            .iter()
            .map(|&b| {
                let mut cfg = base.clone();
                cfg.beta_start = b;
                cfg.beta_end = b;
                (format!("beta_{b}"), cfg, one.clone())
            })
            .collect(),
        Suite::Tricks => [
            ("none", false, false),
            ("pd", true, false),
            ("reset", false, true),
            ("pd_reset", true, true),
        ]
        .iter()
        .map(|&(label, pd, reset)| {
            let mut cfg = base.clone();
            cfg.periodic_clustering = pd;
            cfg.reset_momentum = reset;
            (label.to_string(), cfg, one.clone())
        })
        .collect(),
        Suite::Groups => [8usize, 16, 32, 64]
            .iter()
            .map(|&l| {
                let mut cfg = base.clone();
                cfg.l = l;
                (format!("l_{l}"), cfg, one.clone())
            })
            .collect(),
        Suite::UpdateOp => ["mu", "au", "al", "rs"]
            .iter()
            .map(|&v| {
                let mut cfg = base.clone();
                cfg.update_variant = v.to_string();
                (v.to_string(), cfg, three.clone())
            })
            .collect(),
        Suite::Objective => ["eq1", "eq2", "eq3"]
            .iter()
            .map(|&o| {
                let mut cfg = base.clone();
                cfg.objective = o.to_string();
                (o.to_string(), cfg, one.clone())
            })
            .collect(),
    }
}

/// Run every configuration in the suite and write one CSV row per config.
pub fn run_suite(suite: Suite, base: &TrainConfig, out_csv: &Path) -> anyhow::Result<Vec<AblateRow>> {
    let ds_path = base.dataset.clone();
    let mut rows = Vec::new();
    for (label, cfg_base, seeds) in variants(suite, base) {
        let mut accs = Vec::new();
        let mut collapsed = false;
        for seed in &seeds {
            let mut cfg = cfg_base.clone();
            cfg.seed = *seed;
            cfg.run_dir = format!("{}/{}/{}_s{}", base.run_dir, suite.name(), label, seed);
            let mut res =
                pretrain(&cfg, None).with_context(|| format!("suite run {label} seed {seed}"))?;
            collapsed |= res.events.iter().any(|e| e.contains("collapse"));
            let ds = load_dataset(Path::new(&ds_path))?;
            let out = probe_state(&mut res.state, &ds, cfg.augment.large_size, 0.2, 0)?;
            accs.push(out.probe.top1);
            eprintln!(
                "[{}] {} seed {}: probe top-1 {:.3}",
                suite.name(),
                label,
                seed,
                out.probe.top1
            );
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        rows.push(AblateRow {
            label,
            accs,
            mean,
            collapsed,
        });
    }

    if let Some(parent) = out_csv.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(out_csv)?);
    writeln!(f, "config,mean_top1,collapsed,per_seed_top1")?;
    for r in &rows {
        let per_seed = r
            .accs
            .iter()
            .map(|a| format!("{a}"))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(f, "{},{},{},{}", r.label, r.mean, r.collapsed, per_seed)?;
    }
    f.flush()?;
    Ok(rows)
}
