use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use textseg_core::ablation;
use textseg_core::catalog;
use textseg_core::config::TrainConfig;
use textseg_core::data::{self, Dataset};
use textseg_core::model;
use textseg_core::pgm;
use textseg_core::trainer;

#[derive(Parser)]
#[command(name = "textseg", version, about = "Referring segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic referring-segmentation dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        count: usize,
        /// Canvas side length; a power of two, at least 32.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the checkpoint and trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Where the per-sample table and PGM predictions go.
        #[arg(long, default_value = "eval_out")]
        out: PathBuf,
    },
    /// Train every ablation condition and write the comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reverse-mode gradients against finite differences.
    Gradcheck {
        /// One catalog entry by name; lists the catalog when absent.
        #[arg(long, conflicts_with = "full")]
        op: Option<String>,
        /// The whole catalog plus the end-to-end network check.
        #[arg(long)]
        full: bool,
    },
    /// Print parameter and multiply-accumulate counts per module.
    Summary {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg = TrainConfig::parse(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> anyhow::Result<Dataset> {
    data::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn write_pgms(dir: &Path, preds: &[textseg_core::tensor::Tensor]) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    for (i, p) in preds.iter().enumerate() {
        pgm::write_pgm(&dir.join(format!("{i:04}.pgm")), p)?;
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData { seed, count, size, out } => {
            let (samples, manifest) = data::synth_generate(seed, count, size)?;
            data::save_dataset(&out, &samples, &manifest)?;
            println!(
                "wrote {count} samples ({} train / {} val / {} test) to {}",
                manifest.train,
                manifest.val,
                manifest.test,
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = read_config(&config)?;
            let ds = load_data(&data)?;
            let trained = trainer::train(&cfg, &ds)?;
            fs::create_dir_all(&out)?;
            trainer::save_checkpoint(&out.join("checkpoint.seut"), &trained.cfg, &trained.store)?;
            fs::write(out.join("train_trace.csv"), trained.report.csv())?;
            fs::write(out.join("train_report.md"), trained.report.markdown())?;
            let r = &trained.report;
            println!(
                "{} epochs, best epoch {} with val Dice {:.4} ({:.1}s); results in {}",
                r.epochs.len(),
                r.best_epoch,
                r.best_val_dice,
                r.wall_seconds,
                out.display()
            );
        }
        Command::Eval { ckpt, data, split, out } => {
            let (cfg, store, params) = trainer::load_checkpoint(&ckpt)?;
            let ds = load_data(&data)?;
            let (report, preds) = trainer::evaluate(&cfg, &params, &store, &ds, &split)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join(format!("eval_{split}.csv")), report.csv())?;
            fs::write(out.join(format!("eval_{split}.md")), report.markdown())?;
            write_pgms(&out.join("predictions"), &preds)?;
            println!("{}", report.markdown());
            println!(
                "mean Dice {:.4}, mean mIoU {:.4} over {} samples; files in {}",
                report.mean_dice,
                report.mean_miou,
                report.rows.len(),
                out.display()
            );
        }
        Command::Ablate { config, data, out } => {
            let cfg = read_config(&config)?;
            let ds = load_data(&data)?;
            let report = ablation::run_ablation(&cfg, &ds);
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.csv"), report.csv())?;
            fs::write(out.join("ablation.md"), report.markdown())?;
            println!("{}", report.markdown());
        }
        Command::Gradcheck { op, full } => {
            let entries = catalog::op_catalog();
            if let Some(name) = op {
                let entry = entries
                    .iter()
                    .find(|e| e.name == name)
                    .with_context(|| {
                        let names: Vec<&str> = entries.iter().map(|e| e.name).collect();
                        format!("unknown op {name:?}; available: {}", names.join(", "))
                    })?;
                run_entry(entry)?;
            } else if full {
                let mut failures = 0;
                for entry in &entries {
                    if !run_entry(entry)? {
                        failures += 1;
                    }
                }
                let report = catalog::full_model_check(12)?;
                let ok = report.max_rel_err < 1e-5;
                status_line("model+loss end-to-end", report.max_rel_err, 1e-5, ok);
                if !ok {
                    failures += 1;
                }
                if failures > 0 {
                    bail!("{failures} gradient checks failed");
                }
                println!("all {} checks passed", entries.len() + 1);
            } else {
                println!("available ops:");
                for entry in &entries {
                    println!("  {}", entry.name);
                }
                println!("run one with --op NAME, or everything with --full");
            }
        }
        Command::Summary { config } => {
            let cfg = read_config(&config)?;
            let summary = model::model_summary(&cfg.model_config())?;
            println!("{:<12} {:>10} {:>14}", "module", "params", "macs");
            for m in &summary.modules {
                println!("{:<12} {:>10} {:>14}", m.name, m.params, m.macs);
            }
            println!("{:<12} {:>10} {:>14}", "total", summary.total_params, summary.total_macs);
        }
    }
    Ok(())
}

fn status_line(name: &str, err: f64, tol: f64, ok: bool) {
    println!(
        "{:<24} max rel err {:>10.3e} (tolerance {:.0e}) {}",
        name,
        err,
        tol,
        if ok { "ok" } else { "FAILED" }
    );
}

fn run_entry(entry: &catalog::CatalogEntry) -> anyhow::Result<bool> {
    let report = (entry.run)()?;
    let ok = report.max_rel_err < entry.tolerance;
    status_line(entry.name, report.max_rel_err, entry.tolerance, ok);
    Ok(ok)
}
