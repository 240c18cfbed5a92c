//! Component ablation: trains one model per condition on identical data and
//! seed, scores the test split, and emits a comparison table.
//!
//! Conditions are derived from a normalized "complete" configuration (the
//! composite loss, prompts on, the full architecture) by changing exactly one
//! switch each, so any score difference is attributable to that switch. The
//! `reference_dice` column carries the full-scale system's scores for
//! orientation; desk-scale runs are not expected to reproduce them.

use crate::config::{ArchChoice, LossMode, TextMode, TrainConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::trainer::{self, Trained};

#[derive(Clone, Debug)]
pub struct AblationScore {
    pub dice: f64,
    pub miou: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

pub struct AblationRow {
    pub label: &'static str,
    pub cfg: TrainConfig,
    /// Full-scale reference Dice, in percent.
    pub reference_dice: f64,
    pub outcome: std::result::Result<AblationScore, String>,
}

pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// The seven conditions in table order: six single-switch changes, then the
/// complete model. Shared settings (rates, sizes, seed) come from `base`;
/// the three switches are normalized before the per-condition change.
pub fn conditions(base: &TrainConfig) -> Vec<(&'static str, TrainConfig, f64)> {
    let mut complete = base.clone();
    complete.loss = LossMode::Seu;
    complete.text = TextMode::On;
    complete.arch = ArchChoice::Full;

    let with = |f: fn(&mut TrainConfig)| {
        let mut c = complete.clone();
        f(&mut c);
        c
    };
    vec![
        ("Dice loss", with(|c| c.loss = LossMode::Dice), 93.44),
        ("BCE loss", with(|c| c.loss = LossMode::Bce), 92.03),
        (
            "Inference w/o Text Prompts",
            with(|c| c.text = TextMode::OffInference),
            87.28,
        ),
        (
            "Training w/o MoDAB",
            with(|c| c.text = TextMode::OffTraining),
            85.15,
        ),
        (
            "SSMix with Linear layer",
            with(|c| c.arch = ArchChoice::SsmixLinear),
            91.72,
        ),
        (
            "Cross-Attention with Addition",
            with(|c| c.arch = ArchChoice::CrossattnAdd),
            92.11,
        ),
        ("Complete Model", complete, 93.86),
    ]
}

/// Keys whose values differ between two configs, in file order.
pub fn config_delta(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    a.to_text()
        .lines()
        .zip(b.to_text().lines())
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.split('=').next().unwrap().trim().to_string())
        .collect()
}

fn run_condition(cfg: &TrainConfig, ds: &Dataset) -> Result<(Trained, AblationScore)> {
    let trained = trainer::train(cfg, ds)?;
    let (ev, _) = trainer::evaluate(cfg, &trained.params, &trained.store, ds, "test")?;
    let score = AblationScore {
        dice: ev.mean_dice,
        miou: ev.mean_miou,
        best_epoch: trained.report.best_epoch,
        epochs_run: trained.report.epochs.len(),
    };
    Ok((trained, score))
}

/// Trains and scores every condition. Per-row failures are recorded in the
/// table instead of aborting the sweep.
pub fn run_ablation(base: &TrainConfig, ds: &Dataset) -> AblationReport {
    let rows = conditions(base)
        .into_iter()
        .map(|(label, cfg, reference)| {
            let outcome = run_condition(&cfg, ds)
                .map(|(_, score)| score)
                .map_err(|e| e.to_string());
            AblationRow { label, cfg, reference_dice: reference, outcome }
        })
        .collect();
    AblationReport { rows }
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("condition,dice,miou,best_epoch,epochs_run,reference_dice\n");
        for r in &self.rows {
            match &r.outcome {
                Ok(s) => out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.label, s.dice, s.miou, s.best_epoch, s.epochs_run, r.reference_dice
                )),
                Err(e) => out.push_str(&format!(
                    "{},failed,failed,,,{} # {}\n",
                    r.label,
                    r.reference_dice,
                    e.replace('\n', " ")
                )),
            }
        }
        out
    }

    pub fn markdown(&self) -> String {
        let mut out = String::from(
            "| condition | Dice | mIoU | full-scale reference Dice (%) |\n",
        );
        out.push_str("|-----------|-----:|-----:|------------------------------:|\n");
        for r in &self.rows {
            match &r.outcome {
                Ok(s) => out.push_str(&format!(
                    "| {} | {:.4} | {:.4} | {:.2} |\n",
                    r.label, s.dice, s.miou, r.reference_dice
                )),
                Err(e) => out.push_str(&format!(
                    "| {} | failed: {} | | {:.2} |\n",
                    r.label,
                    e.replace('\n', " "),
                    r.reference_dice
                )),
            }
        }
        out.push_str(
            "\nReference scores describe the full-scale system and are listed for \
             orientation only.\n",
        );
        out
    }
}
