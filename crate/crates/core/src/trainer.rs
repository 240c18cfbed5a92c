//! Training loop, evaluation, and checkpoint files.
//!
//! A run is fully determined by (config, dataset): parameter init, the
//! per-epoch shuffle, and every reduction use fixed seeds and fixed order,
//! so two runs with the same inputs produce bitwise-identical loss traces
//! and checkpoints. Wall time is reported but kept out of the CSV trace.
//!
//! Checkpoints are single tensor container files. The config rides along as
//! a `meta.config` entry holding the config text one byte per element, so a
//! checkpoint can be evaluated without the original config file. The frozen
//! text table is not stored; it is rebuilt from the seed on load.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::{LossMode, TextMode, TrainConfig};
use crate::data::{self, Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{self, LossWeights};
use crate::metrics;
use crate::model::{model_forward, ModelParams};
use crate::optim::{adamw_step, cosine_lr, AdamHyper, AdamState, EarlyStop};
use crate::params::{Binder, ParamRef, ParamStore};
use crate::rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::tensor_io;

/// One line of the training trace. `epoch` is 1-based. The three component
/// terms are filled for the composite loss and zero for the single-term
/// modes; `total` is always the optimized quantity, averaged over the
/// epoch's training samples.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub dice_term: f64,
    pub spectral_term: f64,
    pub entropy_term: f64,
    pub total: f64,
    pub val_dice: f64,
    pub val_miou: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters the run keeps.
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn csv(&self) -> String {
        let mut out =
            String::from("epoch,lr,dice,spectral,entropy,total,val_dice,val_miou,improved\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.lr,
                r.dice_term,
                r.spectral_term,
                r.entropy_term,
                r.total,
                r.val_dice,
                r.val_miou,
                r.improved
            ));
        }
        out
    }

    pub fn markdown(&self) -> String {
        let mut out = String::from("| epoch | lr | total | val Dice | val mIoU |\n");
        out.push_str("|------:|-----:|------:|---------:|---------:|\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "| {} | {:.2e} | {:.6} | {:.4} | {:.4} |\n",
                r.epoch, r.lr, r.total, r.val_dice, r.val_miou
            ));
        }
        out.push_str(&format!(
            "\nbest epoch {}, val Dice {:.4}, {} after {} epochs ({:.1}s)\n",
            self.best_epoch,
            self.best_val_dice,
            if self.stopped_early { "stopped early" } else { "ran the full schedule" },
            self.epochs.len(),
            self.wall_seconds
        ));
        out
    }
}

/// A finished run: the config it used, the parameter store holding the best
/// epoch's values, the (frozen-table) model handles, and the trace.
pub struct Trained {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub params: ModelParams,
    pub report: RunReport,
}

fn batch_tensors(samples: &[Sample], idxs: &[usize]) -> (Tensor, Vec<Vec<usize>>, Tensor) {
    let b = idxs.len();
    let ishape = samples[idxs[0]].image.shape();
    let mshape = samples[idxs[0]].mask.shape();
    let mut img = Vec::with_capacity(b * samples[idxs[0]].image.numel());
    let mut msk = Vec::with_capacity(b * samples[idxs[0]].mask.numel());
    let mut toks = Vec::with_capacity(b);
    for &i in idxs {
        img.extend_from_slice(samples[i].image.data());
        msk.extend_from_slice(samples[i].mask.data());
        toks.push(samples[i].token_ids.clone());
    }
    let img = Tensor::new(vec![b, ishape[0], ishape[1], ishape[2]], img).unwrap();
    let msk = Tensor::new(vec![b, mshape[0], mshape[1], mshape[2]], msk).unwrap();
    (img, toks, msk)
}

/// Token ids a model sees at evaluation time: padding-only sequences when
/// prompts are withheld at inference, the real ids otherwise.
pub(crate) fn eval_tokens(mode: TextMode, toks: &[Vec<usize>]) -> Vec<Vec<usize>> {
    match mode {
        TextMode::OffInference => toks.iter().map(|t| vec![0; t.len()]).collect(),
        TextMode::On | TextMode::OffTraining => toks.to_vec(),
    }
}

/// `(terms, total)` for the selected loss on one batch; `terms` are the
/// dice/spectral/entropy values, zero where a mode has no such component.
fn batch_loss(
    tape: &mut Tape,
    mode: LossMode,
    y: Var,
    g: &Tensor,
    w: &LossWeights,
) -> Result<([f64; 3], Var)> {
    match mode {
        LossMode::Seu => {
            let b = loss::seu_loss(tape, y, g, w)?;
            let terms = [
                tape.value(b.dice).data()[0],
                tape.value(b.spectral).data()[0],
                tape.value(b.entropy).data()[0],
            ];
            Ok((terms, b.total))
        }
        LossMode::Dice => {
            let d = loss::dice_loss(tape, y, g, w.eps)?;
            Ok(([tape.value(d).data()[0], 0.0, 0.0], d))
        }
        LossMode::Bce => {
            let l = loss::bce_loss(tape, y, g, w.delta)?;
            Ok(([0.0, 0.0, 0.0], l))
        }
    }
}

/// Gradients in store order. A parameter the graph never touched gets a
/// zero tensor; a parameter bound twice gets the sum.
fn collect_grads(
    store: &ParamStore,
    pairs: &[(ParamRef, Var)],
    grads: &mut Gradients,
) -> Vec<Tensor> {
    let mut acc: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
    for &(r, v) in pairs {
        if let Some(g) = grads.take(v) {
            match &mut acc[r.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
    }
    store
        .refs()
        .map(|r| acc[r.0].take().unwrap_or_else(|| Tensor::zeros(store.get(r).shape())))
        .collect()
}

/// Argmax over the class axis of `[B, C, H, W]` probabilities, reported as
/// one binary `[H, W]` map per sample (1.0 where class 1 wins, ties to the
/// lower class index).
fn argmax_masks(y: &Tensor) -> Vec<Tensor> {
    let s = y.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let data = y.data();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let base = bi * c * plane;
        let mut m = vec![0.0; plane];
        for (p, slot) in m.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_v = data[base + p];
            for ci in 1..c {
                let v = data[base + ci * plane + p];
                if v > best_v {
                    best = ci;
                    best_v = v;
                }
            }
            if best == 1 {
                *slot = 1.0;
            }
        }
        out.push(Tensor::new(vec![h, w], m).unwrap());
    }
    out
}

fn foreground_of(sample: &Sample) -> Tensor {
    let s = sample.mask.shape();
    let plane = s[1] * s[2];
    Tensor::new(vec![s[1], s[2]], sample.mask.data()[plane..2 * plane].to_vec()).unwrap()
}

/// Binary prediction maps for a slice of samples, batched like training.
/// `pad_text` withholds the prompts (padding-only token sequences).
pub fn predict_masks(
    cfg: &TrainConfig,
    params: &ModelParams,
    store: &ParamStore,
    samples: &[Sample],
    pad_text: bool,
) -> Result<Vec<Tensor>> {
    let idxs: Vec<usize> = (0..samples.len()).collect();
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in idxs.chunks(cfg.batch_size) {
        let (img, toks, _) = batch_tensors(samples, chunk);
        let toks = if pad_text {
            eval_tokens(TextMode::OffInference, &toks)
        } else {
            toks
        };
        let mut tape = Tape::new();
        let (mvars, _) = {
            let mut b = Binder::new(&mut tape, store);
            let mv = params.bind(&mut b);
            (mv, b.pairs)
        };
        let x = tape.constant(img);
        let y = model_forward(&mut tape, x, &toks, params, &mvars)?;
        preds.extend(argmax_masks(tape.value(y)));
    }
    Ok(preds)
}

fn mean_scores(samples: &[Sample], preds: &[Tensor]) -> Result<(f64, f64)> {
    let mut dice = 0.0;
    let mut miou = 0.0;
    for (s, p) in samples.iter().zip(preds) {
        let gt = foreground_of(s);
        dice += metrics::dice_score(p, &gt)?;
        miou += metrics::miou(p, &gt)?;
    }
    let n = samples.len() as f64;
    Ok((dice / n, miou / n))
}

pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<Trained> {
    cfg.validate()?;
    if ds.manifest.h != cfg.model.input_size {
        return Err(Error::Config(format!(
            "dataset canvas {} does not match model input size {}",
            ds.manifest.h, cfg.model.input_size
        )));
    }
    let train_set = ds.train();
    let val_set = ds.val();
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }

    let mut store = ParamStore::new();
    let params = ModelParams::init(&mut store, cfg.model_config(), data::vocab_len(), cfg.seed)?;
    let hyper = AdamHyper { weight_decay: cfg.weight_decay, ..AdamHyper::default() };
    let mut adam = AdamState::new(&store);
    let mut stopper = EarlyStop::new(cfg.patience, cfg.min_epochs);
    let weights = LossWeights::default();

    let started = Instant::now();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best_params: Vec<Tensor> = store.refs().map(|r| store.get(r).clone()).collect();
    let mut best_epoch = 0usize;
    let mut best_dice = f64::NEG_INFINITY;
    let mut stopped_early = false;
    let n_train = train_set.len();

    for epoch in 1..=cfg.max_epochs {
        let lr = cosine_lr(epoch - 1, cfg.lr0, cfg.lr_min, cfg.t_max);
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng::derived(cfg.seed, 0xe90c ^ epoch as u64));

        let mut sums = [0.0f64; 4];
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (img, toks, msk) = batch_tensors(train_set, chunk);
            let mut tape = Tape::new();
            let (mvars, pairs) = {
                let mut b = Binder::new(&mut tape, &store);
                let mv = params.bind(&mut b);
                (mv, b.pairs)
            };
            let x = tape.constant(img);
            let y = model_forward(&mut tape, x, &toks, &params, &mvars)?;
            let (terms, total) = batch_loss(&mut tape, cfg.loss, y, &msk, &weights)?;
            let total_v = tape.value(total).data()[0];
            if total_v.is_nan() {
                return Err(Error::Numeric(format!("NaN loss at epoch {epoch} batch {bi}")));
            }
            let w = chunk.len() as f64;
            sums[0] += terms[0] * w;
            sums[1] += terms[1] * w;
            sums[2] += terms[2] * w;
            sums[3] += total_v * w;

            let mut grads = tape.backward(total)?;
            let gvec = collect_grads(&store, &pairs, &mut grads);
            adamw_step(&mut store, &gvec, &mut adam, lr, &hyper)?;
        }

        let preds = predict_masks(cfg, &params, &store, val_set, false)?;
        let (val_dice, val_miou) = mean_scores(val_set, &preds)?;
        let decision = stopper.observe(val_dice);
        if decision.improved {
            best_params = store.refs().map(|r| store.get(r).clone()).collect();
            best_epoch = epoch;
            best_dice = val_dice;
        }
        let n = n_train as f64;
        epochs.push(EpochRecord {
            epoch,
            lr,
            dice_term: sums[0] / n,
            spectral_term: sums[1] / n,
            entropy_term: sums[2] / n,
            total: sums[3] / n,
            val_dice,
            val_miou,
            improved: decision.improved,
        });
        if decision.stop {
            stopped_early = true;
            break;
        }
    }

    let refs: Vec<ParamRef> = store.refs().collect();
    for (r, t) in refs.into_iter().zip(best_params) {
        *store.get_mut(r) = t;
    }

    Ok(Trained {
        cfg: cfg.clone(),
        store,
        params,
        report: RunReport {
            epochs,
            best_epoch,
            best_val_dice: best_dice,
            stopped_early,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    })
}

const META_CONFIG: &str = "meta.config";

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, store: &ParamStore) -> Result<()> {
    let text = cfg.to_text();
    let meta: Vec<f64> = text.bytes().map(|b| b as f64).collect();
    let mut entries = vec![(META_CONFIG.to_string(), Tensor::new(vec![meta.len()], meta)?)];
    for (name, t) in store.iter() {
        entries.push((name.to_string(), t.clone()));
    }
    tensor_io::save(path, &entries)
}

/// Rebuilds the full training state from a checkpoint file: the config from
/// the `meta.config` entry, a freshly initialized store overwritten with the
/// saved tensors, and the frozen text table from the config seed.
pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, ParamStore, ModelParams)> {
    let entries = tensor_io::load(path)?;
    let mut meta = None;
    let mut rest = Vec::with_capacity(entries.len().saturating_sub(1));
    for e in entries {
        if e.0 == META_CONFIG {
            meta = Some(e.1);
        } else {
            rest.push(e);
        }
    }
    let meta = meta.ok_or_else(|| {
        Error::Data(format!("checkpoint has no {META_CONFIG} entry"))
    })?;
    let mut bytes = Vec::with_capacity(meta.numel());
    for &v in meta.data() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Data(format!("checkpoint config byte {v} out of range")));
        }
        bytes.push(v as u8);
    }
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::Data(format!("checkpoint config is not UTF-8: {e}")))?;
    let cfg = TrainConfig::parse(&text)?;

    let mut store = ParamStore::new();
    let params = ModelParams::init(&mut store, cfg.model_config(), data::vocab_len(), cfg.seed)?;
    if rest.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} parameter tensors, model expects {}",
            rest.len(),
            store.len()
        )));
    }
    store.load_named(&rest)?;
    Ok((cfg, store, params))
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub index: usize,
    pub dice: f64,
    pub miou: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub split: String,
    pub rows: Vec<EvalRow>,
    pub mean_dice: f64,
    pub mean_miou: f64,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("index,dice,miou\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.index, r.dice, r.miou));
        }
        out.push_str(&format!("mean,{},{}\n", self.mean_dice, self.mean_miou));
        out
    }

    pub fn markdown(&self) -> String {
        let mut out = format!("split {}: {} samples\n\n", self.split, self.rows.len());
        out.push_str("| sample | Dice | mIoU |\n|-------:|-----:|-----:|\n");
        for r in &self.rows {
            out.push_str(&format!("| {} | {:.4} | {:.4} |\n", r.index, r.dice, r.miou));
        }
        out.push_str(&format!("| mean | {:.4} | {:.4} |\n", self.mean_dice, self.mean_miou));
        out
    }
}

/// Scores a split with the given parameters and returns the per-sample
/// table together with the binary prediction maps in split order. Prompt
/// withholding at inference honors the config's text mode.
pub fn evaluate(
    cfg: &TrainConfig,
    params: &ModelParams,
    store: &ParamStore,
    ds: &Dataset,
    split: &str,
) -> Result<(EvalReport, Vec<Tensor>)> {
    let samples = ds.split(split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split {split:?} is empty")));
    }
    if ds.manifest.h != params.cfg.input_size {
        return Err(Error::Config(format!(
            "dataset canvas {} does not match model input size {}",
            ds.manifest.h, params.cfg.input_size
        )));
    }
    let pad = cfg.text == TextMode::OffInference;
    let preds = predict_masks(cfg, params, store, samples, pad)?;
    let mut rows = Vec::with_capacity(samples.len());
    let mut dice_sum = 0.0;
    let mut miou_sum = 0.0;
    for (i, (s, p)) in samples.iter().zip(&preds).enumerate() {
        let gt = foreground_of(s);
        let dice = metrics::dice_score(p, &gt)?;
        let miou = metrics::miou(p, &gt)?;
        dice_sum += dice;
        miou_sum += miou;
        rows.push(EvalRow { index: i, dice, miou });
    }
    let n = samples.len() as f64;
    let report = EvalReport {
        split: split.to_string(),
        rows,
        mean_dice: dice_sum / n,
        mean_miou: miou_sum / n,
    };
    Ok((report, preds))
}
