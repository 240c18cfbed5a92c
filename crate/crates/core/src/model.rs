//! Model assembly: a small four-stage convolutional encoder, a frozen
//! random text embedding, the fusion block, and a skip-connected decoder
//! that returns to full resolution through subpixel upsampling.
//!
//! The encoder is a stand-in for a pretrained backbone at desk scale:
//! four strided conv blocks halving the spatial extent (the first divides
//! by four), each followed by a channel-wise layer norm and GELU. The
//! text encoder is a frozen unit-row embedding table; padding id 0 maps
//! to the zero vector.
//!
//! Decoder: three rounds of transposed-conv upsampling, skip
//! concatenation, and two conv+norm+LeakyReLU refinements; then a
//! channel-raising conv, pixel shuffle back to full resolution, a
//! shape-preserving average pool, a 1x1 conv, and a channel softmax.

use crate::error::{Error, Result};
use crate::modab::{modab_forward, ModabConfig, ModabParams, ModabVars};
use crate::params::{Binder, ParamRef, ParamStore};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchMode {
    Full,
    /// State-space mixer swapped for a single linear map (ablation).
    LinearMixer,
    /// Cross-attention swapped for pooled-text addition (ablation).
    AdditiveFusion,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input height = width; power of two, at least 32.
    pub input_size: usize,
    /// Channels after encoder stages 1..4.
    pub channels: [usize; 4],
    /// Text embedding width.
    pub d_text: usize,
    /// Token slots per caption.
    pub n_tokens: usize,
    pub heads: usize,
    /// Subpixel upsampling factor; must carry the quarter-resolution
    /// decoder output back to the full extent, so 4 with this geometry.
    pub shuffle_r: usize,
    /// Average-pool kernel (odd, shape-preserving).
    pub pool_o: usize,
    /// Output classes.
    pub classes: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    /// Fuse text at every stage instead of only the deepest.
    pub modab_all_stages: bool,
    /// Batch norm instead of layer norm inside decoder refinements.
    pub use_batch_norm: bool,
    pub arch: ArchMode,
    /// False trains a pure visual model: the fusion block is not built.
    pub fuse_text: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            channels: [8, 16, 32, 64],
            d_text: 32,
            n_tokens: 12,
            heads: 4,
            shuffle_r: 4,
            pool_o: 3,
            classes: 2,
            d_state: 8,
            d_conv: 3,
            expand: 2,
            modab_all_stages: false,
            use_batch_norm: false,
            arch: ArchMode::Full,
            fuse_text: true,
        }
    }
}

impl ModelConfig {
    /// Spatial side length after stage `i` (1-based): H/4, H/8, H/16, H/32.
    pub fn stage_side(&self, stage: usize) -> usize {
        self.input_size >> (stage + 1)
    }

    pub fn y_feat(&self, stage: usize) -> usize {
        let s = self.stage_side(stage);
        s * s
    }

    /// Stages that get a fusion block.
    pub fn fused_stages(&self) -> Vec<usize> {
        if !self.fuse_text {
            Vec::new()
        } else if self.modab_all_stages {
            vec![1, 2, 3, 4]
        } else {
            vec![4]
        }
    }

    pub fn modab_cfg(&self, stage: usize) -> ModabConfig {
        ModabConfig {
            y_feat: self.y_feat(stage),
            d_text: self.d_text,
            heads: self.heads,
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
            linear_mixer: self.arch == ArchMode::LinearMixer,
            additive_fusion: self.arch == ArchMode::AdditiveFusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 32 || !self.input_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "input extent must be a power of two >= 32, got {}",
                self.input_size
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 output classes, got {}",
                self.classes
            )));
        }
        if self.pool_o % 2 == 0 {
            return Err(Error::Config(format!(
                "pool kernel must be odd, got {}",
                self.pool_o
            )));
        }
        let quarter = self.input_size / 4;
        if self.shuffle_r * quarter != self.input_size {
            return Err(Error::Config(format!(
                "shuffle factor {} takes the {quarter}-wide decoder output to {}, not back to {}",
                self.shuffle_r,
                self.shuffle_r * quarter,
                self.input_size
            )));
        }
        for stage in self.fused_stages() {
            let y = self.y_feat(stage);
            if self.heads == 0 || y % self.heads != 0 {
                return Err(Error::Config(format!(
                    "heads ({}) must divide the stage-{stage} feature width ({y})",
                    self.heads
                )));
            }
        }
        if self.n_tokens == 0 || self.d_text == 0 {
            return Err(Error::Config("text widths must be positive".into()));
        }
        Ok(())
    }
}

pub struct ConvBlock {
    pub w: ParamRef,
    pub b: ParamRef,
    pub gamma: ParamRef,
    pub beta: ParamRef,
}

pub struct ConvBlockVars {
    pub w: Var,
    pub b: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl ConvBlock {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        r: &mut rand_chacha::ChaCha8Rng,
    ) -> ConvBlock {
        let fan_in = c_in * k * k;
        ConvBlock {
            w: store.add(
                format!("{prefix}.w"),
                Tensor::randn(r, &[c_out, c_in, k, k], 1.0 / (fan_in as f64).sqrt()),
            ),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[c_out])),
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[c_out], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[c_out])),
        }
    }

    fn bind(&self, b: &mut Binder) -> ConvBlockVars {
        ConvBlockVars {
            w: b.bind(self.w),
            b: b.bind(self.b),
            gamma: b.bind(self.gamma),
            beta: b.bind(self.beta),
        }
    }
}

pub struct DecoderStage {
    pub up_w: ParamRef,
    pub refine1: ConvBlock,
    pub refine2: ConvBlock,
}

pub struct DecoderStageVars {
    pub up_w: Var,
    pub refine1: ConvBlockVars,
    pub refine2: ConvBlockVars,
}

pub struct ModelParams {
    pub encoder: Vec<ConvBlock>,
    /// Frozen `[vocab, d_text]` table; not a learnable parameter.
    pub text_table: Tensor,
    pub modab: Vec<ModabParams>,
    pub decoder: Vec<DecoderStage>,
    pub sun_w: ParamRef,
    pub sun_b: ParamRef,
    pub out_w: ParamRef,
    pub out_b: ParamRef,
    pub cfg: ModelConfig,
}

pub struct ModelVars {
    pub encoder: Vec<ConvBlockVars>,
    pub modab: Vec<ModabVars>,
    pub decoder: Vec<DecoderStageVars>,
    pub sun_w: Var,
    pub sun_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Frozen text embedding: seeded Gaussian rows scaled to unit norm, row 0
/// (padding) forced to zero.
pub fn frozen_text_table(vocab: usize, d_text: usize, seed: u64) -> Tensor {
    let mut r = rng::derived(seed, 0x7e27);
    let mut table = Tensor::randn(&mut r, &[vocab, d_text], 1.0);
    for row in 0..vocab {
        let s = &mut table.data_mut()[row * d_text..(row + 1) * d_text];
        if row == 0 {
            s.fill(0.0);
            continue;
        }
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in s.iter_mut() {
            *v /= norm;
        }
    }
    table
}

impl ModelParams {
    pub fn init(
        store: &mut ParamStore,
        cfg: ModelConfig,
        vocab: usize,
        seed: u64,
    ) -> Result<ModelParams> {
        cfg.validate()?;
        let mut r = rng::derived(seed, 0x30de1);
        let [c1, c2, c3, c4] = cfg.channels;

        let mut encoder = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in [c1, c2, c3, c4].iter().enumerate() {
            encoder.push(ConvBlock::init(
                store,
                &format!("enc{}", i + 1),
                c_in,
                c_out,
                4,
                &mut r,
            ));
            c_in = c_out;
        }

        let text_table = frozen_text_table(vocab, cfg.d_text, seed);

        let mut modab = Vec::new();
        for stage in cfg.fused_stages() {
            modab.push(ModabParams::init(
                store,
                &format!("fuse{stage}"),
                cfg.modab_cfg(stage),
                seed ^ (stage as u64) << 8,
            )?);
        }

        // Decoder stage m: C_{5-m} up to C_{4-m} wide maps, skip doubles
        // the channels, refinements bring them back down.
        let mut decoder = Vec::new();
        for m in 1..=3usize {
            let from = cfg.channels[4 - m];
            let to = cfg.channels[3 - m];
            let up_w = store.add(
                format!("dec{m}.up"),
                Tensor::randn(&mut r, &[from, to, 2, 2], 1.0 / ((from * 4) as f64).sqrt()),
            );
            let refine1 = ConvBlock::init(store, &format!("dec{m}.r1"), 2 * to, to, 3, &mut r);
            let refine2 = ConvBlock::init(store, &format!("dec{m}.r2"), to, to, 3, &mut r);
            decoder.push(DecoderStage { up_w, refine1, refine2 });
        }

        let r2 = cfg.shuffle_r * cfg.shuffle_r;
        let sun_c = cfg.classes * r2;
        let sun_w = store.add(
            "sun.w".to_string(),
            Tensor::randn(&mut r, &[sun_c, c1, 3, 3], 1.0 / ((c1 * 9) as f64).sqrt()),
        );
        let sun_b = store.add("sun.b".to_string(), Tensor::zeros(&[sun_c]));
        // Zero head: the first forward pass scores every class equally, so
        // the loss gradient is informative from the start instead of having
        // to unlearn random confident logits.
        let out_w = store.add(
            "head.w".to_string(),
            Tensor::zeros(&[cfg.classes, cfg.classes, 1, 1]),
        );
        let out_b = store.add("head.b".to_string(), Tensor::zeros(&[cfg.classes]));

        Ok(ModelParams {
            encoder,
            text_table,
            modab,
            decoder,
            sun_w,
            sun_b,
            out_w,
            out_b,
            cfg,
        })
    }

    pub fn bind(&self, b: &mut Binder) -> ModelVars {
        ModelVars {
            encoder: self.encoder.iter().map(|e| e.bind(b)).collect(),
            modab: self.modab.iter().map(|m| m.bind(b)).collect(),
            decoder: self
                .decoder
                .iter()
                .map(|d| DecoderStageVars {
                    up_w: b.bind(d.up_w),
                    refine1: d.refine1.bind(b),
                    refine2: d.refine2.bind(b),
                })
                .collect(),
            sun_w: b.bind(self.sun_w),
            sun_b: b.bind(self.sun_b),
            out_w: b.bind(self.out_w),
            out_b: b.bind(self.out_b),
        }
    }
}

pub struct ModuleSummary {
    pub name: String,
    pub params: usize,
    /// Multiply-accumulate estimate for one input, counting convolutions,
    /// matrix multiplies, attention score/value products and the scan
    /// recurrence; normalizations and elementwise ops are omitted.
    pub macs: u64,
}

pub struct ModelSummary {
    pub modules: Vec<ModuleSummary>,
    pub total_params: usize,
    pub total_macs: u64,
}

pub fn conv2d_param_count(c_in: usize, c_out: usize, k: usize, bias: bool) -> usize {
    c_out * c_in * k * k + if bias { c_out } else { 0 }
}

pub fn conv2d_mac_count(c_in: usize, c_out: usize, k: usize, out_h: usize, out_w: usize) -> u64 {
    (c_out * out_h * out_w * c_in * k * k) as u64
}

pub fn matmul_mac_count(m: usize, k: usize, n: usize) -> u64 {
    (m * k * n) as u64
}

fn norm_param_count(c: usize) -> usize {
    2 * c
}

fn ssmix_param_count(d: usize, d_out: usize, s: usize, k: usize, expand: usize) -> usize {
    let di = expand * d;
    d * 2 * di            // input projection
        + 2 * di * k      // the two depthwise kernels
        + di * (di + 2 * s) // per-timestep delta/B/C projection
        + di              // delta bias
        + di * s          // decay exponents
        + di              // skip scale
        + 2 * di * d_out  // output projection
}

fn ssmix_mac_count(d: usize, d_out: usize, s: usize, k: usize, expand: usize, t: usize) -> u64 {
    let di = expand * d;
    matmul_mac_count(t, d, 2 * di)
        + (2 * di * t * k) as u64
        + matmul_mac_count(t, di, di + 2 * s)
        + (di * s * t * 4) as u64 // recurrence: decay, drive, and state update
        + (di * s * t) as u64     // readout contraction
        + (di * t) as u64         // skip path
        + matmul_mac_count(t, 2 * di, d_out)
}

fn fusion_module_summary(cfg: &ModelConfig, stage: usize) -> ModuleSummary {
    let y = cfg.y_feat(stage);
    let c = cfg.channels[stage - 1];
    let n = cfg.n_tokens;
    let additive = cfg.arch == ArchMode::AdditiveFusion;

    let mixer_params = if cfg.arch == ArchMode::LinearMixer {
        y * y
    } else {
        ssmix_param_count(y, y, cfg.d_state, cfg.d_conv, cfg.expand)
    };
    let attn_params = 4 * y * y;
    let mut params = cfg.d_text * y      // text projection
        + mixer_params
        + attn_params                     // self attention
        + 3 * norm_param_count(y)         // input, post-attention, output norms
        + 1; // gate
    if !additive {
        params += attn_params + norm_param_count(y); // cross attention, query norm
    }

    let mixer_macs = if cfg.arch == ArchMode::LinearMixer {
        matmul_mac_count(n, y, y)
    } else {
        ssmix_mac_count(y, y, cfg.d_state, cfg.d_conv, cfg.expand, n)
    };
    let self_attn_macs = 4 * matmul_mac_count(c, y, y) + 2 * (c * c * y) as u64;
    let mut macs = matmul_mac_count(n, cfg.d_text, y) + mixer_macs + self_attn_macs;
    if !additive {
        macs += 2 * matmul_mac_count(c, y, y)
            + 2 * matmul_mac_count(n, y, y)
            + 2 * (c * n * y) as u64;
    }
    ModuleSummary { name: format!("fuse{stage}"), params, macs }
}

/// Exact parameter count and analytic multiply-accumulate estimate,
/// broken down by module. The counts are computed from the configuration
/// alone, independently of any instantiated parameter store.
pub fn model_summary(cfg: &ModelConfig) -> Result<ModelSummary> {
    cfg.validate()?;
    let mut modules = Vec::new();

    let mut c_in = 3;
    for (i, &c_out) in cfg.channels.iter().enumerate() {
        let side = cfg.stage_side(i + 1);
        modules.push(ModuleSummary {
            name: format!("enc{}", i + 1),
            params: conv2d_param_count(c_in, c_out, 4, true) + norm_param_count(c_out),
            macs: conv2d_mac_count(c_in, c_out, 4, side, side),
        });
        c_in = c_out;
    }

    for stage in cfg.fused_stages() {
        modules.push(fusion_module_summary(cfg, stage));
    }

    for m in 1..=3usize {
        let from = cfg.channels[4 - m];
        let to = cfg.channels[3 - m];
        let s_in = cfg.stage_side(5 - m);
        let s_out = cfg.stage_side(4 - m);
        modules.push(ModuleSummary {
            name: format!("dec{m}"),
            params: from * to * 4
                + conv2d_param_count(2 * to, to, 3, true)
                + norm_param_count(to)
                + conv2d_param_count(to, to, 3, true)
                + norm_param_count(to),
            macs: (from * to * 4 * s_in * s_in) as u64
                + conv2d_mac_count(2 * to, to, 3, s_out, s_out)
                + conv2d_mac_count(to, to, 3, s_out, s_out),
        });
    }

    let quarter = cfg.input_size / 4;
    let sun_c = cfg.classes * cfg.shuffle_r * cfg.shuffle_r;
    modules.push(ModuleSummary {
        name: "sun".to_string(),
        params: conv2d_param_count(cfg.channels[0], sun_c, 3, true),
        macs: conv2d_mac_count(cfg.channels[0], sun_c, 3, quarter, quarter),
    });
    modules.push(ModuleSummary {
        name: "head".to_string(),
        params: conv2d_param_count(cfg.classes, cfg.classes, 1, true),
        macs: conv2d_mac_count(cfg.classes, cfg.classes, 1, cfg.input_size, cfg.input_size),
    });

    let total_params = modules.iter().map(|m| m.params).sum();
    let total_macs = modules.iter().map(|m| m.macs).sum();
    Ok(ModelSummary { modules, total_params, total_macs })
}

/// Layer norm across the channel axis of a `[B, C, H, W]` map, applied
/// independently at every spatial position.
fn channel_layer_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let moved = tape.permute(x, &[0, 2, 3, 1])?;
    let normed = tape.layer_norm(moved, gamma, beta, LN_EPS)?;
    tape.permute(normed, &[0, 3, 1, 2])
}

/// Four conv stages; returns the per-stage feature maps.
pub fn encode_image_stub(
    tape: &mut Tape,
    img: Var,
    vars: &ModelVars,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    let shape = tape.shape(img).to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.input_size || shape[3] != cfg.input_size
    {
        return Err(Error::shape(
            "encode_image_stub",
            format!(
                "image {shape:?}, expected [_, 3, {}, {}]",
                cfg.input_size, cfg.input_size
            ),
        ));
    }
    let mut stages = Vec::with_capacity(4);
    let mut x = img;
    for (i, block) in vars.encoder.iter().enumerate() {
        let (stride, pad) = if i == 0 { (4, 0) } else { (2, 1) };
        let conv = tape.conv2d(x, block.w, Some(block.b), stride, pad)?;
        let normed = channel_layer_norm(tape, conv, block.gamma, block.beta)?;
        x = tape.gelu(normed);
        stages.push(x);
    }
    Ok(stages)
}

/// Look up token ids in the frozen table. The result is a constant:
/// nothing trains through it.
pub fn encode_text_stub(
    tape: &mut Tape,
    token_ids: &[Vec<usize>],
    table: &Tensor,
) -> Result<Var> {
    let b = token_ids.len();
    let n = token_ids.first().map(|t| t.len()).unwrap_or(0);
    let (vocab, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(b * n * d);
    for (bi, ids) in token_ids.iter().enumerate() {
        if ids.len() != n {
            return Err(Error::Data(format!(
                "ragged token batch: entry {bi} has {} ids, entry 0 has {n}",
                ids.len()
            )));
        }
        for (pos, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Data(format!(
                    "token id {id} at batch {bi} position {pos} exceeds vocabulary size {vocab}"
                )));
            }
            data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
    }
    Ok(tape.constant(Tensor::new(vec![b, n, d], data)?))
}

fn refine(tape: &mut Tape, x: Var, block: &ConvBlockVars, use_bn: bool) -> Result<Var> {
    let conv = tape.conv2d(x, block.w, Some(block.b), 1, 1)?;
    let normed = if use_bn {
        tape.batch_norm2d(conv, block.gamma, block.beta, BN_EPS)?
    } else {
        channel_layer_norm(tape, conv, block.gamma, block.beta)?
    };
    Ok(tape.leaky_relu(normed, 0.01))
}

/// Per-channel logit bound applied ahead of the class softmax.
pub const LOGIT_CAP: f64 = 3.0;

/// Decoder from the fused deepest stage back to a full-resolution class
/// distribution. `skips` are the four encoder stages (only 1..3 are read).
pub fn decoder_forward(
    tape: &mut Tape,
    fused: Var,
    skips: &[Var],
    vars: &ModelVars,
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut x = fused;
    for (m, stage) in vars.decoder.iter().enumerate() {
        let up = tape.conv_transpose2d(x, stage.up_w, 2)?;
        let skip = skips[2 - m];
        let ss = tape.shape(skip).to_vec();
        let us = tape.shape(up).to_vec();
        if ss[2] != us[2] || ss[3] != us[3] {
            return Err(Error::shape(
                "decoder_forward",
                format!("skip {ss:?} does not match upsampled {us:?}"),
            ));
        }
        let cat = tape.concat(&[up, skip], 1)?;
        let r1 = refine(tape, cat, &stage.refine1, cfg.use_batch_norm)?;
        x = refine(tape, r1, &stage.refine2, cfg.use_batch_norm)?;
    }
    let raised = tape.conv2d(x, vars.sun_w, Some(vars.sun_b), 1, 1)?;
    let shuffled = tape.pixel_shuffle(raised, cfg.shuffle_r)?;
    let pooled = tape.avg_pool2d_padded(shuffled, cfg.pool_o)?;
    let raw = tape.conv2d(pooled, vars.out_w, Some(vars.out_b), 1, 0)?;
    // Squash logits into (-LOGIT_CAP, LOGIT_CAP). Overlap losses have
    // vanishing gradients at confidently wrong pixels; bounding the class
    // gap keeps the softmax out of full saturation so those pixels stay
    // recoverable.
    let squashed = tape.scale(raw, 1.0 / LOGIT_CAP);
    let squashed = tape.tanh(squashed);
    let logits = tape.scale(squashed, LOGIT_CAP);
    // Softmax over the class axis: move classes last, normalize, move back.
    let moved = tape.permute(logits, &[0, 2, 3, 1])?;
    let soft = tape.softmax_lastdim(moved)?;
    tape.permute(soft, &[0, 3, 1, 2])
}

/// Full forward pass to per-pixel class probabilities `[B, C_o, H, W]`.
pub fn model_forward(
    tape: &mut Tape,
    img: Var,
    token_ids: &[Vec<usize>],
    params: &ModelParams,
    vars: &ModelVars,
) -> Result<Var> {
    let cfg = &params.cfg;
    let stages = encode_image_stub(tape, img, vars, cfg)?;
    let batch = tape.shape(img)[0];

    let text = if vars.modab.is_empty() {
        None
    } else {
        Some(encode_text_stub(tape, token_ids, &params.text_table)?)
    };

    let fused_stages = cfg.fused_stages();
    let mut skips = Vec::with_capacity(4);
    for (i, &stage_var) in stages.iter().enumerate() {
        let stage_no = i + 1;
        let fused = match fused_stages.iter().position(|&s| s == stage_no) {
            Some(block_idx) => {
                let t = text.expect("fusion without text");
                let side = cfg.stage_side(stage_no);
                let c = cfg.channels[i];
                let flat = tape.reshape(stage_var, &[batch, c, side * side])?;
                let out = modab_forward(tape, flat, t, &vars.modab[block_idx])?;
                tape.reshape(out, &[batch, c, side, side])?
            }
            None => stage_var,
        };
        skips.push(fused);
    }
    decoder_forward(tape, skips[3], &skips, vars, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{grad_check, GradCheckOpts};
    use crate::data;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            channels: [4, 6, 8, 10],
            d_text: 6,
            n_tokens: 8,
            heads: 1,
            d_state: 2,
            ..ModelConfig::default()
        }
    }

    fn forward_once(
        cfg: ModelConfig,
        seed: u64,
        ids: &[Vec<usize>],
    ) -> (Vec<usize>, Vec<f64>) {
        let mut store = ParamStore::new();
        let params = ModelParams::init(&mut store, cfg, data::vocab_len(), seed).unwrap();
        let mut r = rng::seeded(seed ^ 1);
        let img = Tensor::uniform(&mut r, &[2, 3, cfg.input_size, cfg.input_size], 0.0, 1.0);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, &store);
        let vars = params.bind(&mut binder);
        let iv = tape.constant(img);
        let y = model_forward(&mut tape, iv, ids, &params, &vars).unwrap();
        (tape.shape(y).to_vec(), tape.value(y).data().to_vec())
    }

    #[test]
    fn default_config_is_valid_and_small_variants_reject() {
        ModelConfig::default().validate().unwrap();
        let bad = ModelConfig { input_size: 48, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { shuffle_r: 2, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { pool_o: 4, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encoder_stage_geometry() {
        let cfg = ModelConfig::default();
        assert_eq!(
            (1..=4).map(|s| cfg.stage_side(s)).collect::<Vec<_>>(),
            vec![16, 8, 4, 2]
        );
        let mut store = ParamStore::new();
        let params = ModelParams::init(&mut store, cfg, data::vocab_len(), 3).unwrap();
        let mut r = rng::seeded(4);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, &store);
        let vars = params.bind(&mut binder);
        let img = tape.constant(Tensor::uniform(&mut r, &[1, 3, 64, 64], 0.0, 1.0));
        let stages = encode_image_stub(&mut tape, img, &vars, &cfg).unwrap();
        let shapes: Vec<Vec<usize>> =
            stages.iter().map(|&s| tape.shape(s).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 8, 16, 16],
                vec![1, 16, 8, 8],
                vec![1, 32, 4, 4],
                vec![1, 64, 2, 2]
            ]
        );
    }

    #[test]
    fn text_stub_contract() {
        let table = frozen_text_table(data::vocab_len(), 8, 5);
        // Row 0 is zero, other rows unit.
        assert!(table.data()[..8].iter().all(|&v| v == 0.0));
        for row in 1..data::vocab_len() {
            let norm: f64 =
                table.data()[row * 8..(row + 1) * 8].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        let mut tape = Tape::new();
        let ids = vec![vec![0, 3, 5], vec![3, 0, 0]];
        let emb = encode_text_stub(&mut tape, &ids, &table).unwrap();
        assert_eq!(tape.shape(emb), &[2, 3, 8]);
        let ev = tape.value(emb);
        // Same id, same embedding, wherever it appears.
        assert_eq!(&ev.data()[8..16], &ev.data()[24..32]);
        assert!(ev.data()[..8].iter().all(|&v| v == 0.0));
        let err = encode_text_stub(&mut tape, &[vec![99]], &table).unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");
    }

    #[test]
    fn forward_shape_softmax_and_determinism() {
        let cfg = small_cfg();
        let ids = vec![vec![1, 2, 4, 0, 0, 0, 0, 0], vec![1, 2, 5, 0, 0, 0, 0, 0]];
        let (shape, v1) = forward_once(cfg, 9, &ids);
        assert_eq!(shape, vec![2, 2, 32, 32]);
        for i in 0..(2 * 32 * 32) {
            let (b, px) = (i / (32 * 32), i % (32 * 32));
            let base = b * 2 * 32 * 32 + px;
            let sum = v1[base] + v1[base + 32 * 32];
            assert!((sum - 1.0).abs() < 1e-9, "pixel sum {sum}");
            assert!(v1[base] >= 0.0 && v1[base] <= 1.0);
        }
        let (_, v2) = forward_once(cfg, 9, &ids);
        assert_eq!(v1, v2);
    }

    #[test]
    fn no_fusion_model_ignores_prompts() {
        let cfg = ModelConfig { fuse_text: false, ..small_cfg() };
        let ids_a = vec![vec![1, 2, 4, 0, 0, 0, 0, 0]; 2];
        let ids_b = vec![vec![1, 2, 6, 0, 0, 0, 0, 0]; 2];
        let (_, va) = forward_once(cfg, 11, &ids_a);
        let (_, vb) = forward_once(cfg, 11, &ids_b);
        assert_eq!(va, vb);
    }

    #[test]
    fn zero_gate_makes_prompts_irrelevant_bitwise() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let params = ModelParams::init(&mut store, cfg, data::vocab_len(), 13).unwrap();
        *store.get_mut(params.modab[0].alpha) = Tensor::zeros(&[1]);
        let mut r = rng::seeded(14);
        let img = Tensor::uniform(&mut r, &[1, 3, 32, 32], 0.0, 1.0);
        let run = |ids: &[Vec<usize>]| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape, &store);
            let vars = params.bind(&mut binder);
            let iv = tape.constant(img.clone());
            let y = model_forward(&mut tape, iv, ids, &params, &vars).unwrap();
            tape.value(y).data().to_vec()
        };
        let va = run(&[vec![1, 2, 4, 0, 0, 0, 0, 0]]);
        let vb = run(&[vec![3, 6, 7, 8, 9, 10, 1, 2]]);
        assert_eq!(va.len(), vb.len());
        for (a, b) in va.iter().zip(&vb) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn modab_all_stages_and_arch_variants_run() {
        for cfg in [
            ModelConfig { modab_all_stages: true, ..small_cfg() },
            ModelConfig { arch: ArchMode::LinearMixer, ..small_cfg() },
            ModelConfig { arch: ArchMode::AdditiveFusion, ..small_cfg() },
            ModelConfig { use_batch_norm: true, ..small_cfg() },
        ] {
            let ids = vec![vec![1, 2, 4, 0, 0, 0, 0, 0]; 2];
            let (shape, v) = forward_once(cfg, 15, &ids);
            assert_eq!(shape, vec![2, 2, 32, 32]);
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn summary_helper_counts_match_hand_arithmetic() {
        assert_eq!(conv2d_param_count(1, 1, 3, true), 10);
        // Doubling both channel widths exactly quadruples a conv weight.
        assert_eq!(
            conv2d_param_count(32, 64, 3, false),
            4 * conv2d_param_count(16, 32, 3, false)
        );
        assert_eq!(matmul_mac_count(2, 3, 4), 24);
        assert_eq!(conv2d_mac_count(1, 1, 1, 5, 5), 25);
    }

    #[test]
    fn summary_matches_store_per_module_and_in_total() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig { modab_all_stages: true, ..small_cfg() },
            ModelConfig { arch: ArchMode::LinearMixer, ..ModelConfig::default() },
            ModelConfig { arch: ArchMode::AdditiveFusion, ..ModelConfig::default() },
            ModelConfig { fuse_text: false, ..ModelConfig::default() },
        ] {
            let summary = model_summary(&cfg).unwrap();
            let mut store = ParamStore::new();
            ModelParams::init(&mut store, cfg, data::vocab_len(), 5).unwrap();
            let mut by_module: std::collections::HashMap<String, usize> =
                std::collections::HashMap::new();
            for rf in store.refs() {
                let name = store.name(rf);
                let prefix = name.split('.').next().unwrap().to_string();
                *by_module.entry(prefix).or_default() += store.get(rf).numel();
            }
            for m in &summary.modules {
                assert_eq!(
                    by_module.get(&m.name).copied().unwrap_or(0),
                    m.params,
                    "module {} of {cfg:?}",
                    m.name
                );
            }
            assert_eq!(summary.modules.len(), by_module.len());
            assert_eq!(summary.total_params, store.numel_total());
            assert!(summary.total_macs > 0);
        }
        // Regression pin for the default configuration.
        let s = model_summary(&ModelConfig::default()).unwrap();
        assert_eq!(s.total_params, 94_207);
        assert_eq!(s.total_macs, 2_578_464);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        // The decoder alone, from a tiny fused map: checks the upsample,
        // skip concat, refine, and subpixel head wiring.
        let cfg = ModelConfig {
            input_size: 32,
            channels: [2, 3, 4, 5],
            d_text: 4,
            n_tokens: 4,
            heads: 1,
            d_state: 2,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let params = ModelParams::init(&mut store, cfg, data::vocab_len(), 17).unwrap();
        let mut r = rng::seeded(18);
        let fused = Tensor::randn(&mut r, &[1, 5, 1, 1], 1.0);
        let skips: Vec<Tensor> = (1..=4)
            .map(|s| {
                let side = cfg.stage_side(s);
                Tensor::randn(&mut r, &[1, cfg.channels[s - 1], side, side], 1.0)
            })
            .collect();
        let names: Vec<&str> = store.refs().map(|rf| store.name(rf)).collect();
        let tensors: Vec<Tensor> = store.refs().map(|rf| store.get(rf).clone()).collect();
        let refs: Vec<_> = store.refs().collect();
        // Probe with a random linear functional of the output. A symmetric
        // loss like sum(y^2) is stationary where the class softmax is near
        // uniform, leaving gradients too small for finite differences.
        // The raised denominator floor covers weight directions that the
        // downstream normalization layers annihilate to first order; those
        // few coordinates are verified absolutely (|a-n| <= 1e-9) instead.
        let probe = Tensor::randn(&mut r, &[1, 2, 32, 32], 1.0);
        let report = grad_check(
            &names,
            &tensors,
            |tape, vars| {
                let mut binder = Binder::from_vars(tape, &refs, vars);
                let bound = params.bind(&mut binder);
                let f = tape.constant(fused.clone());
                let sk: Vec<Var> = skips.iter().map(|t| tape.constant(t.clone())).collect();
                let y = decoder_forward(tape, f, &sk, &bound, &cfg)?;
                let p = tape.constant(probe.clone());
                let weighted = tape.mul(y, p)?;
                Ok(tape.sum_all(weighted))
            },
            &GradCheckOpts { max_samples: 10, denom_floor: 1e-4, ..GradCheckOpts::default() },
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {} (worst {:?})",
            report.max_rel_err,
            report.worst()
        );
    }

}
