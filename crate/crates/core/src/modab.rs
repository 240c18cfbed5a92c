//! Modality decoding attention block: fuses a visual feature map with a
//! mixed text sequence.
//!
//! The visual map arrives flattened as `[B, C, Y]` with channels as the
//! token axis and the spatial extent `Y = H·W` as the feature width. Text
//! is projected to the same width, so cross-attention needs no adapter.
//! The fused result is gated by a learnable scalar and added back to the
//! untouched input, so a zero gate reproduces the input bit for bit.

use crate::attention::{mhca, mhsa, AttnParams, AttnVars};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamRef, ParamStore};
use crate::rng;
use crate::ssmix::{ssmix_forward, SsmixConfig, SsmixParams, SsmixVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModabConfig {
    /// Flattened spatial width of the visual stage, H_i * W_i.
    pub y_feat: usize,
    /// Text embedding width entering the block.
    pub d_text: usize,
    pub heads: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    /// Swap the state-space mixer for one plain linear map (ablation).
    pub linear_mixer: bool,
    /// Swap cross-attention for mean-pooled text addition (ablation).
    pub additive_fusion: bool,
}

impl ModabConfig {
    pub fn ssmix(&self) -> SsmixConfig {
        SsmixConfig {
            d_model: self.y_feat,
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
            d_out: self.y_feat,
        }
    }
}

pub enum MixerParams {
    StateSpace(SsmixParams),
    Linear(ParamRef),
}

pub enum MixerVars {
    StateSpace(SsmixVars),
    Linear(Var),
}

pub struct ModabParams {
    pub text_proj: ParamRef,
    pub mixer: MixerParams,
    pub self_attn: AttnParams,
    /// Absent under additive fusion, which needs no projections.
    pub cross_attn: Option<AttnParams>,
    pub ln_in: (ParamRef, ParamRef),
    pub ln_sa: (ParamRef, ParamRef),
    pub ln_q: Option<(ParamRef, ParamRef)>,
    pub ln_out: (ParamRef, ParamRef),
    pub alpha: ParamRef,
    pub cfg: ModabConfig,
}

pub struct ModabVars {
    pub text_proj: Var,
    pub mixer: MixerVars,
    pub self_attn: AttnVars,
    pub cross_attn: Option<AttnVars>,
    pub ln_in: (Var, Var),
    pub ln_sa: (Var, Var),
    pub ln_q: Option<(Var, Var)>,
    pub ln_out: (Var, Var),
    pub alpha: Var,
    pub cfg: ModabConfig,
}

impl ModabParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: ModabConfig,
        seed: u64,
    ) -> Result<ModabParams> {
        let y = cfg.y_feat;
        let mut r = rng::derived(seed, 0x0dab);
        let text_proj = store.add(
            format!("{prefix}.text_proj"),
            Tensor::randn(&mut r, &[cfg.d_text, y], 1.0 / (cfg.d_text as f64).sqrt()),
        );
        let mixer = if cfg.linear_mixer {
            MixerParams::Linear(store.add(
                format!("{prefix}.mix_linear"),
                Tensor::randn(&mut r, &[y, y], 1.0 / (y as f64).sqrt()),
            ))
        } else {
            MixerParams::StateSpace(SsmixParams::init(
                store,
                &format!("{prefix}.mix"),
                &cfg.ssmix(),
                seed ^ 0x11,
            ))
        };
        let self_attn = AttnParams::init(store, &format!("{prefix}.sa"), y, cfg.heads, seed ^ 0x22)?;
        let cross_attn = if cfg.additive_fusion {
            None
        } else {
            Some(AttnParams::init(store, &format!("{prefix}.ca"), y, cfg.heads, seed ^ 0x33)?)
        };
        let mut ln = |tag: &str| {
            (
                store.add(format!("{prefix}.{tag}.gamma"), Tensor::full(&[y], 1.0)),
                store.add(format!("{prefix}.{tag}.beta"), Tensor::zeros(&[y])),
            )
        };
        let ln_in = ln("ln_in");
        let ln_sa = ln("ln_sa");
        let ln_q = if cfg.additive_fusion { None } else { Some(ln("ln_q")) };
        let ln_out = ln("ln_out");
        // Small positive gate start keeps early training close to the
        // visual-only path without pinning the gate at zero.
        let alpha_val = r.gen_range(0.0..0.1);
        let alpha = store.add(
            format!("{prefix}.alpha"),
            Tensor::new(vec![1], vec![alpha_val]).unwrap(),
        );
        Ok(ModabParams {
            text_proj,
            mixer,
            self_attn,
            cross_attn,
            ln_in,
            ln_sa,
            ln_q,
            ln_out,
            alpha,
            cfg,
        })
    }

    pub fn bind(&self, b: &mut Binder) -> ModabVars {
        ModabVars {
            text_proj: b.bind(self.text_proj),
            mixer: match &self.mixer {
                MixerParams::StateSpace(p) => MixerVars::StateSpace(p.bind(b)),
                MixerParams::Linear(r) => MixerVars::Linear(b.bind(*r)),
            },
            self_attn: self.self_attn.bind(b),
            cross_attn: self.cross_attn.as_ref().map(|p| p.bind(b)),
            ln_in: (b.bind(self.ln_in.0), b.bind(self.ln_in.1)),
            ln_sa: (b.bind(self.ln_sa.0), b.bind(self.ln_sa.1)),
            ln_q: self.ln_q.map(|(g, be)| (b.bind(g), b.bind(be))),
            ln_out: (b.bind(self.ln_out.0), b.bind(self.ln_out.1)),
            alpha: b.bind(self.alpha),
            cfg: self.cfg,
        }
    }
}

/// Text branch: linear map onto the visual width, LeakyReLU, the
/// state-space mixer, then GELU. `t: [B, N, d_text]` to `[B, N, y_feat]`.
pub fn text_projection_path(tape: &mut Tape, t: Var, v: &ModabVars) -> Result<Var> {
    let shape = tape.shape(t).to_vec();
    if shape.len() != 3 || shape[2] != v.cfg.d_text {
        return Err(Error::shape(
            "text_projection_path",
            format!("text {shape:?}, expected [_, _, {}]", v.cfg.d_text),
        ));
    }
    let lin = tape.matmul(t, v.text_proj)?;
    let act = tape.leaky_relu(lin, 0.01);
    let mixed = match &v.mixer {
        MixerVars::StateSpace(sv) => ssmix_forward(tape, act, sv, &v.cfg.ssmix())?,
        MixerVars::Linear(w) => tape.matmul(act, *w)?,
    };
    Ok(tape.gelu(mixed))
}

/// Full block. `x: [B, C, y_feat]` visual tokens, `t: [B, N, d_text]`
/// text embeddings; returns fused features shaped like `x`.
///
/// Chain: normalized and position-tagged visual tokens go through
/// self-attention with a normalized residual; queries come from that
/// stream (normalized, position-tagged), keys and values from the mixed
/// text; the cross-attention output is normalized, scaled by the gate,
/// and added to the original input.
pub fn modab_forward(tape: &mut Tape, x: Var, t: Var, v: &ModabVars) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 || xs[2] != v.cfg.y_feat {
        return Err(Error::shape(
            "modab_forward",
            format!("visual tokens {xs:?}, expected [_, _, {}]", v.cfg.y_feat),
        ));
    }

    let xn = tape.layer_norm(x, v.ln_in.0, v.ln_in.1, LN_EPS)?;
    let xp = tape.add_sinusoidal_pe(xn)?;

    let sa = mhsa(tape, xp, &v.self_attn)?;
    let sa_n = tape.layer_norm(sa, v.ln_sa.0, v.ln_sa.1, LN_EPS)?;
    let x_sa = tape.add(xp, sa_n)?;

    let t_mixed = text_projection_path(tape, t, v)?;

    let fused = if v.cfg.additive_fusion {
        // Ablation path: every visual token receives the text average.
        let n_tok = tape.shape(t_mixed)[1];
        let summed = tape.sum_axis(t_mixed, 1)?;
        let mean = tape.scale(summed, 1.0 / n_tok as f64);
        let pooled = tape.expand_axis(mean, 1, xs[1])?;
        tape.add(x_sa, pooled)?
    } else {
        let (lng, lnb) = v.ln_q.expect("attention fusion without query norm");
        let qn = tape.layer_norm(x_sa, lng, lnb, LN_EPS)?;
        let q = tape.add_sinusoidal_pe(qn)?;
        let ca_vars = v.cross_attn.as_ref().expect("attention fusion without projections");
        mhca(tape, q, t_mixed, ca_vars)?
    };

    let fused_n = tape.layer_norm(fused, v.ln_out.0, v.ln_out.1, LN_EPS)?;
    let gated = tape.gate_scalar(fused_n, v.alpha)?;
    tape.add(x, gated)
}
