//! Named gradient-check instances for every differentiable operation, plus
//! the whole-network check. The command-line `gradcheck` subcommand and the
//! acceptance suite both draw from this list so they cannot drift apart.
//!
//! Each entry builds a small seeded instance in a smooth region of the op
//! (positive inputs for `ln`, step sizes away from zero for the scan) and
//! compares reverse-mode gradients against central differences. Single ops
//! carry a 1e-6 bar; the deep blocks carry 1e-5, where normalization layers
//! make a handful of directions unresolvable by finite differences at any
//! step size.

use crate::attention::AttnParams;
use crate::check::{grad_check, GradCheckOpts, GradCheckReport};
use crate::config::TrainConfig;
use crate::data;
use crate::error::Result;
use crate::loss::{self, LossWeights};
use crate::modab::{MixerParams, ModabConfig, ModabParams};
use crate::model::ModelParams;
use crate::params::{Binder, ParamStore};
use crate::rng;
use crate::ssmix::{delta_reparam, ssmix_forward, SsmixConfig, SsmixParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub struct CatalogEntry {
    pub name: &'static str,
    /// Largest acceptable worst-case relative gradient error.
    pub tolerance: f64,
    pub run: Box<dyn Fn() -> Result<GradCheckReport>>,
}

fn sumsq(tape: &mut Tape, y: Var) -> Result<Var> {
    let sq = tape.mul(y, y)?;
    Ok(tape.sum_all(sq))
}

/// One-input check: `f` maps the parameter to some tensor, the loss is its
/// sum of squares.
fn unary<F>(name: &'static str, x: Tensor, f: F) -> CatalogEntry
where
    F: Fn(&mut Tape, Var) -> Result<Var> + 'static,
{
    CatalogEntry {
        name,
        tolerance: 1e-6,
        run: Box::new(move |               | {
            grad_check(
                &["x"],
                std::slice::from_ref(&x),
                |tape, v| {
                    let y = f(tape, v[0])?;
                    sumsq(tape, y)
                },
                &GradCheckOpts::default(),
            )
        }),
    }
}

fn nary<F>(name: &'static str, inputs: Vec<(&'static str, Tensor)>, f: F) -> CatalogEntry
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    CatalogEntry {
        name,
        tolerance: 1e-6,
        run: Box::new(move || {
            let names: Vec<&str> = inputs.iter().map(|(n, _)| *n).collect();
            let tensors: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
            grad_check(
                &names,
                &tensors,
                |tape, v| {
                    let y = f(tape, v)?;
                    sumsq(tape, y)
                },
                &GradCheckOpts::default(),
            )
        }),
    }
}

/// Class probabilities from free logits: `[B, C, H, W]` softmaxed over C.
/// Losses constrain their prediction input to the simplex, so their checks
/// differentiate through this parameterization.
fn probs_from_logits(tape: &mut Tape, logits: Var) -> Result<Var> {
    let moved = tape.permute(logits, &[0, 2, 3, 1])?;
    let sm = tape.softmax_lastdim(moved)?;
    tape.permute(sm, &[0, 3, 1, 2])
}

fn checker_target(b: usize, h: usize) -> Tensor {
    let plane = h * h;
    let mut data = vec![0.0; b * 2 * plane];
    for bi in 0..b {
        for p in 0..plane {
            let fg = ((p / h + p % h) % 2 == 0) as usize as f64;
            data[bi * 2 * plane + p] = 1.0 - fg;
            data[bi * 2 * plane + plane + p] = fg;
        }
    }
    Tensor::new(vec![b, 2, h, h], data).unwrap()
}

pub fn op_catalog() -> Vec<CatalogEntry> {
    let mut r = rng::seeded(0xca7a);
    let mut entries: Vec<CatalogEntry> = Vec::new();
    let mut g = |shape: &[usize]| Tensor::randn(&mut r, shape, 1.0);

    // Elementwise and scalar ops.
    entries.push(unary("gelu", g(&[2, 5]), |t, x| Ok(t.gelu(x))));
    entries.push(unary("leaky_relu", g(&[2, 5]), |t, x| Ok(t.leaky_relu(x, 0.1))));
    entries.push(unary("tanh", g(&[2, 5]), |t, x| Ok(t.tanh(x))));
    entries.push(unary("sigmoid", g(&[2, 5]), |t, x| Ok(t.sigmoid(x))));
    entries.push(unary("softplus", g(&[2, 5]), |t, x| Ok(t.softplus(x))));
    entries.push(unary("exp", g(&[2, 3]), |t, x| Ok(t.exp(x))));
    {
        let mut rr = rng::seeded(0x11);
        let pos = Tensor::uniform(&mut rr, &[2, 4], 0.5, 2.0);
        entries.push(unary("ln", pos, |t, x| Ok(t.ln(x))));
    }
    entries.push(unary("neg", g(&[2, 3]), |t, x| Ok(t.neg(x))));
    entries.push(unary("scale", g(&[2, 3]), |t, x| Ok(t.scale(x, 1.3))));
    entries.push(unary("add_scalar", g(&[2, 3]), |t, x| Ok(t.add_scalar(x, 0.7))));

    // Binary arithmetic.
    entries.push(nary("add", vec![("a", g(&[2, 3])), ("b", g(&[2, 3]))], |t, v| {
        t.add(v[0], v[1])
    }));
    entries.push(nary("sub", vec![("a", g(&[2, 3])), ("b", g(&[2, 3]))], |t, v| {
        t.sub(v[0], v[1])
    }));
    entries.push(nary("mul", vec![("a", g(&[2, 3])), ("b", g(&[2, 3]))], |t, v| {
        t.mul(v[0], v[1])
    }));
    {
        let mut rr = rng::seeded(0x12);
        let num = Tensor::randn(&mut rr, &[2, 3], 1.0);
        let den = Tensor::uniform(&mut rr, &[2, 3], 0.5, 2.0);
        entries.push(nary("div", vec![("a", num), ("b", den)], |t, v| t.div(v[0], v[1])));
    }
    entries.push(nary(
        "gate_scalar",
        vec![("x", g(&[2, 3])), ("s", g(&[1]))],
        |t, v| t.gate_scalar(v[0], v[1]),
    ));
    entries.push(nary(
        "matmul",
        vec![("a", g(&[3, 4])), ("b", g(&[4, 2]))],
        |t, v| t.matmul(v[0], v[1]),
    ));
    entries.push(nary(
        "add_bias",
        vec![("x", g(&[2, 3, 4])), ("b", g(&[4]))],
        |t, v| t.add_bias(v[0], v[1]),
    ));

    // Reductions and shape ops. The reductions feed a squared image so the
    // chained gradient is nontrivial.
    entries.push(unary("sum_all", g(&[2, 4]), |t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.sum_all(sq))
    }));
    entries.push(unary("mean_all", g(&[2, 4]), |t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.mean_all(sq))
    }));
    entries.push(unary("sum_axis", g(&[2, 3, 2]), |t, x| t.sum_axis(x, 1)));
    entries.push(unary("expand_axis", g(&[2, 3]), |t, x| t.expand_axis(x, 1, 4)));
    entries.push(unary("reshape", g(&[2, 6]), |t, x| t.reshape(x, &[3, 4])));
    entries.push(unary("permute", g(&[2, 3, 4]), |t, x| t.permute(x, &[2, 0, 1])));
    entries.push(nary(
        "concat",
        vec![("a", g(&[2, 2])), ("b", g(&[2, 3]))],
        |t, v| t.concat(v, 1),
    ));
    entries.push(unary("slice_axis", g(&[2, 5]), |t, x| t.slice_axis(x, 1, 1, 3)));

    // Normalizations. A standardized output makes the squared loss nearly
    // flat along the directions the normalizer cancels, which starves the
    // finite differences; a fixed random probe keeps the functional sharp.
    entries.push(unary("softmax_lastdim", g(&[2, 5]), |t, x| t.softmax_lastdim(x)));
    {
        let probe = g(&[2, 4]);
        entries.push(nary(
            "layer_norm",
            vec![("x", g(&[2, 4])), ("gamma", g(&[4])), ("beta", g(&[4]))],
            move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let p = t.constant(probe.clone());
                t.mul(y, p)
            },
        ));
    }
    {
        let probe = g(&[2, 3, 4, 4]);
        entries.push(nary(
            "batch_norm2d",
            vec![("x", g(&[2, 3, 4, 4])), ("gamma", g(&[3])), ("beta", g(&[3]))],
            move |t, v| {
                let y = t.batch_norm2d(v[0], v[1], v[2], 1e-5)?;
                let p = t.constant(probe.clone());
                t.mul(y, p)
            },
        ));
    }

    // Convolution family.
    entries.push(nary(
        "conv2d",
        vec![("x", g(&[2, 3, 6, 6])), ("w", g(&[4, 3, 3, 3])), ("b", g(&[4]))],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    ));
    entries.push(nary(
        "conv2d_strided",
        vec![("x", g(&[2, 3, 8, 8])), ("w", g(&[4, 3, 4, 4]))],
        |t, v| t.conv2d(v[0], v[1], None, 2, 1),
    ));
    entries.push(nary(
        "conv_transpose2d",
        vec![("x", g(&[2, 4, 3, 3])), ("w", g(&[4, 3, 2, 2]))],
        |t, v| t.conv_transpose2d(v[0], v[1], 2),
    ));
    entries.push(nary(
        "conv1d_depthwise",
        vec![("x", g(&[2, 3, 6])), ("w", g(&[3, 3])), ("b", g(&[3]))],
        |t, v| t.conv1d_depthwise(v[0], v[1], Some(v[2])),
    ));
    entries.push(unary("avg_pool2d_padded", g(&[1, 2, 5, 5]), |t, x| {
        t.avg_pool2d_padded(x, 3)
    }));
    entries.push(unary("pixel_shuffle", g(&[1, 8, 3, 3]), |t, x| t.pixel_shuffle(x, 2)));
    entries.push(unary("pixel_unshuffle", g(&[1, 2, 6, 6]), |t, x| {
        t.pixel_unshuffle(x, 2)
    }));

    // Attention.
    entries.push(unary("add_sinusoidal_pe", g(&[1, 5, 6]), |t, x| t.add_sinusoidal_pe(x)));
    entries.push(attention_entry("mhsa", false));
    entries.push(attention_entry("mhca", true));

    // State-space path.
    {
        let mut rr = rng::seeded(0x13);
        let raw = Tensor::randn(&mut rr, &[1, 3, 5], 1.0);
        let bias = Tensor::uniform(&mut rr, &[3], 0.2, 0.8);
        entries.push(nary("delta_reparam", vec![("raw", raw), ("bias", bias)], |t, v| {
            delta_reparam(t, v[0], v[1])
        }));
    }
    {
        let mut rr = rng::seeded(0x14);
        let u = Tensor::randn(&mut rr, &[1, 2, 4], 1.0);
        let delta = Tensor::uniform(&mut rr, &[1, 2, 4], 0.2, 0.8);
        let a = Tensor::uniform(&mut rr, &[2, 2], -1.5, -0.2);
        let bt = Tensor::randn(&mut rr, &[1, 2, 4], 1.0);
        let ct = Tensor::randn(&mut rr, &[1, 2, 4], 1.0);
        let e = Tensor::randn(&mut rr, &[2], 1.0);
        entries.push(nary(
            "selective_scan",
            vec![("u", u), ("delta", delta), ("a", a), ("bt", bt), ("ct", ct), ("e", e)],
            |t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]),
        ));
    }
    entries.push(ssmix_entry());
    entries.push(modab_entry());

    // Spectra.
    entries.push(unary("dft2_magnitude", g(&[1, 1, 4, 4]), |t, x| t.dft2_magnitude(x)));

    // Losses, through the softmax parameterization.
    let target = checker_target(1, 4);
    {
        let t2 = target.clone();
        entries.push(unary("dice_loss", g(&[1, 2, 4, 4]), move |t, x| {
            let y = probs_from_logits(t, x)?;
            loss::dice_loss(t, y, &t2, loss::DICE_EPS)
        }));
    }
    {
        let t2 = target.clone();
        entries.push(unary("spectral_consistency", g(&[1, 2, 4, 4]), move |t, x| {
            let y = probs_from_logits(t, x)?;
            loss::spectral_consistency(t, y, &t2)
        }));
    }
    entries.push(unary("entropy_regularizer", g(&[1, 2, 4, 4]), |t, x| {
        let y = probs_from_logits(t, x)?;
        loss::entropy_regularizer(t, y, loss::LOG_DELTA)
    }));
    {
        let t2 = target.clone();
        entries.push(unary("bce_loss", g(&[1, 2, 4, 4]), move |t, x| {
            let y = probs_from_logits(t, x)?;
            loss::bce_loss(t, y, &t2, loss::LOG_DELTA)
        }));
    }
    {
        let t2 = target;
        entries.push(unary("seu_loss", g(&[1, 2, 4, 4]), move |t, x| {
            let y = probs_from_logits(t, x)?;
            Ok(loss::seu_loss(t, y, &t2, &LossWeights::default())?.total)
        }));
    }

    entries
}

fn attention_entry(name: &'static str, cross: bool) -> CatalogEntry {
    CatalogEntry {
        name,
        tolerance: 1e-6,
        run: Box::new(move || {
            let mut store = ParamStore::new();
            let params = AttnParams::init(&mut store, "attn", 4, 2, 21)?;
            let mut r = rng::seeded(0x15);
            let q = Tensor::randn(&mut r, &[1, 3, 4], 1.0);
            let kv = Tensor::randn(&mut r, &[1, 5, 4], 1.0);
            let names: Vec<&str> = store.refs().map(|rf| store.name(rf)).collect();
            let tensors: Vec<Tensor> = store.refs().map(|rf| store.get(rf).clone()).collect();
            let refs: Vec<_> = store.refs().collect();
            grad_check(
                &names,
                &tensors,
                |tape, vars| {
                    let mut b = Binder::from_vars(tape, &refs, vars);
                    let bound = params.bind(&mut b);
                    let qv = tape.constant(q.clone());
                    let y = if cross {
                        let kvv = tape.constant(kv.clone());
                        crate::attention::mhca(tape, qv, kvv, &bound)?
                    } else {
                        crate::attention::mhsa(tape, qv, &bound)?
                    };
                    sumsq(tape, y)
                },
                &GradCheckOpts::default(),
            )
        }),
    }
}

fn ssmix_entry() -> CatalogEntry {
    CatalogEntry {
        name: "ssmix_forward",
        tolerance: 1e-5,
        run: Box::new(|| {
            let cfg = SsmixConfig {
                d_model: 6,
                d_out: 4,
                d_state: 2,
                d_conv: 3,
                expand: 2,
            };
            let mut store = ParamStore::new();
            let params = SsmixParams::init(&mut store, "mix", &cfg, 23);
            let mut r = rng::seeded(0x16);
            // Step sizes away from the noise floor of the log-grid init.
            *store.get_mut(params.bias_delta) =
                Tensor::uniform(&mut r, &[cfg.d_inner()], 0.2, 0.8);
            let t_in = Tensor::randn(&mut r, &[2, 5, 6], 1.0);
            let names: Vec<&str> = store.refs().map(|rf| store.name(rf)).collect();
            let tensors: Vec<Tensor> = store.refs().map(|rf| store.get(rf).clone()).collect();
            let refs: Vec<_> = store.refs().collect();
            grad_check(
                &names,
                &tensors,
                |tape, vars| {
                    let mut b = Binder::from_vars(tape, &refs, vars);
                    let bound = params.bind(&mut b);
                    let emb = tape.constant(t_in.clone());
                    let y = ssmix_forward(tape, emb, &bound, &cfg)?;
                    sumsq(tape, y)
                },
                &GradCheckOpts { max_samples: 40, ..GradCheckOpts::default() },
            )
        }),
    }
}

fn modab_entry() -> CatalogEntry {
    CatalogEntry {
        name: "modab_forward",
        tolerance: 1e-5,
        run: Box::new(|| {
            let cfg = ModabConfig {
                y_feat: 4,
                d_text: 3,
                heads: 2,
                d_state: 2,
                d_conv: 3,
                expand: 2,
                linear_mixer: false,
                additive_fusion: false,
            };
            let mut store = ParamStore::new();
            let params = ModabParams::init(&mut store, "fuse", cfg, 9)?;
            let mut r = rng::seeded(0x17);
            let MixerParams::StateSpace(ref mix) = params.mixer else { unreachable!() };
            *store.get_mut(mix.bias_delta) =
                Tensor::uniform(&mut r, &[cfg.ssmix().d_inner()], 0.2, 0.8);
            *store.get_mut(params.alpha) = Tensor::new(vec![1], vec![0.5])?;
            let xt = Tensor::randn(&mut r, &[1, 5, 4], 1.0);
            let tt = Tensor::randn(&mut r, &[1, 3, 3], 1.0);
            let names: Vec<&str> = store.refs().map(|rf| store.name(rf)).collect();
            let tensors: Vec<Tensor> = store.refs().map(|rf| store.get(rf).clone()).collect();
            let refs: Vec<_> = store.refs().collect();
            grad_check(
                &names,
                &tensors,
                |tape, vars| {
                    let mut b = Binder::from_vars(tape, &refs, vars);
                    let bound = params.bind(&mut b);
                    let x = tape.constant(xt.clone());
                    let t = tape.constant(tt.clone());
                    let y = crate::modab::modab_forward(tape, x, t, &bound)?;
                    sumsq(tape, y)
                },
                &GradCheckOpts { max_samples: 25, ..GradCheckOpts::default() },
            )
        }),
    }
}

/// The whole network differentiated through the composite loss on a
/// two-sample batch of generated scenes at a 32-pixel canvas. The
/// architecture is complete (four encoder stages, fusion at stage 4, the
/// decoder, the upsampling head); widths are kept narrow so the check fits
/// a small time budget, and `max_samples` bounds coordinates per tensor.
pub fn full_model_check(max_samples: usize) -> Result<GradCheckReport> {
    let mut cfg = TrainConfig::default();
    cfg.model.input_size = 32;
    cfg.model.channels = [4, 6, 8, 10];
    cfg.model.d_text = 8;
    cfg.model.heads = 1;
    cfg.model.d_state = 2;
    let mcfg = cfg.model_config();

    let mut store = ParamStore::new();
    let params = ModelParams::init(&mut store, mcfg, data::vocab_len(), 41)?;
    let mut r = rng::seeded(0x18);
    for m in &params.modab {
        if let MixerParams::StateSpace(ref mix) = m.mixer {
            let di = store.get(mix.bias_delta).numel();
            *store.get_mut(mix.bias_delta) = Tensor::uniform(&mut r, &[di], 0.2, 0.8);
        }
        *store.get_mut(m.alpha) = Tensor::new(vec![1], vec![0.5])?;
    }
    // The head initializes to zero, which would zero every upstream
    // gradient; perturb it so the check exercises the whole network.
    let classes = store.get(params.out_w).shape()[0];
    *store.get_mut(params.out_w) = Tensor::randn(&mut r, &[classes, classes, 1, 1], 0.5);

    let (samples, _) = data::synth_generate(41, 8, 32)?;
    let img = {
        let mut d = Vec::new();
        d.extend_from_slice(samples[0].image.data());
        d.extend_from_slice(samples[1].image.data());
        Tensor::new(vec![2, 3, 32, 32], d)?
    };
    let gt = {
        let mut d = Vec::new();
        d.extend_from_slice(samples[0].mask.data());
        d.extend_from_slice(samples[1].mask.data());
        Tensor::new(vec![2, 2, 32, 32], d)?
    };
    let toks = vec![samples[0].token_ids.clone(), samples[1].token_ids.clone()];

    let names: Vec<&str> = store.refs().map(|rf| store.name(rf)).collect();
    let tensors: Vec<Tensor> = store.refs().map(|rf| store.get(rf).clone()).collect();
    let refs: Vec<_> = store.refs().collect();
    grad_check(
        &names,
        &tensors,
        |tape, vars| {
            let mut b = Binder::from_vars(tape, &refs, vars);
            let bound = params.bind(&mut b);
            let x = tape.constant(img.clone());
            let y = crate::model::model_forward(tape, x, &toks, &params, &bound)?;
            Ok(loss::seu_loss(tape, y, &gt, &LossWeights::default())?.total)
        },
        &GradCheckOpts {
            max_samples,
            denom_floor: 1e-4,
            ..GradCheckOpts::default()
        },
    )
}
