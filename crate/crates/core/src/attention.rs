//! Positional encoding and multi-head attention.
//!
//! Tokens here are whatever the caller says they are. The fusion blocks
//! treat feature-map channels as tokens and the flattened spatial extent
//! as the feature width, which makes visual channels and projected text
//! share a width without extra adapter layers. Nothing in this module
//! assumes that reading; it just attends over axis 1.

use crate::error::{Error, Result};
use crate::params::{Binder, ParamRef, ParamStore};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fixed sin/cos table, `[t_len, d]`. Row t holds
/// `sin(t / 10000^(2i/d))` and `cos` of the same angle in columns 2i and
/// 2i+1. Widths down to 1 are accepted; an odd width keeps the unpaired
/// sine column, so position information survives even a width-1 feature
/// axis (which real configs produce at small resolutions).
pub fn sinusoidal_pe_table(t_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t_len * d];
    for t in 0..t_len {
        for j in 0..d {
            let pair = (j / 2) * 2;
            let ang = t as f64 / 10000f64.powf(pair as f64 / d as f64);
            data[t * d + j] = if j % 2 == 0 { ang.sin() } else { ang.cos() };
        }
    }
    Tensor::new(vec![t_len, d], data).unwrap()
}

impl Tape {
    /// Adds the sinusoidal table to `x: [B, T, d]` along the token axis.
    /// Purely additive, no learnable state; the gradient passes through
    /// unchanged.
    pub fn add_sinusoidal_pe(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("add_sinusoidal_pe", format!("input {shape:?}")));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let table = sinusoidal_pe_table(t, d);
        let mut out = self.value(x).clone();
        for bi in 0..b {
            let base = bi * t * d;
            for (i, &pe) in table.data().iter().enumerate() {
                out.data_mut()[base + i] += pe;
            }
        }
        Ok(self.push(
            out,
            vec![x],
            "add_sinusoidal_pe",
            Some(Box::new(move |args| vec![args.grad.clone()])),
        ))
    }
}

/// Projection weights for one attention block. Per-head query/key/value
/// maps are `[d_feat, d_head]` each, stored side by side as
/// `[d_feat, heads * d_head]`; the output map is `[heads * d_head, d_feat]`.
pub struct AttnParams {
    pub wq: ParamRef,
    pub wk: ParamRef,
    pub wv: ParamRef,
    pub wo: ParamRef,
    pub heads: usize,
    pub d_feat: usize,
}

pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
    pub d_feat: usize,
}

impl AttnParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_feat: usize,
        heads: usize,
        seed: u64,
    ) -> Result<AttnParams> {
        if heads == 0 || d_feat % heads != 0 {
            return Err(Error::Config(format!(
                "attention heads ({heads}) must divide the feature width ({d_feat})"
            )));
        }
        let mut r = rng::derived(seed, 0xa77);
        let width = d_feat; // heads * d_head
        let gauss = |r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize| {
            Tensor::randn(r, &[rows, cols], 1.0 / (rows as f64).sqrt())
        };
        Ok(AttnParams {
            wq: store.add(format!("{prefix}.wq"), gauss(&mut r, d_feat, width)),
            wk: store.add(format!("{prefix}.wk"), gauss(&mut r, d_feat, width)),
            wv: store.add(format!("{prefix}.wv"), gauss(&mut r, d_feat, width)),
            wo: store.add(format!("{prefix}.wo"), gauss(&mut r, width, d_feat)),
            heads,
            d_feat,
        })
    }

    pub fn bind(&self, b: &mut Binder) -> AttnVars {
        AttnVars {
            wq: b.bind(self.wq),
            wk: b.bind(self.wk),
            wv: b.bind(self.wv),
            wo: b.bind(self.wo),
            heads: self.heads,
            d_feat: self.d_feat,
        }
    }

    pub fn numel(&self, store: &ParamStore) -> usize {
        [self.wq, self.wk, self.wv, self.wo]
            .iter()
            .map(|&r| store.get(r).numel())
            .sum()
    }
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, w) = (s[0], s[1], s[2]);
    let split = tape.reshape(x, &[b, t, heads, w / heads])?;
    tape.permute(split, &[0, 2, 1, 3])
}

/// Scaled dot-product attention over pre-projected token streams.
/// Returns the merged output and the weights `[B, heads, Tq, Tk]`.
fn attend(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    vars: &AttnVars,
) -> Result<(Var, Var)> {
    let qs = tape.shape(q_in).to_vec();
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let h = vars.heads;
    let dk = d / h;

    let q = tape.matmul(q_in, vars.wq)?;
    let k = tape.matmul(k_in, vars.wk)?;
    let v = tape.matmul(v_in, vars.wv)?;
    let q = split_heads(tape, q, h)?;
    let k = split_heads(tape, k, h)?;
    let v = split_heads(tape, v, h)?;

    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax_lastdim(scaled)?;

    let ctx = tape.matmul(weights, v)?;
    let merged = tape.permute(ctx, &[0, 2, 1, 3])?;
    let flat = tape.reshape(merged, &[b, tq, h * dk])?;
    let out = tape.matmul(flat, vars.wo)?;
    Ok((out, weights))
}

fn check_feat(op: &'static str, tape: &Tape, x: Var, vars: &AttnVars) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != vars.d_feat {
        return Err(Error::shape(
            op,
            format!("tokens {s:?}, expected [_, _, {}]", vars.d_feat),
        ));
    }
    Ok(())
}

/// Multi-head self-attention, `[B, T, d]` to `[B, T, d]`. No positional
/// encoding and no residual here; callers compose those.
pub fn mhsa(tape: &mut Tape, x: Var, vars: &AttnVars) -> Result<Var> {
    Ok(mhsa_with_weights(tape, x, vars)?.0)
}

pub fn mhsa_with_weights(tape: &mut Tape, x: Var, vars: &AttnVars) -> Result<(Var, Var)> {
    check_feat("mhsa", tape, x, vars)?;
    attend(tape, x, x, x, vars)
}

/// Multi-head cross-attention: queries from `q_src`, keys and values from
/// `kv_src`. Keys get the sinusoidal encoding added before projection;
/// values stay raw. Queries arrive as given, so any query-side encoding is
/// the caller's business.
pub fn mhca(tape: &mut Tape, q_src: Var, kv_src: Var, vars: &AttnVars) -> Result<Var> {
    Ok(mhca_with_weights(tape, q_src, kv_src, vars, true)?.0)
}

/// As `mhca`, returning the attention weights. `pe_on_keys = false` skips
/// the key-side encoding, which makes the op order-blind over kv tokens;
/// the tests lean on that to prove the encoding is really applied.
pub fn mhca_with_weights(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    vars: &AttnVars,
    pe_on_keys: bool,
) -> Result<(Var, Var)> {
    check_feat("mhca", tape, q_src, vars)?;
    check_feat("mhca", tape, kv_src, vars)?;
    let keys = if pe_on_keys { tape.add_sinusoidal_pe(kv_src)? } else { kv_src };
    attend(tape, q_src, keys, kv_src, vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{grad_check, GradCheckOpts};

    fn toy_vars(
        tape: &mut Tape,
        d: usize,
        heads: usize,
        seed: u64,
    ) -> (AttnVars, Tensor, Tensor, Tensor, Tensor) {
        let mut r = rng::seeded(seed);
        let wq = Tensor::randn(&mut r, &[d, d], 0.5);
        let wk = Tensor::randn(&mut r, &[d, d], 0.5);
        let wv = Tensor::randn(&mut r, &[d, d], 0.5);
        let wo = Tensor::randn(&mut r, &[d, d], 0.5);
        let vars = AttnVars {
            wq: tape.constant(wq.clone()),
            wk: tape.constant(wk.clone()),
            wv: tape.constant(wv.clone()),
            wo: tape.constant(wo.clone()),
            heads,
            d_feat: d,
        };
        (vars, wq, wk, wv, wo)
    }

    fn mat(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for k in 0..inner {
                for j in 0..cols {
                    out[i * cols + j] += a[i * inner + k] * b[k * cols + j];
                }
            }
        }
        out
    }

    /// Single-head reference: plain loops, softmax by hand, per batch entry.
    fn single_head_oracle(
        q_src: &Tensor,
        kv_src: &Tensor,
        wq: &Tensor,
        wk: &Tensor,
        wv: &Tensor,
        wo: &Tensor,
        pe_on_keys: bool,
    ) -> Tensor {
        let (b, tq, d) = (q_src.shape()[0], q_src.shape()[1], q_src.shape()[2]);
        let tk = kv_src.shape()[1];
        let pe = sinusoidal_pe_table(tk, d);
        let mut out = vec![0.0; b * tq * d];
        for bi in 0..b {
            let qsl = &q_src.data()[bi * tq * d..(bi + 1) * tq * d];
            let ksl: Vec<f64> = kv_src.data()[bi * tk * d..(bi + 1) * tk * d]
                .iter()
                .enumerate()
                .map(|(i, &x)| if pe_on_keys { x + pe.data()[i] } else { x })
                .collect();
            let vsl = &kv_src.data()[bi * tk * d..(bi + 1) * tk * d];
            let q = mat(qsl, tq, d, wq.data(), d);
            let k = mat(&ksl, tk, d, wk.data(), d);
            let v = mat(vsl, tk, d, wv.data(), d);
            let scale = 1.0 / (d as f64).sqrt();
            let mut ctx = vec![0.0; tq * d];
            for i in 0..tq {
                let mut logits = vec![0.0; tk];
                for (j, slot) in logits.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += q[i * d + c] * k[j * d + c];
                    }
                    *slot = dot * scale;
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..tk {
                    let w = exps[j] / z;
                    for c in 0..d {
                        ctx[i * d + c] += w * v[j * d + c];
                    }
                }
            }
            let o = mat(&ctx, tq, d, wo.data(), d);
            out[bi * tq * d..(bi + 1) * tq * d].copy_from_slice(&o);
        }
        Tensor::new(vec![b, tq, d], out).unwrap()
    }

    #[test]
    fn pe_row_zero_is_sin_cos_of_nothing() {
        let table = sinusoidal_pe_table(3, 6);
        assert_eq!(&table.data()[0..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pe_on_zero_input_is_the_table_and_batch_independent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 5, 6]));
        let y = tape.add_sinusoidal_pe(x).unwrap();
        let table = sinusoidal_pe_table(5, 6);
        let yv = tape.value(y);
        for bi in 0..2 {
            for (i, &pe) in table.data().iter().enumerate() {
                assert_eq!(yv.data()[bi * 30 + i], pe);
            }
        }
        // Nonzero input: the added offset must not depend on the batch entry.
        let mut r = rng::seeded(3);
        let xt = Tensor::randn(&mut r, &[3, 4, 6], 1.0);
        let x = tape.constant(xt.clone());
        let y = tape.add_sinusoidal_pe(x).unwrap();
        let diff: Vec<f64> = tape
            .value(y)
            .data()
            .iter()
            .zip(xt.data())
            .map(|(a, b)| a - b)
            .collect();
        for bi in 1..3 {
            for i in 0..24 {
                // Recovering the offset by subtraction reintroduces input-
                // dependent rounding, so identical-up-to-ulp, not bitwise.
                assert!((diff[bi * 24 + i] - diff[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pe_handles_width_one_features() {
        let table = sinusoidal_pe_table(4, 1);
        for t in 0..4 {
            assert!((table.data()[t] - (t as f64).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_attends_to_itself_with_weight_one() {
        let mut tape = Tape::new();
        let (vars, _, _, wv, wo) = toy_vars(&mut tape, 4, 2, 11);
        let mut r = rng::seeded(12);
        let xt = Tensor::randn(&mut r, &[1, 1, 4], 1.0);
        let x = tape.constant(xt.clone());
        let (out, w) = mhsa_with_weights(&mut tape, x, &vars).unwrap();
        for &wv_ in tape.value(w).data() {
            assert_eq!(wv_, 1.0);
        }
        let vw = mat(xt.data(), 1, 4, wv.data(), 4);
        let expect = mat(&vw, 1, 4, wo.data(), 4);
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut tape = Tape::new();
        let (vars, ..) = toy_vars(&mut tape, 4, 2, 21);
        let row = [0.3, -1.2, 0.8, 0.1];
        let data: Vec<f64> = row.iter().cycle().take(4 * 5).cloned().collect();
        let x = tape.constant(Tensor::new(vec![1, 5, 4], data).unwrap());
        let (_, w) = mhsa_with_weights(&mut tape, x, &vars).unwrap();
        for &wv_ in tape.value(w).data() {
            assert!((wv_ - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_head_self_attention_matches_oracle() {
        let mut tape = Tape::new();
        let (vars, wq, wk, wv, wo) = toy_vars(&mut tape, 5, 1, 31);
        let mut r = rng::seeded(32);
        let xt = Tensor::randn(&mut r, &[2, 3, 5], 1.0);
        let x = tape.constant(xt.clone());
        let out = mhsa(&mut tape, x, &vars).unwrap();
        let expect = single_head_oracle(&xt, &xt, &wq, &wk, &wv, &wo, false);
        assert!(tape.value(out).max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn cross_attention_matches_oracle_on_toy() {
        let mut tape = Tape::new();
        let (vars, wq, wk, wv, wo) = toy_vars(&mut tape, 4, 1, 41);
        let mut r = rng::seeded(42);
        let qt = Tensor::randn(&mut r, &[1, 2, 4], 1.0);
        let kt = Tensor::randn(&mut r, &[1, 3, 4], 1.0);
        let q = tape.constant(qt.clone());
        let kv = tape.constant(kt.clone());
        let out = mhca(&mut tape, q, kv, &vars).unwrap();
        let expect = single_head_oracle(&qt, &kt, &wq, &wk, &wv, &wo, true);
        assert!(tape.value(out).max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn single_kv_token_makes_logits_irrelevant() {
        let mut tape = Tape::new();
        let (vars, ..) = toy_vars(&mut tape, 4, 2, 51);
        let mut r = rng::seeded(52);
        let kv = tape.constant(Tensor::randn(&mut r, &[1, 1, 4], 1.0));
        let q1 = tape.constant(Tensor::randn(&mut r, &[1, 3, 4], 1.0));
        let q2 = tape.constant(Tensor::randn(&mut r, &[1, 3, 4], 5.0));
        let o1 = mhca(&mut tape, q1, kv, &vars).unwrap();
        let o2 = mhca(&mut tape, q2, kv, &vars).unwrap();
        let d = tape.value(o1).max_abs_diff(tape.value(o2)).unwrap();
        assert!(d < 1e-12, "outputs differ by {d}");
    }

    #[test]
    fn cross_attention_without_key_pe_degenerates_to_self_attention() {
        let mut tape = Tape::new();
        let (vars, ..) = toy_vars(&mut tape, 6, 3, 61);
        let mut r = rng::seeded(62);
        let xt = Tensor::randn(&mut r, &[2, 4, 6], 1.0);
        let x = tape.constant(xt);
        let sa = mhsa(&mut tape, x, &vars).unwrap();
        let (ca, _) = mhca_with_weights(&mut tape, x, x, &vars, false).unwrap();
        let d = tape.value(sa).max_abs_diff(tape.value(ca)).unwrap();
        assert!(d < 1e-12, "differ by {d}");
    }

    #[test]
    fn key_pe_breaks_kv_permutation_symmetry() {
        let mut tape = Tape::new();
        let (vars, ..) = toy_vars(&mut tape, 4, 2, 71);
        let mut r = rng::seeded(72);
        let kv = Tensor::randn(&mut r, &[1, 4, 4], 1.0);
        let q = Tensor::randn(&mut r, &[1, 2, 4], 1.0);
        // Reverse the kv token order.
        let mut rev = kv.clone();
        for t in 0..4 {
            rev.data_mut()[t * 4..(t + 1) * 4]
                .copy_from_slice(&kv.data()[(3 - t) * 4..(4 - t) * 4]);
        }
        let qv = tape.constant(q);
        let kv1 = tape.constant(kv);
        let kv2 = tape.constant(rev);
        let (plain1, _) = mhca_with_weights(&mut tape, qv, kv1, &vars, false).unwrap();
        let (plain2, _) = mhca_with_weights(&mut tape, qv, kv2, &vars, false).unwrap();
        let d = tape.value(plain1).max_abs_diff(tape.value(plain2)).unwrap();
        assert!(d < 1e-12, "encoding off: order should not matter, diff {d}");
        let (enc1, _) = mhca_with_weights(&mut tape, qv, kv1, &vars, true).unwrap();
        let (enc2, _) = mhca_with_weights(&mut tape, qv, kv2, &vars, true).unwrap();
        let d = tape.value(enc1).max_abs_diff(tape.value(enc2)).unwrap();
        assert!(d > 1e-6, "encoding on: order must matter, diff {d}");
    }

    #[test]
    fn attention_weight_rows_sum_to_one() {
        let mut tape = Tape::new();
        let (vars, ..) = toy_vars(&mut tape, 4, 2, 81);
        let mut r = rng::seeded(82);
        let x = tape.constant(Tensor::randn(&mut r, &[2, 5, 4], 2.0));
        let kv = tape.constant(Tensor::randn(&mut r, &[2, 3, 4], 2.0));
        let (_, w_sa) = mhsa_with_weights(&mut tape, x, &vars).unwrap();
        let (_, w_ca) = mhca_with_weights(&mut tape, x, kv, &vars, true).unwrap();
        for (w, tk) in [(w_sa, 5), (w_ca, 3)] {
            let wv = tape.value(w);
            for row in wv.data().chunks(tk) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
            }
        }
    }

    #[test]
    fn output_is_equivariant_to_batch_permutation() {
        let mut tape = Tape::new();
        let (vars, ..) = toy_vars(&mut tape, 4, 2, 91);
        let mut r = rng::seeded(92);
        let a = Tensor::randn(&mut r, &[1, 3, 4], 1.0);
        let b = Tensor::randn(&mut r, &[1, 3, 4], 1.0);
        let mut ab = Vec::new();
        ab.extend_from_slice(a.data());
        ab.extend_from_slice(b.data());
        let mut ba = Vec::new();
        ba.extend_from_slice(b.data());
        ba.extend_from_slice(a.data());
        let x1 = tape.constant(Tensor::new(vec![2, 3, 4], ab).unwrap());
        let x2 = tape.constant(Tensor::new(vec![2, 3, 4], ba).unwrap());
        let o1 = mhsa(&mut tape, x1, &vars).unwrap();
        let o2 = mhsa(&mut tape, x2, &vars).unwrap();
        let v1 = tape.value(o1).data().to_vec();
        let v2 = tape.value(o2).data().to_vec();
        assert_eq!(&v1[0..12], &v2[12..24]);
        assert_eq!(&v1[12..24], &v2[0..12]);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut r = rng::seeded(101);
        let d = 4;
        let wq = Tensor::randn(&mut r, &[d, d], 0.5);
        let wk = Tensor::randn(&mut r, &[d, d], 0.5);
        let wv = Tensor::randn(&mut r, &[d, d], 0.5);
        let wo = Tensor::randn(&mut r, &[d, d], 0.5);
        let x = Tensor::randn(&mut r, &[2, 3, d], 1.0);
        let kv = Tensor::randn(&mut r, &[2, 2, d], 1.0);

        let self_report = grad_check(
            &["wq", "wk", "wv", "wo", "x"],
            &[wq.clone(), wk.clone(), wv.clone(), wo.clone(), x.clone()],
            |tape, vars| {
                let av = AttnVars {
                    wq: vars[0],
                    wk: vars[1],
                    wv: vars[2],
                    wo: vars[3],
                    heads: 2,
                    d_feat: d,
                };
                let out = mhsa(tape, vars[4], &av)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum_all(sq))
            },
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(self_report.max_rel_err < 1e-6, "mhsa: {}", self_report.max_rel_err);

        let cross_report = grad_check(
            &["wq", "wk", "wv", "wo", "q", "kv"],
            &[wq, wk, wv, wo, x, kv],
            |tape, vars| {
                let av = AttnVars {
                    wq: vars[0],
                    wk: vars[1],
                    wv: vars[2],
                    wo: vars[3],
                    heads: 2,
                    d_feat: d,
                };
                let out = mhca(tape, vars[4], vars[5], &av)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum_all(sq))
            },
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(cross_report.max_rel_err < 1e-6, "mhca: {}", cross_report.max_rel_err);
    }
}
