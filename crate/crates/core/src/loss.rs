//! Segmentation objective: region overlap (Dice), magnitude-spectrum
//! agreement, and an entropy penalty that discourages diffuse
//! predictions, plus a plain binary cross entropy baseline.
//!
//! All terms are built on the tape so the combined objective trains
//! end to end. Predictions are per-pixel class distributions in
//! `[B, C, H, W]`; targets are hard one-hot masks of the same shape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Dice denominator stabilizer.
pub const DICE_EPS: f64 = 1e-6;
/// Stabilizer inside logarithms. Small enough that the uniform
/// two-class prediction lands on ln 2 to well under 1e-9.
pub const LOG_DELTA: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Weight of the spectral term.
    pub lambda_f: f64,
    /// Weight of the entropy term.
    pub lambda_e: f64,
    pub eps: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_f: 0.3, lambda_e: 0.1, eps: DICE_EPS, delta: LOG_DELTA }
    }
}

/// The three components and their weighted sum; `total` is the node to
/// differentiate.
pub struct LossBreakdown {
    pub dice: Var,
    pub spectral: Var,
    pub entropy: Var,
    pub total: Var,
}

fn check_same_shape(op: &'static str, tape: &Tape, y: Var, g: &Tensor) -> Result<()> {
    if tape.shape(y) != g.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs target {:?}", tape.shape(y), g.shape()),
        ));
    }
    if g.shape().len() != 4 {
        return Err(Error::shape(op, format!("expected rank 4, got {:?}", g.shape())));
    }
    Ok(())
}

fn check_one_hot(op: &'static str, g: &Tensor) -> Result<()> {
    let s = g.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let data = g.data();
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let mut sum = 0.0;
                for ci in 0..c {
                    let v = data[((bi * c + ci) * h + hi) * w + wi];
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Data(format!(
                            "{op}: target at batch {bi} class {ci} pixel ({hi}, {wi}) \
                             is {v}, expected 0 or 1"
                        )));
                    }
                    sum += v;
                }
                if sum != 1.0 {
                    return Err(Error::Data(format!(
                        "{op}: target at batch {bi} pixel ({hi}, {wi}) has class sum \
                         {sum}, expected exactly one active class"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Per-sample reduction of a `[B, C, H, W]` node to `[B]`.
fn sum_per_sample(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2] * s[3]])?;
    tape.sum_axis(flat, 1)
}

/// Soft Dice loss: per-sample overlap over all classes and pixels,
/// averaged over the batch.
pub fn dice_loss(tape: &mut Tape, y: Var, g: &Tensor, eps: f64) -> Result<Var> {
    check_same_shape("dice_loss", tape, y, g)?;
    check_one_hot("dice_loss", g)?;
    let gv = tape.constant(g.clone());
    let inter = tape.mul(y, gv)?;
    let inter_b = sum_per_sample(tape, inter)?;
    let y_b = sum_per_sample(tape, y)?;
    let g_b = sum_per_sample(tape, gv)?;
    let two_inter = tape.scale(inter_b, 2.0);
    let num = tape.add_scalar(two_inter, eps);
    let mass = tape.add(y_b, g_b)?;
    let den = tape.add_scalar(mass, eps);
    let ratio = tape.div(num, den)?;
    let mean = tape.mean_all(ratio);
    let one = tape.constant(Tensor::full(&[1], 1.0));
    tape.sub(one, mean)
}

/// Mean squared difference of the two magnitude spectra.
pub fn spectral_consistency(tape: &mut Tape, y: Var, g: &Tensor) -> Result<Var> {
    check_same_shape("spectral_consistency", tape, y, g)?;
    let gv = tape.constant(g.clone());
    let my = tape.dft2_magnitude(y)?;
    let mg = tape.dft2_magnitude(gv)?;
    let d = tape.sub(my, mg)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// −(1/(B·H·W)) · Σ Ŷ·log(Ŷ+δ). The normalizer spans batch and pixels
/// but not classes, so a uniform two-class prediction scores ln 2.
pub fn entropy_regularizer(tape: &mut Tape, y: Var, delta: f64) -> Result<Var> {
    let s = tape.shape(y).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("entropy_regularizer", format!("expected rank 4, got {s:?}")));
    }
    let shifted = tape.add_scalar(y, delta);
    let lp = tape.ln(shifted);
    let prod = tape.mul(y, lp)?;
    let total = tape.sum_all(prod);
    Ok(tape.scale(total, -1.0 / (s[0] * s[2] * s[3]) as f64))
}

/// The combined objective: Dice + λ_F·spectral + λ_E·entropy.
pub fn seu_loss(tape: &mut Tape, y: Var, g: &Tensor, w: &LossWeights) -> Result<LossBreakdown> {
    let dice = dice_loss(tape, y, g, w.eps)?;
    let spectral = spectral_consistency(tape, y, g)?;
    let entropy = entropy_regularizer(tape, y, w.delta)?;
    let wf = tape.scale(spectral, w.lambda_f);
    let we = tape.scale(entropy, w.lambda_e);
    let partial = tape.add(dice, wf)?;
    let total = tape.add(partial, we)?;
    Ok(LossBreakdown { dice, spectral, entropy, total })
}

/// Mean binary cross entropy over every element.
pub fn bce_loss(tape: &mut Tape, y: Var, g: &Tensor, delta: f64) -> Result<Var> {
    check_same_shape("bce_loss", tape, y, g)?;
    let gv = tape.constant(g.clone());
    let y_shift = tape.add_scalar(y, delta);
    let log_y = tape.ln(y_shift);
    let pos = tape.mul(gv, log_y)?;
    let neg_y = tape.neg(y);
    let one_minus_y = tape.add_scalar(neg_y, 1.0 + delta);
    let log_rest = tape.ln(one_minus_y);
    let flipped = g.map(|v| 1.0 - v);
    let gw = tape.constant(flipped);
    let rest = tape.mul(gw, log_rest)?;
    let sum = tape.add(pos, rest)?;
    let mean = tape.mean_all(sum);
    Ok(tape.neg(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{grad_check, GradCheckOpts};
    use crate::rng;
    use rand::Rng;

    /// Random one-hot target and a well-conditioned soft prediction.
    fn random_pair(seed: u64, b: usize, c: usize, h: usize, w: usize) -> (Tensor, Tensor) {
        let mut r = rng::seeded(seed);
        let mut g = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let ci = r.gen_range(0..c);
                    g[((bi * c + ci) * h + hi) * w + wi] = 1.0;
                }
            }
        }
        let mut y = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let raw: Vec<f64> = (0..c).map(|_| r.gen_range(0.05..1.0)).collect();
                    let total: f64 = raw.iter().sum();
                    for ci in 0..c {
                        y[((bi * c + ci) * h + hi) * w + wi] = raw[ci] / total;
                    }
                }
            }
        }
        (
            Tensor::new(vec![b, c, h, w], y).unwrap(),
            Tensor::new(vec![b, c, h, w], g).unwrap(),
        )
    }

    fn eval_dice(y: &Tensor, g: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let l = dice_loss(&mut tape, yv, g, DICE_EPS).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn perfect_prediction_anchors() {
        let (_, g) = random_pair(7, 2, 2, 8, 8);
        let mut tape = Tape::new();
        let yv = tape.constant(g.clone());
        let out = seu_loss(&mut tape, yv, &g, &LossWeights::default()).unwrap();
        assert!(tape.value(out.dice).item().abs() < 1e-5);
        assert_eq!(tape.value(out.spectral).item(), 0.0);
        assert!(tape.value(out.entropy).item().abs() < 1e-6);
        assert!(tape.value(out.total).item().abs() < 1e-5);
    }

    #[test]
    fn uniform_prediction_anchors() {
        let (_, g) = random_pair(8, 1, 2, 8, 8);
        let y = Tensor::full(&[1, 2, 8, 8], 0.5);
        let mut tape = Tape::new();
        let yv = tape.constant(y);
        let ent = entropy_regularizer(&mut tape, yv, LOG_DELTA).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((tape.value(ent).item() - ln2).abs() < 1e-9);

        let d = eval_dice(&Tensor::full(&[1, 2, 8, 8], 0.5), &g);
        assert!((d - 0.5).abs() < 1e-6);

        let mut tape = Tape::new();
        let yv = tape.constant(Tensor::full(&[1, 2, 8, 8], 0.5));
        let b = bce_loss(&mut tape, yv, &g, LOG_DELTA).unwrap();
        assert!((tape.value(b).item() - ln2).abs() < 1e-9);
    }

    #[test]
    fn disjoint_prediction_scores_near_one() {
        let (_, g) = random_pair(9, 2, 2, 8, 8);
        let y = g.map(|v| 1.0 - v);
        let d = eval_dice(&y, &g);
        assert!(d > 1.0 - 1e-6 && d <= 1.0);
    }

    #[test]
    fn rejects_soft_and_overfull_targets() {
        let y = Tensor::full(&[1, 2, 2, 2], 0.5);
        let mut bad = y.clone();
        bad.data_mut()[0] = 0.25; // not 0/1
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let err = dice_loss(&mut tape, yv, &bad, DICE_EPS).unwrap_err();
        assert!(err.to_string().contains("pixel (0, 0)"), "{err}");

        let both = Tensor::full(&[1, 2, 2, 2], 1.0); // class sum 2
        let mut tape = Tape::new();
        let yv = tape.constant(y);
        let err = dice_loss(&mut tape, yv, &both, DICE_EPS).unwrap_err();
        assert!(err.to_string().contains("class sum 2"), "{err}");
    }

    #[test]
    fn single_pixel_spectrum_against_zero_mask() {
        let mut point = Tensor::zeros(&[1, 1, 8, 8]);
        point.data_mut()[3 * 8 + 5] = 1.0;
        let zero = Tensor::zeros(&[1, 1, 8, 8]);
        let mut tape = Tape::new();
        let yv = tape.constant(point);
        let s = spectral_consistency(&mut tape, yv, &zero).unwrap();
        assert!((tape.value(s).item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn spectral_ignores_circular_translation() {
        let (_, g) = random_pair(10, 1, 1, 8, 8);
        let mut shifted = Tensor::zeros(&[1, 1, 8, 8]);
        for h in 0..8 {
            for w in 0..8 {
                shifted.data_mut()[((h + 3) % 8) * 8 + (w + 5) % 8] = g.data()[h * 8 + w];
            }
        }
        let mut tape = Tape::new();
        let yv = tape.constant(shifted);
        let s = spectral_consistency(&mut tape, yv, &g).unwrap();
        assert!(tape.value(s).item() < 1e-20);
    }

    #[test]
    fn spectral_positive_on_distinct_spectra() {
        for seed in 0..100u64 {
            let mut r = rng::seeded(0xabc0 + seed);
            let a = Tensor::uniform(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
            let b = Tensor::uniform(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
            let mut tape = Tape::new();
            let av = tape.constant(a);
            let s = spectral_consistency(&mut tape, av, &b).unwrap();
            assert!(tape.value(s).item() > 0.0, "seed {seed}");
        }
    }

    #[test]
    fn dice_bounded_and_flipping_a_wrong_pixel_helps() {
        for seed in 0..20u64 {
            let (y, g) = random_pair(100 + seed, 2, 3, 4, 4);
            let d = eval_dice(&y, &g);
            assert!((0.0..=1.0).contains(&d));
        }

        // All hard 2-class predictions on 2x2 masks, exhaustively.
        let to_mask = |bits: usize| {
            let mut m = Tensor::zeros(&[1, 2, 2, 2]);
            for p in 0..4 {
                let cls = (bits >> p) & 1;
                m.data_mut()[cls * 4 + p] = 1.0;
            }
            m
        };
        for gbits in 0..16 {
            let g = to_mask(gbits);
            for ybits in 0..16 {
                let before = eval_dice(&to_mask(ybits), &g);
                for p in 0..4 {
                    if (ybits >> p) & 1 != (gbits >> p) & 1 {
                        let fixed = ybits ^ (1 << p);
                        let after = eval_dice(&to_mask(fixed), &g);
                        assert!(
                            after <= before + 1e-12,
                            "fixing pixel {p}: {before} -> {after}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn entropy_grid_peaks_at_uniform_and_stays_almost_nonnegative() {
        let mut best = (0.0, -1.0);
        for step in 0..=10 {
            let p = step as f64 / 10.0;
            let mut y = Tensor::zeros(&[1, 2, 4, 4]);
            for i in 0..16 {
                y.data_mut()[i] = p;
                y.data_mut()[16 + i] = 1.0 - p;
            }
            let mut tape = Tape::new();
            let yv = tape.constant(y);
            let e = entropy_regularizer(&mut tape, yv, LOG_DELTA).unwrap();
            let v = tape.value(e).item();
            assert!(v >= -1e-9, "p={p} gave {v}");
            if v > best.1 {
                best = (p, v);
            }
        }
        assert_eq!(best.0, 0.5);
    }

    #[test]
    fn total_is_the_hand_composed_sum_and_degenerates_to_dice() {
        let (y, g) = random_pair(11, 2, 2, 8, 8);
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let out = seu_loss(&mut tape, yv, &g, &LossWeights::default()).unwrap();
        let hand = tape.value(out.dice).item()
            + 0.3 * tape.value(out.spectral).item()
            + 0.1 * tape.value(out.entropy).item();
        assert!((tape.value(out.total).item() - hand).abs() < 1e-12);

        let zeroed = LossWeights { lambda_f: 0.0, lambda_e: 0.0, ..LossWeights::default() };
        let mut tape = Tape::new();
        let yv = tape.constant(y);
        let out = seu_loss(&mut tape, yv, &g, &zeroed).unwrap();
        assert_eq!(
            tape.value(out.total).item().to_bits(),
            tape.value(out.dice).item().to_bits()
        );
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (y0, g) = random_pair(12, 1, 2, 8, 8);
        // Parameterize through a softmax so every perturbed point stays a
        // valid distribution.
        let logits = y0.map(|v| v.ln());
        let opts = GradCheckOpts { max_samples: 60, ..GradCheckOpts::default() };

        let report = grad_check(
            &["logits"],
            &[logits.clone()],
            |tape, vars| {
                let moved = tape.permute(vars[0], &[0, 2, 3, 1])?;
                let soft = tape.softmax_lastdim(moved)?;
                let y = tape.permute(soft, &[0, 3, 1, 2])?;
                let out = seu_loss(tape, y, &g, &LossWeights::default())?;
                Ok(out.total)
            },
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "seu {:?}", report.worst());

        let report = grad_check(
            &["logits"],
            &[logits.clone()],
            |tape, vars| {
                let moved = tape.permute(vars[0], &[0, 2, 3, 1])?;
                let soft = tape.softmax_lastdim(moved)?;
                let y = tape.permute(soft, &[0, 3, 1, 2])?;
                bce_loss(tape, y, &g, LOG_DELTA)
            },
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "bce {:?}", report.worst());

        let report = grad_check(
            &["logits"],
            &[logits],
            |tape, vars| {
                let moved = tape.permute(vars[0], &[0, 2, 3, 1])?;
                let soft = tape.softmax_lastdim(moved)?;
                let y = tape.permute(soft, &[0, 3, 1, 2])?;
                entropy_regularizer(tape, y, LOG_DELTA)
            },
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "entropy {:?}", report.worst());
    }
}
