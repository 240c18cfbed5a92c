//! Normalization, softmax, and activation ops.

use crate::error::{Error, Result};
use crate::tape::{BackArgs, Tape, Var};
use crate::tensor::Tensor;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

impl Tape {
    fn unary(
        &mut self,
        x: Var,
        op: &'static str,
        f: fn(f64) -> f64,
        // derivative as a function of (input, output)
        df: fn(f64, f64) -> f64,
    ) -> Var {
        let value = self.value(x).map(f);
        self.push(
            value,
            vec![x],
            op,
            Some(Box::new(move |args: BackArgs| {
                let xv = args.parents[0].data();
                let yv = args.out.data();
                let g = args.grad.data();
                let data: Vec<f64> =
                    (0..g.len()).map(|i| g[i] * df(xv[i], yv[i])).collect();
                vec![Tensor::new(args.parents[0].shape().to_vec(), data).unwrap()]
            })),
        )
    }

    /// Gaussian error linear unit, exact form `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            "gelu",
            |v| 0.5 * v * (1.0 + erf(v * INV_SQRT_2)),
            |v, _| {
                let phi = 0.5 * (1.0 + erf(v * INV_SQRT_2));
                phi + v * INV_SQRT_2PI * (-0.5 * v * v).exp()
            },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(
            value,
            vec![x],
            "leaky_relu",
            Some(Box::new(move |args: BackArgs| {
                let xv = args.parents[0].data();
                let g = args.grad.data();
                let data: Vec<f64> = (0..g.len())
                    .map(|i| if xv[i] > 0.0 { g[i] } else { slope * g[i] })
                    .collect();
                vec![Tensor::new(args.parents[0].shape().to_vec(), data).unwrap()]
            })),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, "sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + eˣ)`, computed without overflow for large `x`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, "softplus", softplus_scalar, |v, _| sigmoid_scalar(v))
    }

    /// Softmax over the last axis, with max subtraction for stability.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let rows = self.value(x).numel() / d;
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - m).exp();
                denom += *o;
            }
            for o in &mut data[r * d..(r + 1) * d] {
                *o /= denom;
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            vec![x],
            "softmax_lastdim",
            Some(Box::new(move |args: BackArgs| {
                let y = args.out.data();
                let g = args.grad.data();
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in
                        dx[r * d..(r + 1) * d].iter_mut().zip(ys).zip(gs)
                    {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Tensor::new(args.parents[0].shape().to_vec(), dx).unwrap()]
            })),
        ))
    }

    /// Layer normalization over the last axis with learnable gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs feature width {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = self.value(x).numel() / d;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut data = vec![0.0; xv.len()];
        let mut mus = vec![0.0; rows];
        let mut inv_sigmas = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            mus[r] = mu;
            inv_sigmas[r] = inv;
            for (j, (o, &v)) in data[r * d..(r + 1) * d].iter_mut().zip(row).enumerate() {
                *o = gv[j] * (v - mu) * inv + bv[j];
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            vec![x, gamma, beta],
            "layer_norm",
            Some(Box::new(move |args: BackArgs| {
                let xv = args.parents[0].data();
                let gammav = args.parents[1].data();
                let g = args.grad.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let mu = mus[r];
                    let inv = inv_sigmas[r];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv;
                        let dxhat = gs[j] * gammav[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += gs[j] * xhat;
                        dbeta[j] += gs[j];
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv;
                        let dxhat = gs[j] * gammav[j];
                        dx[r * d + j] =
                            inv * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                    }
                }
                vec![
                    Tensor::new(args.parents[0].shape().to_vec(), dx).unwrap(),
                    Tensor::new(vec![d], dgamma).unwrap(),
                    Tensor::new(vec![d], dbeta).unwrap(),
                ]
            })),
        ))
    }

    /// Training-mode batch normalization over `(B, H, W)` per channel.
    pub fn batch_norm2d(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("batch_norm2d", format!("expected rank 4, got {shape:?}")));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm2d",
                format!(
                    "gamma {:?} / beta {:?} vs {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let hw = h * w;
        let n = (b * hw) as f64;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut mus = vec![0.0; c];
        let mut inv_sigmas = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                sum += xv[base..base + hw].iter().sum::<f64>();
            }
            let mu = sum / n;
            let mut var = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                var += xv[base..base + hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mus[ch] = mu;
            inv_sigmas[ch] = 1.0 / (var / n + eps).sqrt();
        }
        let mut data = vec![0.0; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                let (mu, inv) = (mus[ch], inv_sigmas[ch]);
                for i in 0..hw {
                    data[base + i] = gv[ch] * (xv[base + i] - mu) * inv + bv[ch];
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            vec![x, gamma, beta],
            "batch_norm2d",
            Some(Box::new(move |args: BackArgs| {
                let xv = args.parents[0].data();
                let gammav = args.parents[1].data();
                let g = args.grad.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let (mu, inv) = (mus[ch], inv_sigmas[ch]);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for i in 0..hw {
                            let xhat = (xv[base + i] - mu) * inv;
                            let dxhat = g[base + i] * gammav[ch];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgamma[ch] += g[base + i] * xhat;
                            dbeta[ch] += g[base + i];
                        }
                    }
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for i in 0..hw {
                            let xhat = (xv[base + i] - mu) * inv;
                            let dxhat = g[base + i] * gammav[ch];
                            dx[base + i] =
                                inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                        }
                    }
                }
                vec![
                    Tensor::new(args.parents[0].shape().to_vec(), dx).unwrap(),
                    Tensor::new(vec![c], dgamma).unwrap(),
                    Tensor::new(vec![c], dbeta).unwrap(),
                ]
            })),
        ))
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
