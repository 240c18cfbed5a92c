//! Convolution, pooling, and pixel shuffle ops.

use crate::error::{Error, Result};
use crate::tape::{BackArgs, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Same-length depthwise 1D convolution over `[B, C, N]` with symmetric
    /// zero padding `(k-1)/2`. Kernel width must be odd.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 2 {
            return Err(Error::shape(
                "conv1d_depthwise",
                format!("input {xs:?}, weight {ws:?}"),
            ));
        }
        let (b, c, n) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        if ws[0] != c || k % 2 == 0 {
            return Err(Error::shape(
                "conv1d_depthwise",
                format!("weight {ws:?} for {c} channels (kernel width must be odd)"),
            ));
        }
        if let Some(bias) = bias {
            if self.shape(bias) != [c] {
                return Err(Error::shape(
                    "conv1d_depthwise",
                    format!("bias {:?} for {c} channels", self.shape(bias)),
                ));
            }
        }
        let pad = (k - 1) / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv: Vec<f64> = match bias {
            Some(bvar) => self.value(bvar).data().to_vec(),
            None => vec![0.0; c],
        };
        let mut data = vec![0.0; b * c * n];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * n;
                let krow = &wv[ch * k..(ch + 1) * k];
                for t in 0..n {
                    let mut s = bv[ch];
                    for (j, &kv) in krow.iter().enumerate() {
                        let src = t + j;
                        if src >= pad && src - pad < n {
                            s += kv * xv[base + src - pad];
                        }
                    }
                    data[base + t] = s;
                }
            }
        }
        let value = Tensor::new(xs, data)?;
        let mut parents = vec![x, w];
        let has_bias = bias.is_some();
        if let Some(bvar) = bias {
            parents.push(bvar);
        }
        Ok(self.push(
            value,
            parents,
            "conv1d_depthwise",
            Some(Box::new(move |args: BackArgs| {
                let xv = args.parents[0].data();
                let wv = args.parents[1].data();
                let g = args.grad.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut dbias = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * n;
                        for t in 0..n {
                            let gv = g[base + t];
                            dbias[ch] += gv;
                            for j in 0..k {
                                let src = t + j;
                                if src >= pad && src - pad < n {
                                    dx[base + src - pad] += gv * wv[ch * k + j];
                                    dw[ch * k + j] += gv * xv[base + src - pad];
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![
                    Tensor::new(args.parents[0].shape().to_vec(), dx).unwrap(),
                    Tensor::new(args.parents[1].shape().to_vec(), dw).unwrap(),
                ];
                if has_bias {
                    grads.push(Tensor::new(vec![c], dbias).unwrap());
                }
                grads
            })),
        ))
    }

    /// 2D convolution of `[B, C_in, H, W]` with `[C_out, C_in, k, k]`.
    ///
    /// Output extents must divide exactly: `(H + 2·pad - k)` a multiple of
    /// `stride`, likewise for W.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != cin {
            return Err(Error::shape(
                "conv2d",
                format!("weight {ws:?} expects {} input channels, input has {cin}", ws[1]),
            ));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} does not fit input {h}×{wd} with pad {pad}"),
            ));
        }
        if (h + 2 * pad - k) % stride != 0 || (wd + 2 * pad - k) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "stride {stride} does not evenly tile {h}×{wd} with kernel {k}, pad {pad}"
                ),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        if let Some(bias) = bias {
            if self.shape(bias) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {cout} output channels", self.shape(bias)),
                ));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv: Vec<f64> = match bias {
            Some(bvar) => self.value(bvar).data().to_vec(),
            None => vec![0.0; cout],
        };
        let mut data = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for o in 0..cout {
                let obase = (bi * cout + o) * oh * ow;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = bv[o];
                        for c in 0..cin {
                            let xbase = (bi * cin + c) * h * wd;
                            let wbase = (o * cin + c) * k * k;
                            for u in 0..k {
                                let ih = i * stride + u;
                                if ih < pad || ih - pad >= h {
                                    continue;
                                }
                                let xrow = xbase + (ih - pad) * wd;
                                let wrow = wbase + u * k;
                                for v in 0..k {
                                    let iw = j * stride + v;
                                    if iw >= pad && iw - pad < wd {
                                        s += wv[wrow + v] * xv[xrow + iw - pad];
                                    }
                                }
                            }
                        }
                        data[obase + i * ow + j] = s;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, cout, oh, ow], data)?;
        let mut parents = vec![x, w];
        let has_bias = bias.is_some();
        if let Some(bvar) = bias {
            parents.push(bvar);
        }
        Ok(self.push(
            value,
            parents,
            "conv2d",
            Some(Box::new(move |args: BackArgs| {
                let xv = args.parents[0].data();
                let wv = args.parents[1].data();
                let g = args.grad.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut dbias = vec![0.0; cout];
                for bi in 0..b {
                    for o in 0..cout {
                        let obase = (bi * cout + o) * oh * ow;
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = g[obase + i * ow + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                dbias[o] += gv;
                                for c in 0..cin {
                                    let xbase = (bi * cin + c) * h * wd;
                                    let wbase = (o * cin + c) * k * k;
                                    for u in 0..k {
                                        let ih = i * stride + u;
                                        if ih < pad || ih - pad >= h {
                                            continue;
                                        }
                                        let xrow = xbase + (ih - pad) * wd;
                                        let wrow = wbase + u * k;
                                        for v in 0..k {
                                            let iw = j * stride + v;
                                            if iw >= pad && iw - pad < wd {
                                                dx[xrow + iw - pad] += gv * wv[wrow + v];
                                                dw[wrow + v] += gv * xv[xrow + iw - pad];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![
                    Tensor::new(args.parents[0].shape().to_vec(), dx).unwrap(),
                    Tensor::new(args.parents[1].shape().to_vec(), dw).unwrap(),
                ];
                if has_bias {
                    grads.push(Tensor::new(vec![cout], dbias).unwrap());
                }
                grads
            })),
        ))
    }

    /// Transposed 2D convolution of `[B, C_in, H, W]` with weight
    /// `[C_in, C_out, k, k]`, no padding, no bias. Output is
    /// `[B, C_out, (H-1)·stride + k, (W-1)·stride + k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {xs:?}, weight {ws:?}, stride {stride}"),
            ));
        }
        let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        if ws[0] != cin {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("weight {ws:?} expects {} input channels, input has {cin}", ws[0]),
            ));
        }
        let oh = (h - 1) * stride + k;
        let ow = (wd - 1) * stride + k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut data = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for c in 0..cin {
                let xbase = (bi * cin + c) * h * wd;
                for o in 0..cout {
                    let obase = (bi * cout + o) * oh * ow;
                    let wbase = (c * cout + o) * k * k;
                    for i in 0..h {
                        for j in 0..wd {
                            let xvij = xv[xbase + i * wd + j];
                            if xvij == 0.0 {
                                continue;
                            }
                            for u in 0..k {
                                let orow = obase + (i * stride + u) * ow + j * stride;
                                let wrow = wbase + u * k;
                                for v in 0..k {
                                    data[orow + v] += wv[wrow + v] * xvij;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, cout, oh, ow], data)?;
        Ok(self.push(
            value,
            vec![x, w],
            "conv_transpose2d",
            Some(Box::new(move |args: BackArgs| {
                let xv = args.parents[0].data();
                let wv = args.parents[1].data();
                let g = args.grad.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for bi in 0..b {
                    for c in 0..cin {
                        let xbase = (bi * cin + c) * h * wd;
                        for o in 0..cout {
                            let obase = (bi * cout + o) * oh * ow;
                            let wbase = (c * cout + o) * k * k;
                            for i in 0..h {
                                for j in 0..wd {
                                    let mut s = 0.0;
                                    for u in 0..k {
                                        let grow = obase + (i * stride + u) * ow + j * stride;
                                        let wrow = wbase + u * k;
                                        for v in 0..k {
                                            s += wv[wrow + v] * g[grow + v];
                                            dw[wrow + v] += xv[xbase + i * wd + j] * g[grow + v];
                                        }
                                    }
                                    dx[xbase + i * wd + j] += s;
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(args.parents[0].shape().to_vec(), dx).unwrap(),
                    Tensor::new(args.parents[1].shape().to_vec(), dw).unwrap(),
                ]
            })),
        ))
    }

    /// Same-size box filter over `[B, C, H, W]`: odd kernel `k`, stride 1,
    /// zero padding `(k-1)/2`, constant normalizer `1/k²` (padded zeros
    /// count toward the average).
    pub fn avg_pool2d_padded(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k % 2 == 0 || k == 0 {
            return Err(Error::shape(
                "avg_pool2d_padded",
                format!("input {xs:?}, kernel {k} (must be odd)"),
            ));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let pad = (k - 1) / 2;
        let norm = 1.0 / (k * k) as f64;
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for u in 0..k {
                        let ih = i + u;
                        if ih < pad || ih - pad >= h {
                            continue;
                        }
                        let row = base + (ih - pad) * w;
                        for v in 0..k {
                            let iw = j + v;
                            if iw >= pad && iw - pad < w {
                                s += xv[row + iw - pad];
                            }
                        }
                    }
                    data[base + i * w + j] = s * norm;
                }
            }
        }
        let value = Tensor::new(xs, data)?;
        Ok(self.push(
            value,
            vec![x],
            "avg_pool2d_padded",
            Some(Box::new(move |args: BackArgs| {
                let g = args.grad.data();
                let mut dx = vec![0.0; g.len()];
                for plane in 0..b * c {
                    let base = plane * h * w;
                    for i in 0..h {
                        for j in 0..w {
                            let gv = g[base + i * w + j] * norm;
                            for u in 0..k {
                                let ih = i + u;
                                if ih < pad || ih - pad >= h {
                                    continue;
                                }
                                let row = base + (ih - pad) * w;
                                for v in 0..k {
                                    let iw = j + v;
                                    if iw >= pad && iw - pad < w {
                                        dx[row + iw - pad] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Tensor::new(args.parents[0].shape().to_vec(), dx).unwrap()]
            })),
        ))
    }

    /// Rearrange `[B, C·r², H, W]` into `[B, C, H·r, W·r]`:
    /// `y[b, c, h·r+u, w·r+v] = x[b, c·r² + u·r + v, h, w]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || r == 0 || xs[1] % (r * r) != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                format!("input {xs:?} with upscale factor {r}"),
            ));
        }
        let (b, cr2, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let c = cr2 / (r * r);
        let value = shuffle_fwd(self.value(x), b, c, r, h, w)?;
        Ok(self.push(
            value,
            vec![x],
            "pixel_shuffle",
            Some(Box::new(move |args: BackArgs| {
                vec![shuffle_bwd(args.grad, b, c, r, h, w).unwrap()]
            })),
        ))
    }

    /// Inverse of [`Tape::pixel_shuffle`]: `[B, C, H·r, W·r]` to `[B, C·r², H, W]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || r == 0 || xs[2] % r != 0 || xs[3] % r != 0 {
            return Err(Error::shape(
                "pixel_unshuffle",
                format!("input {xs:?} with downscale factor {r}"),
            ));
        }
        let (b, c, hr, wr) = (xs[0], xs[1], xs[2], xs[3]);
        let (h, w) = (hr / r, wr / r);
        let value = shuffle_bwd(self.value(x), b, c, r, h, w)?;
        Ok(self.push(
            value,
            vec![x],
            "pixel_unshuffle",
            Some(Box::new(move |args: BackArgs| {
                vec![shuffle_fwd(args.grad, b, c, r, h, w).unwrap()]
            })),
        ))
    }
}

/// `[B, C·r², H, W]` to `[B, C, H·r, W·r]`.
fn shuffle_fwd(x: &Tensor, b: usize, c: usize, r: usize, h: usize, w: usize) -> Result<Tensor> {
    let xv = x.data();
    let mut data = vec![0.0; xv.len()];
    let (hr, wr) = (h * r, w * r);
    for bi in 0..b {
        for ch in 0..c {
            for u in 0..r {
                for v in 0..r {
                    let src_plane = (bi * c * r * r + ch * r * r + u * r + v) * h * w;
                    let dst_plane = (bi * c + ch) * hr * wr;
                    for i in 0..h {
                        for j in 0..w {
                            data[dst_plane + (i * r + u) * wr + j * r + v] =
                                xv[src_plane + i * w + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c, hr, wr], data)
}

/// `[B, C, H·r, W·r]` to `[B, C·r², H, W]` (exact inverse of `shuffle_fwd`).
fn shuffle_bwd(x: &Tensor, b: usize, c: usize, r: usize, h: usize, w: usize) -> Result<Tensor> {
    let xv = x.data();
    let mut data = vec![0.0; xv.len()];
    let (hr, wr) = (h * r, w * r);
    for bi in 0..b {
        for ch in 0..c {
            for u in 0..r {
                for v in 0..r {
                    let dst_plane = (bi * c * r * r + ch * r * r + u * r + v) * h * w;
                    let src_plane = (bi * c + ch) * hr * wr;
                    for i in 0..h {
                        for j in 0..w {
                            data[dst_plane + i * w + j] =
                                xv[src_plane + (i * r + u) * wr + j * r + v];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c * r * r, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let mut r = rng::seeded(3);
        let x = Tensor::randn(&mut r, &[1, 1, 5, 5], 1.0);
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(t(&[1, 1, 3, 3], &kernel));
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        assert!(tape.value(y).max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn conv2d_rejects_uneven_stride_tiling() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape.conv2d(x, w, None, 2, 0).is_err());
    }

    #[test]
    fn conv2d_stride_matches_hand_computation() {
        // 2x2 mean kernel, stride 2 on a 4x4 ramp.
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(t(&[1, 1, 4, 4], &x));
        let wv = tape.constant(t(&[1, 1, 2, 2], &[0.25; 4]));
        let y = tape.conv2d(xv, wv, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn conv_transpose_doubles_extent_and_scatters() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let y = tape.conv_transpose2d(x, w, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
        let yv = tape.value(y).data();
        assert_eq!(&yv[0..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&yv[12..16], &[3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn avg_pool_mass_and_border_attenuation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let y = tape.avg_pool2d_padded(x, 3).unwrap();
        let yv = tape.value(y).data();
        // Corner window covers 4 live cells of 9, edge window 6 of 9.
        assert!((yv[0] - 4.0 / 9.0).abs() < 1e-15);
        assert!((yv[1] - 6.0 / 9.0).abs() < 1e-15);
        assert!((yv[5] - 1.0).abs() < 1e-15);
        let total: f64 = yv.iter().sum();
        assert!((total - 16.0 * (100.0 / 144.0)).abs() < 1e-12);
    }

    #[test]
    fn pixel_shuffle_places_channel_blocks() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.pixel_shuffle(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_unshuffle_roundtrip() {
        let mut r = rng::seeded(21);
        let x = Tensor::randn(&mut r, &[2, 8, 3, 5], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.pixel_shuffle(xv, 2).unwrap();
        let back = tape.pixel_unshuffle(y, 2).unwrap();
        assert_eq!(tape.value(back).data(), x.data());
    }

    #[test]
    fn depthwise_conv_delta_and_shift() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let delta = tape.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let y = tape.conv1d_depthwise(x, delta, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        // Kernel [1,0,0] reads the left neighbor: shifts right, zero fill.
        let shift = tape.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
        let y = tape.conv1d_depthwise(x, shift, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);

        let bias = tape.constant(t(&[1], &[10.0]));
        let y = tape.conv1d_depthwise(x, delta, Some(bias)).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 12.0, 13.0, 14.0]);
    }

    #[test]
    fn conv_family_gradients_match_finite_differences() {
        use crate::check::{grad_check, GradCheckOpts};
        let mut r = rng::seeded(31);
        let opts = GradCheckOpts::default();

        let x = Tensor::randn(&mut r, &[2, 3, 6, 6], 1.0);
        let w = Tensor::randn(&mut r, &[4, 3, 3, 3], 0.5);
        let b = Tensor::randn(&mut r, &[4], 0.5);
        let report = grad_check(
            &["x", "w", "b"],
            &[x, w, b],
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "conv2d {:?}", report.worst());

        let x = Tensor::randn(&mut r, &[2, 3, 8, 8], 1.0);
        let w = Tensor::randn(&mut r, &[4, 3, 4, 4], 0.5);
        let report = grad_check(
            &["x", "w"],
            &[x, w],
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], None, 2, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "strided conv2d {:?}", report.worst());

        let x = Tensor::randn(&mut r, &[2, 4, 3, 3], 1.0);
        let w = Tensor::randn(&mut r, &[4, 3, 2, 2], 0.5);
        let report = grad_check(
            &["x", "w"],
            &[x, w],
            |tape, v| {
                let y = tape.conv_transpose2d(v[0], v[1], 2)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "conv_transpose2d {:?}", report.worst());

        let x = Tensor::randn(&mut r, &[2, 3, 5, 5], 1.0);
        let report = grad_check(
            &["x"],
            &[x],
            |tape, v| {
                let y = tape.avg_pool2d_padded(v[0], 3)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "avg_pool {:?}", report.worst());

        let x = Tensor::randn(&mut r, &[1, 8, 3, 3], 1.0);
        let report = grad_check(
            &["x"],
            &[x],
            |tape, v| {
                let y = tape.pixel_shuffle(v[0], 2)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "pixel_shuffle {:?}", report.worst());

        let x = Tensor::randn(&mut r, &[2, 3, 7], 1.0);
        let w = Tensor::randn(&mut r, &[3, 3], 0.5);
        let b = Tensor::randn(&mut r, &[3], 0.5);
        let report = grad_check(
            &["x", "w", "b"],
            &[x, w, b],
            |tape, v| {
                let y = tape.conv1d_depthwise(v[0], v[1], Some(v[2]))?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "conv1d_depthwise {:?}", report.worst());
    }
}
