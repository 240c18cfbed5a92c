//! Radix-2 FFT and the 2D DFT magnitude op used by the spectral loss term.

use crate::error::{Error, Result};
use crate::tape::{BackArgs, Tape, Var};
use crate::tensor::Tensor;

/// In-place iterative radix-2 FFT over a power-of-two length.
///
/// Forward uses the `exp(-2πi k n / N)` kernel; `invert` flips the sign of
/// the exponent. No normalization is applied in either direction.
pub fn fft1d(re: &mut [f64], im: &mut [f64], invert: bool) {
    let n = re.len();
    assert_eq!(n, im.len());
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if invert { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wre, wim) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut cur_re = 1.0;
            let mut cur_im = 0.0;
            for k in 0..len / 2 {
                let (a, b) = (i + k, i + k + len / 2);
                let tre = re[b] * cur_re - im[b] * cur_im;
                let tim = re[b] * cur_im + im[b] * cur_re;
                re[b] = re[a] - tre;
                im[b] = im[a] - tim;
                re[a] += tre;
                im[a] += tim;
                let next_re = cur_re * wre - cur_im * wim;
                cur_im = cur_re * wim + cur_im * wre;
                cur_re = next_re;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// In-place 2D FFT of a row-major `h × w` plane (rows, then columns).
/// Unnormalized, like [`fft1d`].
pub fn fft2d(re: &mut [f64], im: &mut [f64], h: usize, w: usize, invert: bool) {
    assert_eq!(re.len(), h * w);
    for row in 0..h {
        fft1d(&mut re[row * w..(row + 1) * w], &mut im[row * w..(row + 1) * w], invert);
    }
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for col in 0..w {
        for row in 0..h {
            col_re[row] = re[row * w + col];
            col_im[row] = im[row * w + col];
        }
        fft1d(&mut col_re, &mut col_im, invert);
        for row in 0..h {
            re[row * w + col] = col_re[row];
            im[row * w + col] = col_im[row];
        }
    }
}

impl Tape {
    /// Magnitude of the unnormalized 2D DFT of each `H × W` plane of a
    /// `[B, C, H, W]` tensor. H and W must be powers of two.
    pub fn dft2_magnitude(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("dft2_magnitude", format!("expected rank 4, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(Error::shape(
                "dft2_magnitude",
                format!("spatial extents {h}×{w} must be powers of two"),
            ));
        }
        let xv = self.value(x).data();
        let planes = b * c;
        let hw = h * w;
        let mut all_re = vec![0.0; planes * hw];
        let mut all_im = vec![0.0; planes * hw];
        let mut mag = vec![0.0; planes * hw];
        for p in 0..planes {
            let span = p * hw..(p + 1) * hw;
            all_re[span.clone()].copy_from_slice(&xv[span.clone()]);
            fft2d(&mut all_re[span.clone()], &mut all_im[span.clone()], h, w, false);
            for i in span.clone() {
                mag[i] = (all_re[i] * all_re[i] + all_im[i] * all_im[i]).sqrt();
            }
        }
        let value = Tensor::new(xs, mag.clone())?;
        Ok(self.push(
            value,
            vec![x],
            "dft2_magnitude",
            Some(Box::new(move |args: BackArgs| {
                // d|X|/dx is the real part of the unnormalized inverse DFT
                // of g·(re + i·im)/|X|, with zero where |X| vanishes.
                let g = args.grad.data();
                let mut dx = vec![0.0; g.len()];
                let mut gre = vec![0.0; hw];
                let mut gim = vec![0.0; hw];
                for p in 0..planes {
                    let base = p * hw;
                    for i in 0..hw {
                        let m = mag[base + i];
                        if m == 0.0 {
                            gre[i] = 0.0;
                            gim[i] = 0.0;
                        } else {
                            gre[i] = g[base + i] * all_re[base + i] / m;
                            gim[i] = g[base + i] * all_im[base + i] / m;
                        }
                    }
                    fft2d(&mut gre, &mut gim, h, w, true);
                    dx[base..base + hw].copy_from_slice(&gre);
                }
                vec![Tensor::new(args.parents[0].shape().to_vec(), dx).unwrap()]
            })),
        ))
    }
}
