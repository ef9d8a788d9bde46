//! Radix-2 complex FFT and the real 2D transforms built on it.
//!
//! The forward transform is unnormalized; the inverse carries the `1/(H·W)`
//! factor. Spectra of real `[H, W]` planes are stored as `H × (W/2 + 1)`
//! half spectra.

use num_complex::Complex64;
use std::f64::consts::PI;

/// Precomputed bit-reversal and twiddles for one power-of-two length.
pub struct Radix2 {
    n: usize,
    rev: Vec<usize>,
    twiddles: Vec<Complex64>,
}

impl Radix2 {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "radix-2 FFT needs a power-of-two length, got {n}");
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Self { n, rev, twiddles }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place unnormalized transform; `inverse` flips the exponent sign.
    pub fn process(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut t = self.twiddles[k * step];
                    if inverse {
                        t = t.conj();
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half] * t;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

/// Width of the half spectrum of a length-`w` real signal.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Multiplicity of half-spectrum column `k` in the full Hermitian spectrum.
pub fn column_multiplicity(k: usize, w: usize) -> f64 {
    if k == 0 || 2 * k == w {
        1.0
    } else {
        2.0
    }
}

/// Plans for the two axes of an `h × w` plane.
pub struct Plan2d {
    pub h: usize,
    pub w: usize,
    rows: Radix2,
    cols: Radix2,
}

impl Plan2d {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            rows: Radix2::new(w),
            cols: Radix2::new(h),
        }
    }

    /// Forward real 2D DFT of one plane into `(re, im)` half spectra.
    pub fn rfft2(&self, x: &[f64], re: &mut [f64], im: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let wf = half_width(w);
        let mut spec = vec![Complex64::new(0.0, 0.0); h * wf];
        let mut row = vec![Complex64::new(0.0, 0.0); w];
        for r in 0..h {
            for (c, v) in row.iter_mut().enumerate() {
                *v = Complex64::new(x[r * w + c], 0.0);
            }
            self.rows.process(&mut row, false);
            spec[r * wf..(r + 1) * wf].copy_from_slice(&row[..wf]);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for k in 0..wf {
            for r in 0..h {
                col[r] = spec[r * wf + k];
            }
            self.cols.process(&mut col, false);
            for r in 0..h {
                re[r * wf + k] = col[r].re;
                im[r * wf + k] = col[r].im;
            }
        }
    }

    /// `out = scale · Re Σ_k weight(k2) · (re + i·im)[k] · e^{+iθ}` over the half spectrum.
    ///
    /// With `weight = column_multiplicity` and `scale = 1/(H·W)` this is the
    /// inverse real transform; with unit weights and `scale = 1` it is the
    /// adjoint of [`Plan2d::rfft2`].
    pub fn synthesize(
        &self,
        re: &[f64],
        im: &[f64],
        weight: impl Fn(usize) -> f64,
        scale: f64,
        out: &mut [f64],
    ) {
        let (h, w) = (self.h, self.w);
        let wf = half_width(w);
        let mut spec = vec![Complex64::new(0.0, 0.0); h * wf];
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for k in 0..wf {
            for r in 0..h {
                col[r] = Complex64::new(re[r * wf + k], im[r * wf + k]);
            }
            self.cols.process(&mut col, true);
            let wk = weight(k);
            for r in 0..h {
                spec[r * wf + k] = col[r] * wk;
            }
        }
        let mut row = vec![Complex64::new(0.0, 0.0); w];
        for r in 0..h {
            row[..wf].copy_from_slice(&spec[r * wf..(r + 1) * wf]);
            for v in &mut row[wf..] {
                *v = Complex64::new(0.0, 0.0);
            }
            self.rows.process(&mut row, true);
            for c in 0..w {
                out[r * w + c] = row[c].re * scale;
            }
        }
    }

    /// Inverse of [`Plan2d::rfft2`].
    pub fn irfft2(&self, re: &[f64], im: &[f64], out: &mut [f64]) {
        let w = self.w;
        let scale = 1.0 / (self.h * self.w) as f64;
        self.synthesize(re, im, |k| column_multiplicity(k, w), scale, out);
    }
}
