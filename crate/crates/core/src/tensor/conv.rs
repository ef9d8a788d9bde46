//! Direct 2D convolution kernels (im2col + GEMM) with panorama-aware padding.

use serde::{Deserialize, Serialize};

/// Boundary handling for spatial convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Wrap columns (longitude is periodic), replicate the first/last row.
    CircularHReplicateV,
    /// Wrap both axes. Used by equivariance and convolution-theorem checks.
    Circular,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Source row for each (kernel row, output row).
    fn row_map(&self) -> Vec<usize> {
        let ph = (self.kh / 2) as isize;
        let h = self.h as isize;
        let mut map = Vec::with_capacity(self.kh * self.ho);
        for di in 0..self.kh as isize {
            for oy in 0..self.ho as isize {
                let r = oy * self.stride as isize + di - ph;
                let r = match self.padding {
                    Padding::CircularHReplicateV => r.clamp(0, h - 1),
                    Padding::Circular => r.rem_euclid(h),
                };
                map.push(r as usize);
            }
        }
        map
    }

    /// Source column for each (kernel column, output column); always wraps.
    fn col_map(&self) -> Vec<usize> {
        let pw = (self.kw / 2) as isize;
        let w = self.w as isize;
        let mut map = Vec::with_capacity(self.kw * self.wo);
        for dj in 0..self.kw as isize {
            for ox in 0..self.wo as isize {
                map.push((ox * self.stride as isize + dj - pw).rem_euclid(w) as usize);
            }
        }
        map
    }
}

/// Gather one image `[Cin, H, W]` into a `[Cin*kh*kw, Ho*Wo]` column matrix.
pub(crate) fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let rows = g.row_map();
    let colm = g.col_map();
    let p = g.p();
    let mut k = 0;
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let dst = &mut cols[k * p..(k + 1) * p];
                let cm = &colm[dj * g.wo..(dj + 1) * g.wo];
                for oy in 0..g.ho {
                    let src = &plane[rows[di * g.ho + oy] * g.w..][..g.w];
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (o, &c) in d.iter_mut().zip(cm) {
                        *o = src[c];
                    }
                }
                k += 1;
            }
        }
    }
}

/// Scatter-add a column matrix back onto an image (adjoint of [`im2col`]).
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let rows = g.row_map();
    let colm = g.col_map();
    let p = g.p();
    let mut k = 0;
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let src = &cols[k * p..(k + 1) * p];
                let cm = &colm[dj * g.wo..(dj + 1) * g.wo];
                for oy in 0..g.ho {
                    let row = rows[di * g.ho + oy];
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[row * g.w..(row + 1) * g.w];
                    for (&v, &c) in s.iter().zip(cm) {
                        dst[c] += v;
                    }
                }
                k += 1;
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `ta`/`tb` select the transposed view of the stored matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe matrices inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution over a batch. `out` is `[B, Cout, Ho, Wo]`.
pub(crate) fn conv_forward(
    g: &ConvGeom,
    batch: usize,
    cout: usize,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let (k, p) = (g.k(), g.p());
    let in_sz = g.cin * g.h * g.w;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..batch {
        let img = &x[b * in_sz..(b + 1) * in_sz];
        let dst = &mut out[b * cout * p..(b + 1) * cout * p];
        let src: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        gemm(cout, k, p, weight, false, src, false, 0.0, dst);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut dst[co * p..(co + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    cout: usize,
    x: &[f64],
    weight: &[f64],
    gy: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let (k, p) = (g.k(), g.p());
    let in_sz = g.cin * g.h * g.w;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..batch {
        let gyb = &gy[b * cout * p..(b + 1) * cout * p];
        if let Some(gb) = gb.as_deref_mut() {
            for co in 0..cout {
                gb[co] += gyb[co * p..(co + 1) * p].iter().sum::<f64>();
            }
        }
        let img = &x[b * in_sz..(b + 1) * in_sz];
        if let Some(gw) = gw.as_deref_mut() {
            let src: &[f64] = if pointwise {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            gemm(cout, p, k, gyb, false, src, true, 1.0, gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxb = &mut gx[b * in_sz..(b + 1) * in_sz];
            if pointwise {
                gemm(k, cout, p, weight, true, gyb, false, 1.0, gxb);
            } else {
                gemm(k, cout, p, weight, true, gyb, false, 0.0, &mut dcols);
                col2im(g, &dcols, gxb);
            }
        }
    }
}
