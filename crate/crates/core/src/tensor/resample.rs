//! ×2 bilinear upscaling and 2×2 average pooling on stacks of planes.
//!
//! Upscaling samples source coordinate `(i + 0.5) / 2 - 0.5`; columns wrap
//! around the panorama seam and rows clamp at the poles.

/// Source taps `(lo, hi, t)` for output index `o` along an axis of length `n`.
fn taps(o: usize, n: usize, wrap: bool) -> (usize, usize, f64) {
    let k = o / 2;
    if o % 2 == 0 {
        // between k-1 (weight 1/4) and k (weight 3/4)
        let lo = if k == 0 {
            if wrap {
                n - 1
            } else {
                0
            }
        } else {
            k - 1
        };
        (lo, k, 0.75)
    } else {
        // between k (weight 3/4) and k+1 (weight 1/4)
        let hi = if k + 1 == n {
            if wrap {
                0
            } else {
                n - 1
            }
        } else {
            k + 1
        };
        (k, hi, 0.25)
    }
}

/// Interpolate `a + t·(b − a)`; exact when `a == b`.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

pub(crate) fn upsample2(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    let (h2, w2) = (2 * h, 2 * w);
    let rt: Vec<_> = (0..h2).map(|o| taps(o, h, false)).collect();
    let ct: Vec<_> = (0..w2).map(|o| taps(o, w, true)).collect();
    let mut tmp = vec![0.0; w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for (oy, &(r0, r1, ty)) in rt.iter().enumerate() {
            let (a, b) = (&src[r0 * w..(r0 + 1) * w], &src[r1 * w..(r1 + 1) * w]);
            for (ox, &(c0, c1, tx)) in ct.iter().enumerate() {
                tmp[ox] = lerp(lerp(a[c0], a[c1], tx), lerp(b[c0], b[c1], tx), ty);
            }
            dst[oy * w2..(oy + 1) * w2].copy_from_slice(&tmp);
        }
    }
}

pub(crate) fn upsample2_adjoint(gy: &[f64], planes: usize, h: usize, w: usize, gx: &mut [f64]) {
    let (h2, w2) = (2 * h, 2 * w);
    let rt: Vec<_> = (0..h2).map(|o| taps(o, h, false)).collect();
    let ct: Vec<_> = (0..w2).map(|o| taps(o, w, true)).collect();
    for p in 0..planes {
        let g = &gy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(r0, r1, ty)) in rt.iter().enumerate() {
            for (ox, &(c0, c1, tx)) in ct.iter().enumerate() {
                let v = g[oy * w2 + ox];
                let (top, bot) = (v * (1.0 - ty), v * ty);
                dst[r0 * w + c0] += top * (1.0 - tx);
                dst[r0 * w + c1] += top * tx;
                dst[r1 * w + c0] += bot * (1.0 - tx);
                dst[r1 * w + c1] += bot * tx;
            }
        }
    }
}

pub(crate) fn downsample2(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let (a, b) = (&src[2 * oy * w..][..w], &src[(2 * oy + 1) * w..][..w]);
            for ox in 0..wo {
                dst[oy * wo + ox] = (a[2 * ox] + a[2 * ox + 1] + b[2 * ox] + b[2 * ox + 1]) * 0.25;
            }
        }
    }
}

pub(crate) fn downsample2_adjoint(gy: &[f64], planes: usize, h: usize, w: usize, gx: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for p in 0..planes {
        let g = &gy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[oy * wo + ox] * 0.25;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dst[(2 * oy + dy) * w + 2 * ox + dx] += v;
                }
            }
        }
    }
}
