//! Joint training objective: weighted cross entropy, adaptive reverse Huber
//! depth loss with Sobel-gradient terms, margin loss and per-class object loss.
//!
//! Depth tensors are `[B, 1, H, W]`; masks and labels are flat `B·H·W` slices
//! in the same order.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Graph, Padding, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Fraction of the batch's maximum absolute error used as the berHu threshold.
pub const THRESHOLD_FRACTION: f64 = 0.2;
/// Lower bound on the maxima feeding the thresholds, keeping them positive.
pub const THRESHOLD_FLOOR: f64 = 1e-6;

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

fn mask_tensor(shape: &[usize], mask: &[bool]) -> Tensor {
    Tensor::new(shape, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).expect("mask shape")
}

/// Mean reverse Huber penalty of `errors` over the elements selected by `mask`.
pub fn reverse_huber(g: &mut Graph, errors: Var, c: f64, mask: Option<&[bool]>) -> Result<Var> {
    if !(c > 0.0) {
        return Err(arg_err("reverse_huber", format!("threshold must be positive, got {c}")));
    }
    let b = g.reverse_huber(errors, c)?;
    let (selected, count) = match mask {
        Some(m) => {
            if m.len() != g.value(errors).len() {
                return Err(shape_err("reverse_huber", "mask length differs from error tensor"));
            }
            let n = m.iter().filter(|&&v| v).count();
            let mt = g.constant(mask_tensor(g.shape(errors), m));
            (g.mul(b, mt)?, n)
        }
        None => (b, g.value(errors).len()),
    };
    if count == 0 {
        return Err(Error::Empty {
            op: "reverse_huber",
            detail: "no valid elements".into(),
        });
    }
    let s = g.sum(selected);
    Ok(g.mul_const(s, 1.0 / count as f64))
}

/// Pixels whose whole 3×3 neighbourhood (with the given padding) is valid.
pub fn erode_mask(mask: &[bool], b: usize, h: usize, w: usize, padding: Padding) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for bi in 0..b {
        let plane = &mask[bi * h * w..(bi + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                let mut ok = true;
                'win: for dr in -1isize..=1 {
                    let rr = r as isize + dr;
                    let rr = match padding {
                        Padding::CircularHReplicateV => rr.clamp(0, h as isize - 1),
                        Padding::Circular => rr.rem_euclid(h as isize),
                    } as usize;
                    for dc in -1isize..=1 {
                        let cc = (c as isize + dc).rem_euclid(w as isize) as usize;
                        if !plane[rr * w + cc] {
                            ok = false;
                            break 'win;
                        }
                    }
                }
                out[bi * h * w + r * w + c] = ok;
            }
        }
    }
    out
}

fn masked_abs_max(t: &Tensor, mask: &[bool]) -> f64 {
    t.data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold(0.0f64, |a, (v, _)| a.max(v.abs()))
}

/// Result of [`depth_loss`].
#[derive(Clone, Copy, Debug)]
pub struct DepthLoss {
    pub loss: Var,
    /// Threshold applied to the depth error.
    pub c1: f64,
    /// Threshold applied to both gradient errors.
    pub c2: f64,
}

/// `B_c1(e) + B_c2(∇x) + B_c2(∇y)` with batch-adaptive thresholds.
///
/// Gradients are Sobel responses of `pred − gt`; windows touching an invalid
/// pixel are excluded from the gradient terms. Thresholds are constants for
/// backpropagation.
pub fn depth_loss(g: &mut Graph, pred: Var, gt: &Tensor, mask: &[bool], padding: Padding) -> Result<DepthLoss> {
    depth_loss_impl(g, pred, gt, mask, padding, None)
}

/// [`depth_loss`] with caller-supplied thresholds `(c1, c2)`.
pub fn depth_loss_fixed(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    mask: &[bool],
    padding: Padding,
    c1: f64,
    c2: f64,
) -> Result<DepthLoss> {
    depth_loss_impl(g, pred, gt, mask, padding, Some((c1, c2)))
}

fn depth_loss_impl(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    mask: &[bool],
    padding: Padding,
    fixed: Option<(f64, f64)>,
) -> Result<DepthLoss> {
    let [b, c, h, w] = g.value(pred).dims4("depth_loss")?;
    if gt.shape() != g.shape(pred) || c != 1 || mask.len() != gt.len() {
        return Err(shape_err(
            "depth_loss",
            format!("pred {:?}, gt {:?}, mask {}", g.shape(pred), gt.shape(), mask.len()),
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty {
            op: "depth_loss",
            detail: "no valid depth pixels".into(),
        });
    }
    let gtv = g.constant(gt.clone());
    let diff = g.sub(pred, gtv)?;
    let c1 = match fixed {
        Some((c1, _)) => c1,
        None => THRESHOLD_FRACTION * masked_abs_max(g.value(diff), mask).max(THRESHOLD_FLOOR),
    };
    let mut loss = reverse_huber(g, diff, c1, Some(mask))?;

    let kx = g.constant(Tensor::new(&[1, 1, 3, 3], SOBEL_X.to_vec())?);
    let ky = g.constant(Tensor::new(&[1, 1, 3, 3], SOBEL_Y.to_vec())?);
    let gx = g.conv2d(diff, kx, None, 1, padding)?;
    let gy = g.conv2d(diff, ky, None, 1, padding)?;
    let gmask = erode_mask(mask, b, h, w, padding);
    let mut c2 = fixed.map_or(THRESHOLD_FRACTION * THRESHOLD_FLOOR, |f| f.1);
    if gmask.iter().any(|&m| m) {
        if fixed.is_none() {
            let m = masked_abs_max(g.value(gx), &gmask).max(masked_abs_max(g.value(gy), &gmask));
            c2 = THRESHOLD_FRACTION * m.max(THRESHOLD_FLOOR);
        }
        let tx = reverse_huber(g, gx, c2, Some(&gmask))?;
        let ty = reverse_huber(g, gy, c2, Some(&gmask))?;
        loss = g.add(loss, tx)?;
        loss = g.add(loss, ty)?;
    }
    Ok(DepthLoss { loss, c1, c2 })
}

fn masked_extrema(data: &[f64], mask: &[bool]) -> Option<(f64, f64)> {
    data.iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold(None, |acc, (&v, _)| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
}

fn margin_term(g: &mut Graph, pred: Var, gt: &[f64], mask: &[bool]) -> Result<Option<Var>> {
    let Some((gmin, gmax)) = masked_extrema(gt, mask) else { return Ok(None) };
    let pmax = g.masked_max(pred, Some(mask))?;
    let pmin = g.masked_min(pred, Some(mask))?;
    let tmax = g.constant(Tensor::scalar(gmax));
    let tmin = g.constant(Tensor::scalar(gmin));
    let dmax = g.sub(tmax, pmax)?;
    let dmin = g.sub(tmin, pmin)?;
    let a = g.square(dmax);
    let b = g.square(dmin);
    let s = g.add(a, b)?;
    Ok(Some(g.mul_const(s, 0.5)))
}

/// Squared mismatch of the predicted and true depth extrema, halved.
///
/// With `per_image` the extrema are taken per image and the terms averaged;
/// otherwise over the whole batch.
pub fn margin_loss(g: &mut Graph, pred: Var, gt: &Tensor, mask: &[bool], per_image: bool) -> Result<Var> {
    let [b, _, h, w] = g.value(pred).dims4("margin_loss")?;
    if gt.shape() != g.shape(pred) || mask.len() != gt.len() {
        return Err(shape_err("margin_loss", "pred, gt and mask must agree"));
    }
    if !per_image {
        return margin_term(g, pred, gt.data(), mask)?.ok_or_else(|| Error::Empty {
            op: "margin_loss",
            detail: "no valid depth pixels".into(),
        });
    }
    let hw = h * w;
    let mut terms = Vec::new();
    for bi in 0..b {
        // restrict to one image by masking the others out
        let mut m = vec![false; mask.len()];
        m[bi * hw..(bi + 1) * hw].copy_from_slice(&mask[bi * hw..(bi + 1) * hw]);
        if let Some(t) = margin_term(g, pred, gt.data(), &m)? {
            terms.push(t);
        }
    }
    let n = terms.len();
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::Empty {
        op: "margin_loss",
        detail: "no valid depth pixels".into(),
    })?;
    let mut acc = first;
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(g.mul_const(acc, 1.0 / n as f64))
}

/// Mean over present classes of the per-class mean absolute depth error.
///
/// A class is present when at least one valid pixel carries its ground-truth
/// label; absent classes are left out of the average. Returns 0 when no class
/// is present.
pub fn object_loss(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    labels: &[u8],
    mask: &[bool],
    num_classes: usize,
) -> Result<Var> {
    if gt.shape() != g.shape(pred) || labels.len() != gt.len() || mask.len() != gt.len() {
        return Err(shape_err("object_loss", "pred, gt, labels and mask must agree"));
    }
    let gtv = g.constant(gt.clone());
    let diff = g.sub(pred, gtv)?;
    let err = g.abs(diff);
    let mut terms = Vec::new();
    for class in 0..num_classes {
        let m: Vec<bool> = labels.iter().zip(mask).map(|(&l, &v)| v && l as usize == class).collect();
        let n = m.iter().filter(|&&v| v).count();
        if n == 0 {
            continue;
        }
        let mt = g.constant(mask_tensor(gt.shape(), &m));
        let e = g.mul(err, mt)?;
        let s = g.sum(e);
        terms.push(g.mul_const(s, 1.0 / n as f64));
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.mul_const(acc, 1.0 / n as f64))
}

/// Class-weighted softmax cross entropy, ignoring [`IGNORE_LABEL`] pixels.
pub fn seg_loss(g: &mut Graph, logits: Var, labels: &[u8], class_weights: &[f64]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels, class_weights, IGNORE_LABEL)
}

/// Relative weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// `[segmentation, depth, margin, object]`.
    pub alpha: [f64; 4],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: [9.0, 14.0, 0.01, 5.0],
        }
    }
}

impl LossWeights {
    pub fn new(alpha: [f64; 4]) -> Result<Self> {
        if alpha.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(arg_err("loss_weights", format!("weights must be finite and non-negative, got {alpha:?}")));
        }
        Ok(Self { alpha })
    }
}

/// Individual loss terms of one batch; `None` marks a term that was not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub seg: Option<Var>,
    pub dep: Option<Var>,
    pub mar: Option<Var>,
    pub obj: Option<Var>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
}

/// Loss terms plus their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub components: LossComponents,
    pub total: Var,
}

/// Scalar values of a [`LossBundle`], for logging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_seg: Option<f64>,
    pub l_dep: Option<f64>,
    pub l_mar: Option<f64>,
    pub l_obj: Option<f64>,
    pub l_total: f64,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
}

impl LossBundle {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Option<Var>| x.map(|x| g.value(x).item());
        LossValues {
            l_seg: v(self.components.seg),
            l_dep: v(self.components.dep),
            l_mar: v(self.components.mar),
            l_obj: v(self.components.obj),
            l_total: g.value(self.total).item(),
            c1: self.components.c1,
            c2: self.components.c2,
        }
    }
}

/// `α₁·seg + α₂·dep + α₃·mar + α₄·obj` over the computed terms.
///
/// Terms with zero weight are left out of the graph so they pass no gradient.
pub fn total_loss(g: &mut Graph, components: LossComponents, weights: &LossWeights) -> Result<LossBundle> {
    let terms = [components.seg, components.dep, components.mar, components.obj];
    let mut total: Option<Var> = None;
    for (term, &alpha) in terms.iter().zip(&weights.alpha) {
        let Some(t) = *term else { continue };
        if alpha == 0.0 {
            continue;
        }
        let scaled = g.mul_const(t, alpha);
        total = Some(match total {
            Some(acc) => g.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(LossBundle { components, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erosion_drops_neighbours_of_invalid() {
        let mut m = vec![true; 4 * 8];
        m[2 * 8 + 3] = false;
        let e = erode_mask(&m, 1, 4, 8, Padding::CircularHReplicateV);
        let dropped: Vec<usize> = (0..32).filter(|&i| !e[i]).collect();
        assert_eq!(dropped, vec![10, 11, 12, 18, 19, 20, 26, 27, 28]);
        // wrap: an invalid pixel in column 0 drops column 7 too
        let mut m = vec![true; 4 * 8];
        m[8] = false;
        let e = erode_mask(&m, 1, 4, 8, Padding::CircularHReplicateV);
        assert!(!e[15] && !e[7] && !e[23]);
    }

    #[test]
    fn zero_weight_terms_are_skipped() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let comps = LossComponents {
            seg: Some(a),
            dep: Some(b),
            ..Default::default()
        };
        let bundle = total_loss(&mut g, comps, &LossWeights::new([1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        g.backward(bundle.total).unwrap();
        assert_eq!(g.value(bundle.total).item(), 2.0);
        assert!(g.grad(b).is_none());
    }
}
