//! Detection losses over the per-anchor head outputs.
//!
//! Classification maps are `(1, 2K, h, w)` with channels `(2k, 2k + 1)` being
//! the (background, face) logits of anchor size `k`; regression maps are
//! `(1, 4K, h, w)` with channels `4k..4k + 4` holding `(tx, ty, tw, th)`.
//! Anchor `a = k * h * w + i * w + j` follows the anchor grid ordering.

use crate::error::{Error, Result};
use crate::geometry::Delta;
use crate::net::{Real, Tensor};
use crate::targets::{AnchorLabel, OhemSelection};

fn cells<T: Real>(t: &Tensor<T>) -> usize {
    t.h() * t.w()
}

pub fn cls_offsets<T: Real>(cls: &Tensor<T>, anchor: usize) -> (usize, usize) {
    let cells = cells(cls);
    let (k, cell) = (anchor / cells, anchor % cells);
    ((2 * k) * cells + cell, (2 * k + 1) * cells + cell)
}

pub fn reg_offset<T: Real>(reg: &Tensor<T>, anchor: usize, component: usize) -> usize {
    let cells = cells(reg);
    let (k, cell) = (anchor / cells, anchor % cells);
    (4 * k + component) * cells + cell
}

fn check_layout<T: Real>(t: &Tensor<T>, per_anchor: usize, anchors: usize, what: &str) -> Result<()> {
    if t.n() != 1 || !t.c().is_multiple_of(per_anchor) || t.c() / per_anchor * cells(t) != anchors {
        return Err(Error::Shape(format!(
            "{what} map {:?} does not hold {anchors} anchors",
            t.shape()
        )));
    }
    Ok(())
}

/// Mean two-class softmax cross-entropy over the selected anchors.
/// Positives target class 1, negatives class 0. Returns the loss and its
/// gradient with respect to `cls`; unselected anchors get zero gradient.
pub fn softmax_ce_loss<T: Real>(
    cls: &Tensor<T>,
    labels: &[AnchorLabel],
    selection: &OhemSelection,
) -> Result<(T, Tensor<T>)> {
    check_layout(cls, 2, labels.len(), "classification")?;
    let mut grad = Tensor::zeros(cls.shape());
    if selection.is_empty() {
        return Ok((T::zero(), grad));
    }
    let scale = T::one() / T::from_usize(selection.len()).expect("count fits");
    let mut loss = T::zero();
    for a in selection.iter() {
        let target_face = match labels.get(a) {
            Some(AnchorLabel::Positive) => true,
            Some(AnchorLabel::Negative) => false,
            _ => {
                return Err(Error::InvalidInput(format!(
                    "selected anchor {a} is not labeled positive or negative"
                )))
            }
        };
        let (ob, of) = cls_offsets(cls, a);
        let (lb, lf) = (cls.data()[ob], cls.data()[of]);
        let m = lb.max(lf);
        let (eb, ef) = ((lb - m).exp(), (lf - m).exp());
        let log_z = m + (eb + ef).ln();
        let (pb, pf) = (eb / (eb + ef), ef / (eb + ef));
        let (target, yb, yf) = if target_face {
            (lf, T::zero(), T::one())
        } else {
            (lb, T::one(), T::zero())
        };
        loss += log_z - target;
        let g = grad.data_mut();
        g[ob] = (pb - yb) * scale;
        g[of] = (pf - yf) * scale;
    }
    Ok((loss * scale, grad))
}

fn smooth_l1<T: Real>(x: T) -> (T, T) {
    let half = T::from_f64_lossy(0.5);
    if x.abs() < T::one() {
        (half * x * x, x)
    } else {
        (x.abs() - half, x.signum())
    }
}

/// Smooth L1 over the four delta components, summed per anchor and averaged
/// over the anchors in `mask`.
pub fn smooth_l1_loss<T: Real>(reg: &Tensor<T>, targets: &[Delta], mask: &[bool]) -> Result<(T, Tensor<T>)> {
    check_layout(reg, 4, targets.len(), "regression")?;
    if mask.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} targets but {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let mut grad = Tensor::zeros(reg.shape());
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let scale = T::one() / T::from_usize(count).expect("count fits");
    let mut loss = T::zero();
    for (a, target) in targets.iter().enumerate().filter(|&(a, _)| mask[a]) {
        for (c, t) in target.to_array().into_iter().enumerate() {
            let o = reg_offset(reg, a, c);
            let (f, df) = smooth_l1(reg.data()[o] - T::from_f64_lossy(t));
            loss += f;
            grad.data_mut()[o] = df * scale;
        }
    }
    Ok((loss * scale, grad))
}
