//! Segmentation and distillation objectives.
//!
//! The kernels here work on plain tensors; the tape wraps them as graph ops
//! (see [`crate::autograd::Tape::focal_loss`] and [`crate::autograd::Tape::mse`]).

use crate::error::{Error, Result};
use crate::teacher::AttentionMapSet;
use crate::tensor::{Real, Tensor};

/// Clamp applied to `p_t` before the logarithm.
pub const FOCAL_EPS: f64 = 1e-7;

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[inline]
fn p_t<T: Real>(p: T, y: T) -> T {
    if y > T::c(0.5) {
        p
    } else {
        T::one() - p
    }
}

/// Mean over pixels of `-alpha (1 - p_t)^gamma ln p_t`, with `p_t = p` on
/// foreground and `1 - p` on background, clamped to `[eps, 1 - eps]`.
pub fn focal_value<T: Real>(prob: &Tensor<T>, target: &Tensor<T>, gamma: T, alpha: T) -> Result<T> {
    check_same_shape(prob, target, "focal loss")?;
    if prob.is_empty() {
        return Err(Error::Shape("focal loss over an empty map".into()));
    }
    let eps = T::c(FOCAL_EPS);
    let total: T = prob
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let pt = p_t(p, y).max(eps).min(T::one() - eps);
            -alpha * (T::one() - pt).powf(gamma) * pt.ln()
        })
        .sum();
    Ok(total / T::c(prob.len() as f64))
}

/// Gradient of [`focal_value`] with respect to `prob`.
pub fn focal_grad<T: Real>(prob: &Tensor<T>, target: &Tensor<T>, gamma: T, alpha: T) -> Vec<T> {
    let eps = T::c(FOCAL_EPS);
    let n = T::c(prob.len() as f64);
    prob.data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let raw = p_t(p, y);
            if raw < eps || raw > T::one() - eps {
                return T::zero();
            }
            let q = T::one() - raw;
            let mut d = q.powf(gamma) / raw;
            if gamma != T::zero() {
                d = d - gamma * q.powf(gamma - T::one()) * raw.ln();
            }
            let d = -alpha * d / n;
            if y > T::c(0.5) {
                d
            } else {
                -d
            }
        })
        .collect()
}

/// Pixel-mean squared error.
pub fn mse_value<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    check_same_shape(a, b, "mse")?;
    if a.is_empty() {
        return Err(Error::Shape("mse over an empty map".into()));
    }
    let total: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(total / T::c(a.len() as f64))
}

/// Focal segmentation loss of a probability map against a binary mask.
pub fn focal_loss<T: Real>(prob: &Tensor<T>, target: &Tensor<T>, gamma: T, alpha: T) -> Result<T> {
    focal_value(prob, target, gamma, alpha)
}

/// Layer-averaged MSE between teacher attention maps and distilled maps.
pub fn distill_loss<T: Real>(teacher: &AttentionMapSet<T>, student: &AttentionMapSet<T>) -> Result<T> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "distillation: teacher has {} layers, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if teacher.is_empty() {
        return Err(Error::Shape("distillation over zero layers".into()));
    }
    let mut total = T::zero();
    for (i, (t, s)) in teacher.layers().iter().zip(student.layers()).enumerate() {
        if t.map.shape() != s.map.shape() || t.scale != s.scale {
            return Err(Error::Shape(format!(
                "distillation layer {i}: teacher {:?} at 1/{}, student {:?} at 1/{}",
                t.map.shape(),
                t.scale,
                s.map.shape(),
                s.scale
            )));
        }
        total = total + mse_value(&t.map, &s.map)?;
    }
    Ok(total / T::c(teacher.len() as f64))
}

/// Relative weights of the composite objective's three terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub distill: f64,
    pub student_seg: f64,
    pub teacher_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { distill: 1.0, student_seg: 1.0, teacher_seg: 1.0 }
    }
}

/// The three terms of the composite objective and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeTerms<T> {
    pub distill: Option<T>,
    pub student_seg: T,
    pub teacher_seg: T,
    pub total: T,
}

/// `L_dist + L_seg(student) + L_seg(teacher)`; the distillation term is
/// skipped entirely when `student_maps` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss<T: Real>(
    teacher_prob: &Tensor<T>,
    student_prob: &Tensor<T>,
    target: &Tensor<T>,
    teacher_maps: &AttentionMapSet<T>,
    student_maps: Option<&AttentionMapSet<T>>,
    gamma: T,
    alpha: T,
    weights: LossWeights,
) -> Result<CompositeTerms<T>> {
    let teacher_seg = focal_value(teacher_prob, target, gamma, alpha)?;
    let student_seg = focal_value(student_prob, target, gamma, alpha)?;
    let distill = student_maps.map(|s| distill_loss(teacher_maps, s)).transpose()?;
    let total = T::c(weights.teacher_seg) * teacher_seg
        + T::c(weights.student_seg) * student_seg
        + distill.map_or(T::zero(), |d| T::c(weights.distill) * d);
    Ok(CompositeTerms { distill, student_seg, teacher_seg, total })
}
