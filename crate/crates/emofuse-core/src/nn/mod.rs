//! Minimal deterministic neural-network engine.
//!
//! Layers carry their own parameters, gradients, and backward caches.
//! Everything is generic over the element type: training runs in `f32`,
//! while the finite-difference gradient checker instantiates the same
//! code in `f64`. All random draws happen in `f64` and are cast, so the
//! two precisions consume identical random streams.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;

pub use gradcheck::{grad_check, GradCheckResult};
pub use layers::{
    apply_mask, concat_cols, masked_mean_pool, masked_mean_pool_backward, split_cols, BatchNorm,
    Conv1d, Dense, Dropout, Relu2, Relu3,
};
pub use loss::{softmax_rows, weighted_softmax_xent};
pub use optim::{lr_at, Adam, AdamConfig};

use crate::error::{Error, Result};
use crate::manifest::EmotionLabel;
use crate::util::Rng;
use ndarray::{Array2, Array3};
use std::ops::{AddAssign, DivAssign, MulAssign, Neg, SubAssign};

/// Element type for network math: `f32` for training, `f64` for gradient
/// checking.
pub trait Scalar:
    ndarray::LinalgScalar
    + PartialOrd
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + std::fmt::Debug
    + Send
    + Sync
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// A padded batch of sequences. Valid steps form a prefix of each row and
/// padded positions hold zeros.
#[derive(Debug, Clone)]
pub struct MaskedBatch<S: Scalar> {
    /// B × T × D.
    pub values: Array3<S>,
    /// B × T; true marks a real step.
    pub mask: Array2<bool>,
    /// One label per row when training or scoring.
    pub labels: Option<Vec<EmotionLabel>>,
}

impl<S: Scalar> MaskedBatch<S> {
    pub fn new(
        values: Array3<S>,
        mask: Array2<bool>,
        labels: Option<Vec<EmotionLabel>>,
    ) -> Result<Self> {
        let (b, t, _) = values.dim();
        if mask.dim() != (b, t) {
            return Err(Error::shape(
                "MaskedBatch::new",
                format!("mask {:?} does not match values {:?}", mask.dim(), values.dim()),
            ));
        }
        for (row, mrow) in mask.rows().into_iter().enumerate() {
            let mut seen_pad = false;
            let mut any_valid = false;
            for &m in mrow {
                if m {
                    if seen_pad {
                        return Err(Error::shape(
                            "MaskedBatch::new",
                            format!("row {row}: valid step after padding (mask must be a prefix)"),
                        ));
                    }
                    any_valid = true;
                } else {
                    seen_pad = true;
                }
            }
            if !any_valid {
                return Err(Error::shape(
                    "MaskedBatch::new",
                    format!("row {row} has no valid steps"),
                ));
            }
        }
        if let Some(ref l) = labels {
            if l.len() != b {
                return Err(Error::shape(
                    "MaskedBatch::new",
                    format!("{} labels for {b} rows", l.len()),
                ));
            }
        }
        Ok(MaskedBatch {
            values,
            mask,
            labels,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.values.dim().0
    }

    pub fn seq_len(&self) -> usize {
        self.values.dim().1
    }

    pub fn valid_len(&self, row: usize) -> usize {
        self.mask.row(row).iter().filter(|&&m| m).count()
    }
}

/// One parameter or state tensor surfaced during a model walk.
pub struct ParamVisit<'a, S: Scalar> {
    /// Dotted path, e.g. `text.conv1.weight`.
    pub name: String,
    pub dims: Vec<usize>,
    pub value: &'a mut [S],
    /// Gradient buffer; `None` for non-trainable state such as batchnorm
    /// running statistics.
    pub grad: Option<&'a mut [S]>,
    pub frozen: bool,
}

/// Anything that exposes its parameters in a stable canonical order.
///
/// The walk order defines the optimizer state layout, the checkpoint
/// layout, and the gradient-checker layout, so it must never depend on
/// runtime state.
pub trait ParamHost<S: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamVisit<'_, S>));
}

/// Set every gradient buffer of the host to zero.
pub fn zero_grads<S: Scalar, M: ParamHost<S> + ?Sized>(model: &mut M) {
    model.visit_params(&mut |p| {
        if let Some(g) = p.grad {
            for v in g {
                *v = S::ZERO;
            }
        }
    });
}

/// Copy out every gradient-free buffer (batch-norm running statistics),
/// keyed by parameter name. Pairs with [`restore_buffers`] to make a
/// training forward repeatable without side effects.
pub fn snapshot_buffers<S: Scalar, M: ParamHost<S> + ?Sized>(model: &mut M) -> Vec<(String, Vec<S>)> {
    let mut snap = Vec::new();
    model.visit_params(&mut |p| {
        if p.grad.is_none() {
            snap.push((p.name.clone(), p.value.to_vec()));
        }
    });
    snap
}

/// Write back buffers captured by [`snapshot_buffers`]. Panics on a
/// mismatched snapshot.
pub fn restore_buffers<S: Scalar, M: ParamHost<S> + ?Sized>(model: &mut M, snap: &[(String, Vec<S>)]) {
    let mut i = 0usize;
    model.visit_params(&mut |p| {
        if p.grad.is_none() {
            let (name, values) = &snap[i];
            assert_eq!(&p.name, name, "buffer snapshot order mismatch");
            assert_eq!(p.value.len(), values.len(), "buffer snapshot size mismatch");
            p.value.copy_from_slice(values);
            i += 1;
        }
    });
    assert_eq!(i, snap.len(), "buffer snapshot length mismatch");
}

/// Draw a fan-balanced uniform weight matrix: entries i.i.d. on [−a, a]
/// with a = sqrt(6 / (fan_in + fan_out)). Draw order is row-major and in
/// `f64`, so `f32` and `f64` instantiations see the same stream.
pub fn xavier_uniform<S: Scalar>(fan_in: usize, fan_out: usize, len: usize, rng: &mut Rng) -> Vec<S> {
    assert!(fan_in > 0 && fan_out > 0, "fans must be positive");
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len)
        .map(|_| S::from_f64((crate::util::uniform_f64(rng) * 2.0 - 1.0) * a))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derive_rng;
    use ndarray::Array3;

    #[test]
    fn masked_batch_accepts_prefix_masks() {
        let values = Array3::<f32>::zeros((2, 3, 4));
        let mask = Array2::from_shape_vec((2, 3), vec![true, true, false, true, true, true]).unwrap();
        assert!(MaskedBatch::new(values, mask, None).is_ok());
    }

    #[test]
    fn masked_batch_rejects_interior_padding() {
        let values = Array3::<f32>::zeros((1, 3, 2));
        let mask = Array2::from_shape_vec((1, 3), vec![true, false, true]).unwrap();
        assert!(MaskedBatch::new(values, mask, None).is_err());
    }

    #[test]
    fn masked_batch_rejects_empty_rows() {
        let values = Array3::<f32>::zeros((1, 2, 2));
        let mask = Array2::from_shape_vec((1, 2), vec![false, false]).unwrap();
        assert!(MaskedBatch::new(values, mask, None).is_err());
    }

    #[test]
    fn xavier_bound_closed_forms() {
        let mut rng = derive_rng(1, &["xavier"]);
        let a_768_128 = (6.0f64 / 896.0).sqrt();
        assert!((a_768_128 - 0.08184).abs() < 1e-4);
        let v: Vec<f64> = xavier_uniform(1, 2, 10_000, &mut rng);
        let a = (6.0f64 / 3.0).sqrt();
        assert!((a - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!(v.iter().all(|x| x.abs() <= a));
    }

    #[test]
    fn xavier_mean_is_centered() {
        let mut rng = derive_rng(12, &["xavier-mean"]);
        let n = 100_000;
        let v: Vec<f64> = xavier_uniform(768, 128, n, &mut rng);
        let a = (6.0f64 / 896.0).sqrt();
        let mean = v.iter().sum::<f64>() / n as f64;
        let bound = 3.0 * a / (12.0 * n as f64).sqrt();
        assert!(mean.abs() < bound, "mean {mean} vs bound {bound}");
    }

    #[test]
    fn xavier_streams_match_across_precisions() {
        let v32: Vec<f32> = xavier_uniform(8, 8, 64, &mut derive_rng(3, &["x"]));
        let v64: Vec<f64> = xavier_uniform(8, 8, 64, &mut derive_rng(3, &["x"]));
        for (a, b) in v32.iter().zip(&v64) {
            assert_eq!(*a, *b as f32);
        }
    }
}
