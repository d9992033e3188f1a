//! Fusion classifier and learned upsampling.
//!
//! The expression vector is tiled over the feature grid and concatenated to
//! every location's descriptor; two 1x1 convolutions with a ReLU between them
//! score each location; a `2s x 2s` stride-`s` transposed convolution brings
//! the coarse scores back to pixel resolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const CLS1_WEIGHT: &str = "fusion.cls1.weight";
pub const CLS1_BIAS: &str = "fusion.cls1.bias";
pub const CLS2_WEIGHT: &str = "fusion.cls2.weight";
pub const CLS2_BIAS: &str = "fusion.cls2.bias";
pub const DECONV_WEIGHT: &str = "fusion.deconv.weight";

/// Resolution of a score map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    /// One score per feature-grid cell (`h x w`).
    Coarse,
    /// One score per input pixel (`H x W`).
    High,
}

/// Per-pixel scores `[1, rows, cols]`; positive means foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub scores: Tensor,
    pub resolution: Resolution,
}

impl ResponseMap {
    pub fn extents(&self) -> (usize, usize) {
        let s = self.scores.shape();
        (s[1], s[2])
    }
}

/// Glorot-uniform 1x1 classifier layers with zero biases. `d_star` is the
/// fused width `D_im + 2 + D_text`.
pub fn init_classifier<R: Rng + ?Sized>(params: &mut ParamStore, d_star: usize, d_cls: usize, rng: &mut R) {
    let b1 = (6.0 / (d_star + d_cls) as f64).sqrt();
    params.insert(CLS1_WEIGHT, Tensor::uniform(&[d_cls, d_star, 1, 1], b1, rng));
    params.insert(CLS1_BIAS, Tensor::zeros(&[d_cls]));
    let b2 = (6.0 / (d_cls + 1) as f64).sqrt();
    params.insert(CLS2_WEIGHT, Tensor::uniform(&[1, d_cls, 1, 1], b2, rng));
    params.insert(CLS2_BIAS, Tensor::zeros(&[1]));
}

/// Tent kernel `k[i][j] = (1 - |i - c|/s)(1 - |j - c|/s)` with `c = (2s - 1)/2`,
/// shaped `[1, 1, 2s, 2s]`.
pub fn make_bilinear_filter(stride: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::contract("make_bilinear_filter", "stride must be at least 1"));
    }
    let k = 2 * stride;
    let c = (k as f64 - 1.0) / 2.0;
    let profile: Vec<f64> = (0..k).map(|i| 1.0 - (i as f64 - c).abs() / stride as f64).collect();
    let data = profile.iter().flat_map(|&a| profile.iter().map(move |&b| a * b)).collect();
    Tensor::new(vec![1, 1, k, k], data)
}

/// `[descriptor; coordinates; h_T]` at every grid location.
pub fn tile_and_concat(tape: &mut Tape, fmap: Var, text: Var) -> Result<Var> {
    let (_, h, w) = tape.value(fmap).chw()?;
    if tape.value(text).rank() != 1 {
        return Err(Error::dim("tile_and_concat", format!("text vector has shape {:?}", tape.value(text).shape())));
    }
    let tiled = tape.tile(text, h, w)?;
    tape.concat(fmap, tiled)
}

/// 1x1 conv, ReLU, 1x1 conv: `[D*, h, w] -> [1, h, w]`.
pub fn classify(tape: &mut Tape, bound: &Bound, fused: Var) -> Result<Var> {
    let (c, _, _) = tape.value(fused).chw()?;
    let w1 = bound.var(CLS1_WEIGHT)?;
    let expected = tape.value(w1).shape()[1];
    if c != expected {
        return Err(Error::dim("classify", format!("fused input has {c} channels, classifier expects {expected}")));
    }
    let hidden = tape.conv2d(fused, w1, bound.var(CLS1_BIAS)?, 1, 0)?;
    let hidden = tape.relu(hidden);
    tape.conv2d(hidden, bound.var(CLS2_WEIGHT)?, bound.var(CLS2_BIAS)?, 1, 0)
}

/// Transposed convolution with stride `s`, filter side `2s` and a symmetric
/// crop of `s/2`, so an `h x w` grid maps to exactly `hs x ws` pixels.
pub fn upsample(tape: &mut Tape, coarse: Var, filter: Var, stride: usize, target: (usize, usize)) -> Result<Var> {
    let (_, h, w) = tape.value(coarse).chw()?;
    if stride == 0 || (stride > 1 && !stride.is_multiple_of(2)) {
        return Err(Error::contract("upsample", format!("stride {stride} must be even")));
    }
    if (h * stride, w * stride) != target {
        return Err(Error::dim(
            "upsample",
            format!("coarse {h}x{w} at stride {stride} does not cover target {}x{}", target.0, target.1),
        ));
    }
    let side = tape.value(filter).shape().get(2).copied().unwrap_or(0);
    if side != 2 * stride {
        return Err(Error::dim("upsample", format!("filter side {side}, expected {}", 2 * stride)));
    }
    // A stride of 1 would need a half-pixel crop; a 1x1-stride map is already at full resolution.
    if stride == 1 {
        return Ok(coarse);
    }
    tape.conv_transpose2d(coarse, filter, stride, stride / 2)
}

/// Foreground iff the score is strictly positive.
pub fn decide(scores: &Tensor) -> Result<Mask> {
    let (h, w) = match scores.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::dim("decide", format!("expected a single-channel map, got {s:?}"))),
    };
    Mask::new(h, w, scores.data().iter().map(|&v| v > 0.0).collect())
}
