//! Evaluation of models and baselines at the original image size.

use std::time::Instant;

use crate::baselines::{combine_perword, perword_fallback, whole_image_baseline, Combine, PerWordModel};
use crate::data::Sample;
use crate::error::Result;
use crate::fusion::{decide, Resolution};
use crate::mask::Mask;
use crate::metrics::{map_back, resize_and_pad, EvalAccumulator, EvalReport, PadGeometry};
use crate::model::SegModel;
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Model(&'a SegModel),
    WholeImage,
    PerWord(&'a PerWordModel, Combine),
}

impl Method<'_> {
    pub fn name(&self) -> String {
        match self {
            Method::Model(_) => "model".into(),
            Method::WholeImage => "whole-image".into(),
            Method::PerWord(_, c) => format!("perword:{c}"),
        }
    }
}

/// Fits `image` into `size = (W, H)` and returns the padded image with its
/// geometry.
fn fit(image: &Tensor, size: (usize, usize)) -> Result<(Tensor, PadGeometry)> {
    let (_, h, w) = image.chw()?;
    let (img, _, geom) = resize_and_pad(image, &Mask::empty(h, w), size)?;
    Ok((img, geom))
}

/// High-resolution scores of the model mapped back to the image's own size,
/// `[1, H0, W0]`.
pub fn model_scores(model: &SegModel, image: &Tensor, expression: &str, size: (usize, usize)) -> Result<Tensor> {
    let (img, geom) = fit(image, size)?;
    let r = model.response(&img, &model.encode(expression), Resolution::High)?;
    map_back(&r.scores, &geom)
}

/// A prediction at the original size and whether a baseline fell back.
pub fn predict(method: Method<'_>, image: &Tensor, expression: &str, size: (usize, usize)) -> Result<(Mask, bool)> {
    let (_, h, w) = image.chw()?;
    match method {
        Method::Model(m) => Ok((decide(&model_scores(m, image, expression, size)?)?, false)),
        Method::WholeImage => Ok((whole_image_baseline(h, w), false)),
        Method::PerWord(m, mode) => {
            let known = m.known_words(expression);
            if known.is_empty() {
                return Ok((perword_fallback(h, w), true));
            }
            let (img, geom) = fit(image, size)?;
            let maps = m
                .word_maps(&img, &known)?
                .iter()
                .map(|s| map_back(s, &geom))
                .collect::<Result<Vec<_>>>()?;
            Ok((combine_perword(&maps, mode)?, false))
        }
    }
}

/// Scores every sample (in parallel when enabled) and pools the counts.
pub fn evaluate(method: Method<'_>, samples: &[Sample], size: (usize, usize)) -> Result<EvalReport> {
    let results = par::map(samples, |s| {
        let t = Instant::now();
        let (mask, fallback) = predict(method, &s.image, &s.expression, size)?;
        Ok((crate::metrics::iou(&mask, &s.mask)?, fallback, t.elapsed().as_secs_f64()))
    });
    let mut acc = EvalAccumulator::new();
    let (mut fallbacks, mut seconds) = (0usize, 0.0);
    for r in results {
        let (iou, fb, secs) = r?;
        acc.push(iou);
        fallbacks += fb as usize;
        seconds += secs;
    }
    let mut report = EvalReport::from_accumulator(method.name(), &acc, 1000.0 * seconds / samples.len().max(1) as f64)?;
    if let Method::PerWord(..) = method {
        report.fallback_rate = Some(fallbacks as f64 / samples.len() as f64);
    }
    Ok(report)
}
