//! Baselines: per-word multi-label segmentation and the whole image.
//!
//! The per-word model shares the visual pathway of the main model but has no
//! expression encoder. A 1x1 convolution scores every listed word at every
//! grid cell, each word trained as an independent category: a foreground
//! pixel's target is the expression's word-presence vector, a background
//! pixel's is all zeros. At inference the known words' maps are upsampled
//! bilinearly and combined by averaging scores, intersecting masks, or taking
//! their union. Expressions without a known word get no segmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneConfig, Coordinates};
use crate::checkpoint::{Checkpoint, Kind};
use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::{self, decide};
use crate::mask::Mask;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{tokenize, Vocabulary};
use crate::train::{self, LogEntry, Stage, TrainConfig, TrainOutcome};

pub const HEAD_WEIGHT: &str = "perword.head.weight";
pub const HEAD_BIAS: &str = "perword.head.bias";

/// Presence indicator of every listed word.
pub fn perword_labels<S: AsRef<str>>(tokens: &[S], words: &[String]) -> Vec<bool> {
    words.iter().map(|w| tokens.iter().any(|t| t.as_ref() == w)).collect()
}

/// Non-stop words of `expressions` by descending frequency (ties
/// alphabetical), capped at `max_words` unless it is 0.
pub fn word_list<'a>(expressions: impl IntoIterator<Item = &'a str>, stopwords: &[String], max_words: usize) -> Vec<String> {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for e in expressions {
        for t in tokenize(e) {
            if !stopwords.contains(&t) {
                *freq.entry(t).or_default() += 1;
            }
        }
    }
    let mut words: Vec<(String, usize)> = freq.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let cap = if max_words == 0 { words.len() } else { max_words.min(words.len()) };
    words.into_iter().take(cap).map(|(w, _)| w).collect()
}

/// Reads a stop-word file: one token per line, blank lines ignored.
pub fn parse_stopwords(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_lowercase).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Average,
    Intersection,
    Union,
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::Average => "average",
            Combine::Intersection => "intersection",
            Combine::Union => "union",
        })
    }
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Combine::Average),
            "intersection" => Ok(Combine::Intersection),
            "union" => Ok(Combine::Union),
            other => Err(Error::format("combine mode", format!("expected average|intersection|union, got {other:?}"))),
        }
    }
}

/// Combines per-word score maps (`[1, H, W]` each).
pub fn combine_perword(maps: &[Tensor], mode: Combine) -> Result<Mask> {
    let first = maps.first().ok_or_else(|| Error::contract("combine_perword", "no known word"))?;
    if let Some(m) = maps.iter().find(|m| m.shape() != first.shape()) {
        return Err(Error::dim("combine_perword", format!("{:?} vs {:?}", m.shape(), first.shape())));
    }
    match mode {
        Combine::Average => {
            let mut sum = vec![0.0; first.len()];
            for m in maps {
                for (s, v) in sum.iter_mut().zip(m.data()) {
                    *s += v;
                }
            }
            let n = maps.len() as f64;
            decide(&Tensor::new(first.shape().to_vec(), sum.into_iter().map(|s| s / n).collect())?)
        }
        Combine::Intersection | Combine::Union => {
            let mut acc = decide(first)?;
            for m in &maps[1..] {
                let d = decide(m)?;
                acc = if mode == Combine::Intersection { acc.and(&d)? } else { acc.or(&d)? };
            }
            Ok(acc)
        }
    }
}

/// The no-known-word outcome: nothing is segmented.
pub fn perword_fallback(height: usize, width: usize) -> Mask {
    Mask::empty(height, width)
}

pub fn whole_image_baseline(height: usize, width: usize) -> Mask {
    Mask::full(height, width)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerWordModel {
    pub backbone: BackboneConfig,
    pub coordinates: Coordinates,
    pub words: Vec<String>,
    pub params: ParamStore,
}

/// A per-word prediction and whether the fallback fired.
#[derive(Clone, Debug, PartialEq)]
pub struct PerWordPrediction {
    pub mask: Mask,
    pub fallback: bool,
}

impl PerWordModel {
    pub fn init(backbone: BackboneConfig, coordinates: Coordinates, words: Vec<String>, seed: u64) -> Result<Self> {
        backbone.validate()?;
        if words.is_empty() {
            return Err(Error::contract("perword", "empty word list"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&mut params, &backbone, &mut rng);
        let d = backbone.d_im() + 2;
        let n = words.len();
        let bound = (6.0 / (d + n) as f64).sqrt();
        params.insert(HEAD_WEIGHT, Tensor::uniform(&[n, d, 1, 1], bound, &mut rng));
        params.insert(HEAD_BIAS, Tensor::zeros(&[n]));
        Ok(PerWordModel { backbone, coordinates, words, params })
    }

    /// `[N, H/s, W/s]` word scores.
    pub fn forward_coarse(&self, tape: &mut Tape, bound: &Bound, image: &Tensor) -> Result<Var> {
        let img = tape.constant(image.clone());
        let features = backbone::visual_features(tape, bound, img, &self.backbone, self.coordinates)?;
        tape.conv2d(features, bound.var(HEAD_WEIGHT)?, bound.var(HEAD_BIAS)?, 1, 0)
    }

    /// Indices of listed words present in the expression, in list order.
    pub fn known_words(&self, expression: &str) -> Vec<usize> {
        let toks: BTreeSet<String> = tokenize(expression).into_iter().collect();
        (0..self.words.len()).filter(|&i| toks.contains(&self.words[i])).collect()
    }

    /// Bilinearly upsampled `[1, H, W]` score maps of the given words.
    pub fn word_maps(&self, image: &Tensor, words: &[usize]) -> Result<Vec<Tensor>> {
        let (_, h, w) = image.chw()?;
        let s = self.backbone.stride();
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let coarse = self.forward_coarse(&mut tape, &bound, image)?;
        let filter = tape.constant(fusion::make_bilinear_filter(s)?);
        words
            .iter()
            .map(|&i| {
                let ch = tape.slice(coarse, i, 1)?;
                let up = fusion::upsample(&mut tape, ch, filter, s, (h, w))?;
                Ok(tape.value(up).clone())
            })
            .collect()
    }

    pub fn predict(&self, image: &Tensor, expression: &str, mode: Combine) -> Result<PerWordPrediction> {
        let (_, h, w) = image.chw()?;
        let known = self.known_words(expression);
        if known.is_empty() {
            return Ok(PerWordPrediction { mask: perword_fallback(h, w), fallback: true });
        }
        let maps = self.word_maps(image, &known)?;
        Ok(PerWordPrediction { mask: combine_perword(&maps, mode)?, fallback: false })
    }

    pub fn to_checkpoint(&self, config: &RunConfig, iteration: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: Kind::PerWord,
            iteration,
            config: config.clone(),
            vocab: Vocabulary::from_tokens(self.words.iter().cloned())?,
            words: self.words.clone(),
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != Kind::PerWord {
            return Err(Error::contract("perword", format!("checkpoint holds a {:?} model", ckpt.kind)));
        }
        let reference = PerWordModel::init(ckpt.config.backbone.clone(), ckpt.config.coordinates, ckpt.words.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = ckpt.params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::format(
                    "checkpoint field `params`",
                    format!("`{name}` has shape {:?}, expected {:?}", got.shape(), t.shape()),
                ));
            }
        }
        Ok(PerWordModel { params: ckpt.params.clone(), ..reference })
    }
}

/// Per-pixel, per-word logistic losses summed over words and averaged over
/// pixels, against coarse (downsampled) masks. Positive targets carry the run's
/// `alpha_f` weight and negatives `alpha_b`: the head never sees the
/// expression, so with equal weights a word's label rate on matching shapes
/// stays under one half and every score settles below zero.
pub fn train_perword(
    data: &[Sample],
    run: &RunConfig,
    log: &mut dyn FnMut(LogEntry),
) -> Result<TrainOutcome<PerWordModel>> {
    let words = word_list(data.iter().map(|s| s.expression.as_str()), &run.perword_stopwords, run.perword_max_words);
    let mut model = PerWordModel::init(run.backbone.clone(), run.coordinates, words, run.seed)?;
    let mut cfg = TrainConfig::from_run(run, Stage::Low)?;
    cfg.lr = run.perword.lr;
    cfg.iterations = run.perword.iterations;
    let stride = model.backbone.stride();
    let prepared = train::prepare(data, cfg.image_size, stride)?;
    let targets: Vec<Vec<bool>> = prepared
        .iter()
        .map(|p| {
            let labels = perword_labels(&p.tokens, &model.words);
            labels.iter().flat_map(|&l| p.mask.bits().iter().map(move |&fg| fg && l)).collect()
        })
        .collect();
    let losses = train::sgd_loop(&mut model, |m| &mut m.params, &prepared, &cfg, log, |m, tape, bound, i| {
        let scores = m.forward_coarse(tape, bound, &prepared[i].image)?;
        let (h, w) = prepared[i].mask.extents();
        tape.logistic_loss(scores, &targets[i], run.alpha_f, run.alpha_b, (h * w) as f64)
    })?;
    Ok(TrainOutcome { model, losses })
}
