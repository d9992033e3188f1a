//! Loss, label downsampling, and the two-stage training loop.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::Resolution;
use crate::mask::Mask;
use crate::metrics;
use crate::model::{ModelConfig, SegModel};
use crate::params::SgdMomentum;
use crate::tensor::{softplus, Tape, Tensor, Var};
use crate::text::{TokenSequence, Vocabulary};

/// Foreground and background weights of the per-pixel logistic loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha_f: f64,
    pub alpha_b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha_f: 3.0, alpha_b: 1.0 }
    }
}

impl LossWeights {
    pub fn new(alpha_f: f64, alpha_b: f64) -> Result<Self> {
        if !(alpha_f > 0.0 && alpha_b > 0.0) {
            return Err(Error::contract("LossWeights", format!("weights must be positive, got ({alpha_f}, {alpha_b})")));
        }
        Ok(LossWeights { alpha_f, alpha_b })
    }
}

/// `alpha_f * log(1 + e^-v)` on foreground, `alpha_b * log(1 + e^v)` on
/// background. `m` must be exactly 0 or 1.
pub fn pixel_loss(v: f64, m: f64, w: LossWeights) -> Result<f64> {
    if m == 1.0 {
        Ok(w.alpha_f * softplus(-v))
    } else if m == 0.0 {
        Ok(w.alpha_b * softplus(v))
    } else {
        Err(Error::contract("pixel_loss", format!("label must be 0 or 1, got {m}")))
    }
}

/// Pixel-averaged weighted logistic loss of a `[1, h, w]` score map.
pub fn total_loss(tape: &mut Tape, response: Var, mask: &Mask, w: LossWeights) -> Result<Var> {
    let shape = tape.value(response).shape().to_vec();
    let (h, wd) = match shape.as_slice() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::dim("total_loss", format!("expected a [1, h, w] response, got {s:?}"))),
    };
    if mask.extents() != (h, wd) {
        return Err(Error::dim("total_loss", format!("response {h}x{wd} vs mask {:?}", mask.extents())));
    }
    tape.logistic_loss(response, mask.bits(), w.alpha_f, w.alpha_b, (h * wd) as f64)
}

/// A coarse cell is foreground when at least half of its `s x s` block is.
pub fn downsample_mask(mask: &Mask, s: usize) -> Result<Mask> {
    let (h, w) = mask.extents();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::dim("downsample_mask", format!("{h}x{w} is not divisible by stride {s}")));
    }
    Ok(Mask::from_fn(h / s, w / s, |cy, cx| {
        let mut fg = 0;
        for y in cy * s..(cy + 1) * s {
            for x in cx * s..(cx + 1) * s {
                fg += mask.get(y, x) as usize;
            }
        }
        2 * fg >= s * s
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Coarse classifier against downsampled labels.
    Low,
    /// Full model, deconvolution included, against full-resolution labels.
    High,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Low => "low",
            Stage::High => "high",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Stage::Low),
            "high" => Ok(Stage::High),
            other => Err(Error::format("stage", format!("expected low or high, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub momentum: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// `(W, H)`; samples of another size are resized and padded.
    pub image_size: (usize, usize),
    pub weights: LossWeights,
    /// Emit a log entry every this many iterations (0 disables logging).
    pub log_every: u64,
}

impl TrainConfig {
    pub fn from_run(run: &RunConfig, stage: Stage) -> Result<Self> {
        let s = match stage {
            Stage::Low => &run.low,
            Stage::High => &run.high,
        };
        Ok(TrainConfig {
            stage,
            lr: s.lr,
            momentum: run.momentum,
            iterations: s.iterations,
            batch_size: run.batch_size,
            seed: run.seed,
            image_size: run.image_size(),
            weights: LossWeights::new(run.alpha_f, run.alpha_b)?,
            log_every: run.log_every,
        })
    }
}

/// Where a stage's parameters come from.
#[derive(Clone, Debug)]
pub enum Init {
    /// Random initialization; for the high stage the deconvolution filter is
    /// bilinear.
    Fresh { config: ModelConfig, vocab: Vocabulary },
    /// Continue from an existing model. A low-resolution model entering the
    /// high stage gains a bilinear deconvolution; everything else is copied.
    From(SegModel),
}

/// Builds the model a stage starts from, enforcing the stage contracts.
pub fn initial_model(stage: Stage, init: Init, seed: u64) -> Result<SegModel> {
    let mut model = match init {
        Init::Fresh { config, vocab } => SegModel::init(config, vocab, seed)?,
        Init::From(m) => m,
    };
    match stage {
        Stage::Low if model.has_deconv() => {
            return Err(Error::contract(
                "train_stage",
                "the low stage trains coarse maps only; the initial model already has a deconvolution filter",
            ))
        }
        Stage::High if !model.has_deconv() => model.attach_bilinear_deconv()?,
        _ => {}
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    /// Number of completed iterations.
    pub iteration: u64,
    /// Mean loss over the last logging window.
    pub loss: f64,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    /// Batch-mean loss of every iteration.
    pub losses: Vec<f64>,
}

/// One training example in model input form: image at the configured size,
/// target at the stage's resolution.
pub(crate) struct Prepared {
    pub image: Tensor,
    pub tokens: Vec<String>,
    pub mask: Mask,
}

/// Resizes and pads samples to `(W, H)`; the target mask is downsampled by
/// `coarse_stride` when it is greater than one.
pub(crate) fn prepare(data: &[Sample], size: (usize, usize), coarse_stride: usize) -> Result<Vec<Prepared>> {
    if data.is_empty() {
        return Err(Error::contract("train_stage", "empty dataset"));
    }
    data.iter()
        .map(|s| {
            let (image, mask) = if s.extents() == (size.1, size.0) {
                (s.image.clone(), s.mask.clone())
            } else {
                let (i, m, _) = metrics::resize_and_pad(&s.image, &s.mask, size)?;
                (i, m)
            };
            let mask = if coarse_stride > 1 { downsample_mask(&mask, coarse_stride)? } else { mask };
            Ok(Prepared { image, tokens: s.tokens.clone(), mask })
        })
        .collect()
}

/// Seeded SGD-momentum loop shared by the model and the per-word baseline.
/// `step_loss` records the loss of sample `i` on the tape.
pub(crate) fn sgd_loop<M, F>(
    model: &mut M,
    params: impl Fn(&mut M) -> &mut crate::params::ParamStore,
    data: &[Prepared],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(LogEntry),
    step_loss: F,
) -> Result<Vec<f64>>
where
    F: Fn(&M, &mut Tape, &crate::params::Bound, usize) -> Result<Var>,
{
    if cfg.batch_size == 0 {
        return Err(Error::contract("train_stage", "batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut losses = Vec::with_capacity(cfg.iterations as usize);
    let start = Instant::now();
    let mut window = 0.0;
    for it in 0..cfg.iterations {
        let mut acc: Option<std::collections::BTreeMap<String, Tensor>> = None;
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let index = order[cursor];
            cursor += 1;
            let mut tape = Tape::new();
            let bound = params(model).bind(&mut tape);
            let loss = step_loss(model, &mut tape, &bound, index)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value} at iteration {}", it + 1)));
            }
            batch_loss += value;
            tape.backward(loss)?;
            let grads = bound.grads(&tape)?;
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for (k, g) in grads {
                        let slot = a.get_mut(&k).expect("same parameter set every step");
                        for (x, y) in slot.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                    a
                }
            });
        }
        let mut grads = acc.expect("batch size is positive");
        if cfg.batch_size > 1 {
            let inv = 1.0 / cfg.batch_size as f64;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
        }
        opt.step(params(model), &grads)?;
        let mean = batch_loss / cfg.batch_size as f64;
        losses.push(mean);
        window += mean;
        let done = it + 1;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.iterations) {
            let n = match done % cfg.log_every {
                0 => cfg.log_every,
                r => r,
            };
            log(LogEntry { iteration: done, loss: window / n as f64, elapsed: start.elapsed() });
            window = 0.0;
        }
    }
    Ok(losses)
}

/// Runs one training stage from `init` and returns the trained model.
pub fn train_stage(
    data: &[Sample],
    cfg: &TrainConfig,
    init: Init,
    log: &mut dyn FnMut(LogEntry),
) -> Result<TrainOutcome<SegModel>> {
    let mut model = initial_model(cfg.stage, init, cfg.seed)?;
    let stride = model.config.stride();
    let (w, h) = cfg.image_size;
    if w % stride != 0 || h % stride != 0 {
        return Err(Error::dim("train_stage", format!("image size {w}x{h} is not divisible by stride {stride}")));
    }
    let (coarse, resolution) = match cfg.stage {
        Stage::Low => (stride, Resolution::Coarse),
        Stage::High => (1, Resolution::High),
    };
    let prepared = prepare(data, cfg.image_size, coarse)?;
    let tokens: Vec<TokenSequence> = prepared.iter().map(|p| model.vocab.encode_tokens(&p.tokens)).collect();
    let weights = cfg.weights;
    let losses = sgd_loop(
        &mut model,
        |m| &mut m.params,
        &prepared,
        cfg,
        log,
        |m, tape, bound, i| {
            let out = m.forward(tape, bound, &prepared[i].image, &tokens[i], resolution)?;
            total_loss(tape, out, &prepared[i].mask, weights)
        },
    )?;
    Ok(TrainOutcome { model, losses })
}
