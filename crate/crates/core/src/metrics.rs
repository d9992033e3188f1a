//! Evaluation geometry and metrics: resize-and-pad, mapping back, IoU,
//! overall IoU, and precision at IoU thresholds.

use std::fmt;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Thresholds reported by default.
pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// How an original image was fitted into the fixed input size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PadGeometry {
    /// `(H0, W0)`
    pub original: (usize, usize),
    pub scale: f64,
    /// `(H1, W1)`, the resized content before padding.
    pub scaled: (usize, usize),
    /// Columns added on the right, rows added at the bottom.
    pub pad: (usize, usize),
}

impl PadGeometry {
    /// `target` is `(W, H)`.
    pub fn new(original: (usize, usize), target: (usize, usize)) -> Result<Self> {
        let (h0, w0) = original;
        let (w, h) = target;
        if h0 == 0 || w0 == 0 || h == 0 || w == 0 {
            return Err(Error::contract("resize_and_pad", format!("degenerate size {w0}x{h0} -> {w}x{h}")));
        }
        let scale = (w as f64 / w0 as f64).min(h as f64 / h0 as f64);
        let fit = |n: usize, cap: usize| ((n as f64 * scale).round() as usize).clamp(1, cap);
        let (h1, w1) = (fit(h0, h), fit(w0, w));
        Ok(PadGeometry { original, scale, scaled: (h1, w1), pad: (w - w1, h - h1) })
    }

    /// `(H, W)` after padding.
    pub fn padded(&self) -> (usize, usize) {
        (self.scaled.0 + self.pad.1, self.scaled.1 + self.pad.0)
    }
}

/// Source coordinate of destination index `i` under half-pixel alignment.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

/// Bilinear resize of every channel of `[C, H, W]` with half-pixel centers
/// and edge clamping.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("resize_bilinear", "empty output size"));
    }
    let src = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..out_h {
            let sy = source_coord(y, h, out_h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for x in 0..out_w {
                let sx = source_coord(x, w, out_w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn resize_nearest(mask: &Mask, out_h: usize, out_w: usize) -> Mask {
    let (h, w) = mask.extents();
    let pick = |i: usize, src: usize, dst: usize| (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    Mask::from_fn(out_h, out_w, |y, x| mask.get(pick(y, h, out_h), pick(x, w, out_w)))
}

/// Scales `image` (bilinear) and `mask` (nearest) by the largest factor that
/// fits `target = (W, H)` with the aspect ratio kept, then zero-pads on the
/// right and bottom.
pub fn resize_and_pad(image: &Tensor, mask: &Mask, target: (usize, usize)) -> Result<(Tensor, Mask, PadGeometry)> {
    let (c, h0, w0) = image.chw()?;
    if mask.extents() != (h0, w0) {
        return Err(Error::dim("resize_and_pad", format!("image {h0}x{w0} vs mask {:?}", mask.extents())));
    }
    let geom = PadGeometry::new((h0, w0), target)?;
    let (h1, w1) = geom.scaled;
    let (h, w) = geom.padded();
    let scaled = if (h1, w1) == (h0, w0) { image.clone() } else { resize_bilinear(image, h1, w1)? };
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h1 {
            let src = &scaled.data()[(ch * h1 + y) * w1..(ch * h1 + y + 1) * w1];
            data[(ch * h + y) * w..(ch * h + y) * w + w1].copy_from_slice(src);
        }
    }
    let small = resize_nearest(mask, h1, w1);
    let padded = Mask::from_fn(h, w, |y, x| y < h1 && x < w1 && small.get(y, x));
    Ok((Tensor::new(vec![c, h, w], data)?, padded, geom))
}

/// Crops the padded score map `[1, H, W]` to its content and resizes it to
/// the original extents.
pub fn map_back(scores: &Tensor, geom: &PadGeometry) -> Result<Tensor> {
    let (c, h, w) = scores.chw()?;
    if (h, w) != geom.padded() {
        return Err(Error::dim("map_back", format!("score map {h}x{w} vs padded geometry {:?}", geom.padded())));
    }
    let (h1, w1) = geom.scaled;
    let mut crop = Vec::with_capacity(c * h1 * w1);
    for ch in 0..c {
        for y in 0..h1 {
            crop.extend_from_slice(&scores.data()[(ch * h + y) * w..(ch * h + y) * w + w1]);
        }
    }
    let crop = Tensor::new(vec![c, h1, w1], crop)?;
    let (h0, w0) = geom.original;
    if (h1, w1) == (h0, w0) {
        return Ok(crop);
    }
    resize_bilinear(&crop, h0, w0)
}

/// Exact IoU as an integer ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Iou {
    pub intersection: u64,
    pub union: u64,
}

impl Iou {
    pub fn new(intersection: u64, union: u64) -> Result<Self> {
        if intersection > union {
            return Err(Error::contract("iou", format!("intersection {intersection} exceeds union {union}")));
        }
        Ok(Iou { intersection, union })
    }

    /// 1 when both masks were empty.
    pub fn value(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    /// `IoU >= t`, evaluated exactly for thresholds with up to six decimals.
    pub fn passes(&self, t: f64) -> bool {
        if self.union == 0 {
            return true;
        }
        let t_micro = (t * 1e6).round() as u128;
        1_000_000 * self.intersection as u128 >= t_micro * self.union as u128
    }
}

pub fn iou(pred: &Mask, gt: &Mask) -> Result<Iou> {
    if pred.extents() != gt.extents() {
        return Err(Error::dim("iou", format!("{:?} vs {:?}", pred.extents(), gt.extents())));
    }
    let (mut i, mut u) = (0u64, 0u64);
    for (&a, &b) in pred.bits().iter().zip(gt.bits()) {
        i += (a && b) as u64;
        u += (a || b) as u64;
    }
    Ok(Iou { intersection: i, union: u })
}

/// Pooled counts plus the per-sample ratios.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalAccumulator {
    pub intersection: u64,
    pub union: u64,
    pub samples: Vec<Iou>,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, s: Iou) {
        self.intersection += s.intersection;
        self.union += s.union;
        self.samples.push(s);
    }

    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<Iou> {
        let s = iou(pred, gt)?;
        self.push(s);
        Ok(s)
    }

    pub fn merge(&mut self, other: EvalAccumulator) {
        self.intersection += other.intersection;
        self.union += other.union;
        self.samples.extend(other.samples);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean of per-sample IoUs; contrast with [`overall_iou`].
    pub fn mean_iou(&self) -> f64 {
        self.samples.iter().map(Iou::value).sum::<f64>() / self.samples.len().max(1) as f64
    }
}

/// Total intersection over total union.
pub fn overall_iou(acc: &EvalAccumulator) -> Result<Iou> {
    if acc.is_empty() {
        return Err(Error::contract("overall_iou", "no samples"));
    }
    Ok(Iou { intersection: acc.intersection, union: acc.union })
}

/// Fraction of samples with IoU at least `t`.
pub fn precision_at(ious: &[Iou], t: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::contract("precision_at", "no samples"));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::contract("precision_at", format!("threshold {t} outside (0, 1)")));
    }
    Ok(ious.iter().filter(|s| s.passes(t)).count() as f64 / ious.len() as f64)
}

/// One evaluated model or baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub name: String,
    pub samples: usize,
    pub overall_iou: f64,
    pub mean_iou: f64,
    /// `(threshold, precision)` pairs.
    pub precision: Vec<(f64, f64)>,
    pub mean_time_ms: f64,
    /// Fraction of samples where a baseline produced no segmentation.
    pub fallback_rate: Option<f64>,
}

impl EvalReport {
    pub fn from_accumulator(name: impl Into<String>, acc: &EvalAccumulator, mean_time_ms: f64) -> Result<Self> {
        let ious = &acc.samples;
        let precision = THRESHOLDS.iter().map(|&t| Ok((t, precision_at(ious, t)?))).collect::<Result<_>>()?;
        Ok(EvalReport {
            name: name.into(),
            samples: acc.len(),
            overall_iou: overall_iou(acc)?.value(),
            mean_iou: acc.mean_iou(),
            precision,
            mean_time_ms,
            fallback_rate: None,
        })
    }

    pub fn precision_at(&self, t: f64) -> Option<f64> {
        self.precision.iter().find(|(x, _)| (x - t).abs() < 1e-9).map(|p| p.1)
    }

    /// Parses blocks written by `Display`, separated by blank lines.
    pub fn parse_all(text: &str) -> Result<Vec<EvalReport>> {
        let mut out = Vec::new();
        for block in text.split("\n\n").filter(|b| !b.trim().is_empty()) {
            let mut r = EvalReport {
                name: String::new(),
                samples: 0,
                overall_iou: 0.0,
                mean_iou: 0.0,
                precision: Vec::new(),
                mean_time_ms: 0.0,
                fallback_rate: None,
            };
            for line in block.lines() {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::format("report", format!("expected key=value, got {line:?}")))?;
                let num = |v: &str| v.parse::<f64>().map_err(|_| Error::format("report", format!("`{k}`: bad number {v:?}")));
                match k {
                    "name" => r.name = v.to_string(),
                    "samples" => r.samples = num(v)? as usize,
                    "overall_iou" => r.overall_iou = num(v)?,
                    "mean_iou" => r.mean_iou = num(v)?,
                    "mean_time_ms" => r.mean_time_ms = num(v)?,
                    "fallback_rate" => r.fallback_rate = Some(num(v)?),
                    _ => match k.strip_prefix("precision@") {
                        Some(t) => r.precision.push((num(t)?, num(v)?)),
                        None => return Err(Error::format("report", format!("unknown key `{k}`"))),
                    },
                }
            }
            out.push(r);
        }
        Ok(out)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name={}", self.name)?;
        writeln!(f, "samples={}", self.samples)?;
        writeln!(f, "overall_iou={:.6}", self.overall_iou)?;
        writeln!(f, "mean_iou={:.6}", self.mean_iou)?;
        for (t, p) in &self.precision {
            writeln!(f, "precision@{t}={p:.6}")?;
        }
        writeln!(f, "mean_time_ms={:.3}", self.mean_time_ms)?;
        if let Some(r) = self.fallback_rate {
            writeln!(f, "fallback_rate={r:.6}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(h: usize, w: usize, y: usize, x: usize, side: usize) -> Mask {
        Mask::from_fn(h, w, |r, c| (y..y + side).contains(&r) && (x..x + side).contains(&c))
    }

    #[test]
    fn geometry_examples() {
        let g = PadGeometry::new((480, 640), (512, 512)).unwrap();
        assert_eq!(g.scale, 0.8);
        assert_eq!(g.scaled, (384, 512));
        assert_eq!(g.pad, (0, 128));
        let id = PadGeometry::new((64, 64), (64, 64)).unwrap();
        assert_eq!((id.scale, id.pad), (1.0, (0, 0)));
        assert!(PadGeometry::new((0, 5), (64, 64)).is_err());
    }

    #[test]
    fn padding_is_background() {
        let img = Tensor::full(&[3, 20, 40], 0.5);
        let (pi, pm, g) = resize_and_pad(&img, &Mask::full(20, 40), (64, 64)).unwrap();
        assert_eq!(g.scaled, (32, 64));
        assert_eq!(pm.count(), 32 * 64);
        assert!(pm.bits()[32 * 64..].iter().all(|b| !b));
        assert!(pi.data()[..32 * 64].iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(pi.data()[32 * 64..64 * 64].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn map_back_identity_and_constant() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let s = Tensor::uniform(&[1, 8, 8], 1.0, &mut rng);
        let g = PadGeometry::new((8, 8), (8, 8)).unwrap();
        assert_eq!(map_back(&s, &g).unwrap(), s);
        let g = PadGeometry::new((30, 50), (64, 64)).unwrap();
        let back = map_back(&Tensor::full(&[1, 64, 64], -0.25), &g).unwrap();
        assert_eq!(back.shape(), &[1, 30, 50]);
        assert!(back.data().iter().all(|&v| (v + 0.25).abs() < 1e-12));
    }

    #[test]
    fn half_plane_area_survives_round_trip() {
        let (h0, w0) = (48, 80);
        let gt = Mask::from_fn(h0, w0, |_, x| x < 30);
        let img = Tensor::zeros(&[3, h0, w0]);
        let (_, pm, g) = resize_and_pad(&img, &gt, (64, 64)).unwrap();
        let scores = Tensor::new(vec![1, 64, 64], pm.bits().iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()).unwrap();
        let back = crate::fusion::decide(&map_back(&scores, &g).unwrap()).unwrap();
        let (a, b) = (gt.count() as f64, back.count() as f64);
        assert!((a - b).abs() / a < 0.02, "{a} vs {b}");
    }

    #[test]
    fn iou_examples() {
        let a = block(6, 6, 1, 1, 3);
        assert_eq!(iou(&a, &a).unwrap().value(), 1.0);
        assert_eq!(iou(&a, &block(6, 6, 4, 4, 2)).unwrap().value(), 0.0);
        let x = block(4, 4, 0, 0, 2);
        let y = block(4, 4, 1, 1, 2);
        assert_eq!(iou(&x, &y).unwrap(), Iou { intersection: 1, union: 7 });
        assert_eq!(iou(&Mask::empty(2, 2), &Mask::empty(2, 2)).unwrap().value(), 1.0);
        assert_eq!(iou(&Mask::empty(2, 2), &Mask::full(2, 2)).unwrap().value(), 0.0);
        assert!(iou(&Mask::empty(2, 2), &Mask::empty(2, 3)).is_err());
    }

    #[test]
    fn overall_versus_mean() {
        let mut acc = EvalAccumulator::new();
        acc.push(Iou::new(1, 7).unwrap());
        acc.push(Iou::new(3, 3).unwrap());
        assert_eq!(overall_iou(&acc).unwrap(), Iou { intersection: 4, union: 10 });
        assert!((acc.mean_iou() - (1.0 / 7.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!(overall_iou(&EvalAccumulator::new()).is_err());
    }

    #[test]
    fn precision_examples() {
        let ious = [Iou::new(3, 5).unwrap(), Iou::new(2, 5).unwrap(), Iou::new(11, 20).unwrap()];
        assert!((precision_at(&ious, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision_at(&ious, 0.6).unwrap(), 1.0 / 3.0);
        assert_eq!(precision_at(&[Iou::new(4, 4).unwrap()], 0.9).unwrap(), 1.0);
        assert!(precision_at(&[], 0.5).is_err());
        // 3/5 is exactly 0.6 and counts as passing.
        assert!(Iou::new(3, 5).unwrap().passes(0.6));
    }

    #[test]
    fn report_text_round_trip() {
        let mut acc = EvalAccumulator::new();
        acc.push(Iou::new(3, 4).unwrap());
        let mut r = EvalReport::from_accumulator("model", &acc, 1.5).unwrap();
        r.fallback_rate = Some(0.0);
        let text = format!("{r}\n{r}");
        let parsed = EvalReport::parse_all(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].precision.len(), 5);
        assert_eq!(parsed[0].precision_at(0.7), Some(1.0));
        assert_eq!(parsed[0].overall_iou, 0.75);
    }
}
