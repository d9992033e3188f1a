//! Synthetic referring-expression corpora: colored shapes on a black canvas,
//! an expression that singles out one of them, and its exact mask.
//!
//! Expressions follow a two-production grammar. `the <color> <kind>` is used
//! when no other shape shares the referent's color and kind; otherwise
//! `<color> <kind> on the <side>` where the referent's center lies in that
//! half of the canvas and its look-alike's does not. Half of all samples are
//! built around such a look-alike pair, cycling through the four sides, so the
//! spatial subset is balanced by construction.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_manifest, Record, Sample, Split};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::pnm;
use crate::tensor::Tensor;
use crate::text::{tokenize, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

pub const KINDS: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const SIDES: [Side; 4] = [Side::Left, Side::Right, Side::Top, Side::Bottom];

macro_rules! word_enum {
    ($t:ty, $all:expr, { $($v:path => $s:literal),* }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),* })
            }
        }

        impl $t {
            pub fn from_word(w: &str) -> Option<Self> {
                $all.into_iter().find(|x| x.to_string() == w)
            }
        }
    };
}

word_enum!(ShapeKind, KINDS, { ShapeKind::Square => "square", ShapeKind::Circle => "circle", ShapeKind::Triangle => "triangle" });
word_enum!(Color, COLORS, { Color::Red => "red", Color::Green => "green", Color::Blue => "blue", Color::Yellow => "yellow" });
word_enum!(Side, SIDES, { Side::Left => "left", Side::Right => "right", Side::Top => "top", Side::Bottom => "bottom" });

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
        }
    }
}

impl Side {
    fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::Top => Side::Bottom,
            Side::Bottom => Side::Top,
        }
    }
}

/// A shape inscribed in the `size x size` box whose top-left pixel is `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: Color,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl Shape {
    /// Center in continuous pixel coordinates (pixel `i` spans `[i, i + 1)`).
    pub fn center(&self) -> (f64, f64) {
        let h = self.size as f64 / 2.0;
        (self.x as f64 + h, self.y as f64 + h)
    }

    /// Whether pixel `(px, py)` belongs to the shape, judged at its center.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        if px < self.x || py < self.y || px >= self.x + self.size || py >= self.y + self.size {
            return false;
        }
        let s = self.size as f64;
        let (u, v) = (px as f64 + 0.5 - self.x as f64, py as f64 + 0.5 - self.y as f64);
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = s / 2.0;
                (u - r).powi(2) + (v - r).powi(2) <= r * r
            }
            // Apex at the top center, base along the bottom edge.
            ShapeKind::Triangle => (u - s / 2.0).abs() <= v / 2.0,
        }
    }

    /// Center strictly inside the given half of a `width x height` canvas.
    pub fn on_side(&self, side: Side, width: usize, height: usize) -> bool {
        let (cx, cy) = self.center();
        match side {
            Side::Left => cx < width as f64 / 2.0,
            Side::Right => cx > width as f64 / 2.0,
            Side::Top => cy < height as f64 / 2.0,
            Side::Bottom => cy > height as f64 / 2.0,
        }
    }

    fn separated(&self, other: &Shape, gap: usize) -> bool {
        self.x + self.size + gap <= other.x
            || other.x + other.size + gap <= self.x
            || self.y + self.size + gap <= other.y
            || other.y + other.size + gap <= self.y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub shapes: Vec<Shape>,
    pub referent: usize,
    pub expression: String,
}

impl Scene {
    pub fn mask(&self) -> Mask {
        let s = self.shapes[self.referent];
        Mask::from_fn(self.height, self.width, |y, x| s.covers(x, y))
    }

    /// `[3, H, W]` in `[0, 1]`: shapes in pure colors on black.
    pub fn image(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for s in &self.shapes {
            let rgb = s.color.rgb();
            for y in s.y..s.y + s.size {
                for x in s.x..s.x + s.size {
                    if s.covers(x, y) {
                        for c in 0..3 {
                            data[c * plane + y * self.width + x] = rgb[c] as f64 / 255.0;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("canvas shape")
    }

    pub fn sample(&self) -> Sample {
        Sample::new(self.image(), self.expression.clone(), self.mask()).expect("image and mask share extents")
    }
}

/// Indices of the shapes an expression of the corpus grammar refers to;
/// `None` when the expression is not in the grammar.
pub fn resolve(expression: &str, shapes: &[Shape], width: usize, height: usize) -> Option<Vec<usize>> {
    let toks = tokenize(expression);
    let toks: Vec<&str> = toks.iter().map(String::as_str).collect();
    let (color, kind, side) = match toks.as_slice() {
        ["the", c, k] => (Color::from_word(c)?, ShapeKind::from_word(k)?, None),
        [c, k, "on", "the", s] => (Color::from_word(c)?, ShapeKind::from_word(k)?, Some(Side::from_word(s)?)),
        _ => return None,
    };
    Some(
        shapes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.color == color && s.kind == kind && side.is_none_or(|d| s.on_side(d, width, height)))
            .map(|(i, _)| i)
            .collect(),
    )
}

/// True for `... on the <side>` expressions.
pub fn is_spatial(expression: &str) -> bool {
    tokenize(expression).iter().any(|t| Side::from_word(t).is_some())
}

/// The expression the grammar assigns to `referent`, if one identifies it
/// uniquely.
pub fn describe(shapes: &[Shape], referent: usize, width: usize, height: usize) -> Option<String> {
    let r = shapes[referent];
    let plain = format!("the {} {}", r.color, r.kind);
    if resolve(&plain, shapes, width, height)? == [referent] {
        return Some(plain);
    }
    SIDES.iter().find_map(|side| {
        let e = format!("{} {} on the {side}", r.color, r.kind);
        (resolve(&e, shapes, width, height)? == [referent]).then_some(e)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Relative sizes of the train, val and test splits.
    pub splits: [u32; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 0, count: 100, width: 64, height: 64, splits: [8, 1, 1] }
    }
}

impl SynthConfig {
    /// Records per split: val and test get the floor of their share, train
    /// the remainder. Splits are contiguous in that order.
    pub fn split_counts(&self) -> [usize; 3] {
        let total: u64 = self.splits.iter().map(|&x| x as u64).sum::<u64>().max(1);
        let share = |k: u32| (self.count as u64 * k as u64 / total) as usize;
        let (val, test) = (share(self.splits[1]), share(self.splits[2]));
        [self.count - val - test, val, test]
    }

    pub fn split_of(&self, index: usize) -> Split {
        let [train, val, _] = self.split_counts();
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::contract("generate", "count must be at least 1"));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::contract("generate", format!("canvas {}x{} is smaller than 16x16", self.width, self.height)));
        }
        if self.splits.iter().all(|&x| x == 0) {
            return Err(Error::contract("generate", "split ratios are all zero"));
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 1000;
const PLACEMENT_TRIES: usize = 200;
const GAP: usize = 2;

struct Placer<'a> {
    rng: &'a mut ChaCha8Rng,
    width: usize,
    height: usize,
    placed: Vec<Shape>,
}

impl Placer<'_> {
    fn size(&mut self) -> usize {
        let m = self.width.min(self.height) as f64;
        let lo = ((m * 0.36).round() as usize).max(3);
        let hi = ((m * 0.46).round() as usize).max(lo);
        self.rng.gen_range(lo..=hi)
    }

    /// Places a shape whose center satisfies `side` (if given); `None` when
    /// no non-overlapping spot was found.
    fn place(&mut self, kind: ShapeKind, color: Color, side: Option<Side>) -> Option<Shape> {
        let size = self.size();
        for _ in 0..PLACEMENT_TRIES {
            let s = Shape {
                kind,
                color,
                x: self.rng.gen_range(0..=self.width - size),
                y: self.rng.gen_range(0..=self.height - size),
                size,
            };
            let side_ok = side.is_none_or(|d| s.on_side(d, self.width, self.height) && !s.on_side(d.opposite(), self.width, self.height));
            if side_ok && self.placed.iter().all(|p| p.separated(&s, GAP)) {
                self.placed.push(s);
                return Some(s);
            }
        }
        None
    }
}

/// Draws one scene; with `pair = Some(side)` the referent has a look-alike in
/// the opposite half and the expression is spatial.
pub fn draw_scene(rng: &mut ChaCha8Rng, width: usize, height: usize, pair: Option<Side>) -> Result<Scene> {
    for _ in 0..MAX_ATTEMPTS {
        let n = rng.gen_range(2..=4);
        let kind = *KINDS.choose(rng).expect("non-empty");
        let color = *COLORS.choose(rng).expect("non-empty");
        let mut p = Placer { rng, width, height, placed: Vec::new() };
        let Some(_) = p.place(kind, color, pair) else { continue };
        if let Some(side) = pair {
            if p.place(kind, color, Some(side.opposite())).is_none() {
                continue;
            }
        }
        let mut ok = true;
        while p.placed.len() < n {
            let (k, c) = loop {
                let k = *KINDS.choose(p.rng).expect("non-empty");
                let c = *COLORS.choose(p.rng).expect("non-empty");
                if (k, c) != (kind, color) {
                    break (k, c);
                }
            };
            if p.place(k, c, None).is_none() {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let mut shapes = p.placed;
        // Shuffle so the referent's index carries no information.
        let mut order: Vec<usize> = (0..shapes.len()).collect();
        order.shuffle(rng);
        shapes = order.iter().map(|&i| shapes[i]).collect();
        let referent = order.iter().position(|&i| i == 0).expect("referent placed first");
        let r = shapes[referent];
        let expression = match pair {
            Some(side) => format!("{} {} on the {side}", r.color, r.kind),
            None => format!("the {} {}", r.color, r.kind),
        };
        if resolve(&expression, &shapes, width, height).as_deref() != Some(&[referent][..]) {
            continue;
        }
        let scene = Scene { width, height, shapes, referent, expression };
        let m = scene.mask();
        if m.is_empty() || m.count() as usize == width * height {
            continue;
        }
        return Ok(scene);
    }
    Err(Error::contract("generate", format!("no unambiguous scene found in {MAX_ATTEMPTS} attempts")))
}

/// The whole corpus in memory, deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<(Scene, Split)>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut spatial = 0;
    (0..cfg.count)
        .map(|i| {
            let pair = if i % 2 == 1 {
                spatial += 1;
                Some(SIDES[(spatial - 1) % SIDES.len()])
            } else {
                None
            };
            Ok((draw_scene(&mut rng, cfg.width, cfg.height, pair)?, cfg.split_of(i)))
        })
        .collect()
}

pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<(Sample, Split)>> {
    Ok(generate(cfg)?.iter().map(|(s, sp)| (s.sample(), *sp)).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSummary {
    pub manifest: PathBuf,
    pub counts: [usize; 3],
    pub spatial: usize,
    pub vocabulary: Vec<String>,
}

/// Writes `images/*.ppm`, `masks/*.pgm`, `manifest.tsv` and `vocab.txt`
/// (built from the training split) under `dir`.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig) -> Result<CorpusSummary> {
    let scenes = generate(cfg)?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut records = Vec::with_capacity(scenes.len());
    for (i, (scene, split)) in scenes.iter().enumerate() {
        let image = PathBuf::from(format!("images/{i:06}.ppm"));
        let mask = PathBuf::from(format!("masks/{i:06}.pgm"));
        pnm::write_file(&dir.join(&image), &pnm::from_tensor(&scene.image())?)?;
        pnm::write_file(&dir.join(&mask), &pnm::from_mask(&scene.mask()))?;
        records.push(Record { image, mask, split: *split, expression: scene.expression.clone() });
    }
    let manifest = dir.join("manifest.tsv");
    std::fs::write(&manifest, write_manifest(&records)).map_err(|e| Error::io(&manifest, e))?;
    let vocab = Vocabulary::build(records.iter().filter(|r| r.split == Split::Train).map(|r| r.expression.as_str()));
    vocab.save(&dir.join("vocab.txt"))?;
    Ok(CorpusSummary {
        manifest,
        counts: cfg.split_counts(),
        spatial: scenes.iter().filter(|(s, _)| is_spatial(&s.expression)).count(),
        vocabulary: vocab.tokens().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_area_is_exact() {
        let s = Shape { kind: ShapeKind::Square, color: Color::Red, x: 3, y: 5, size: 10 };
        let scene = Scene { width: 32, height: 32, shapes: vec![s], referent: 0, expression: "the red square".into() };
        assert_eq!(scene.mask().count(), 100);
    }

    #[test]
    fn shapes_cover_sensible_areas() {
        let area = |kind| {
            let s = Shape { kind, color: Color::Blue, x: 0, y: 0, size: 20 };
            (0..20).flat_map(|y| (0..20).map(move |x| (x, y))).filter(|&(x, y)| s.covers(x, y)).count()
        };
        assert!((area(ShapeKind::Circle) as f64 - std::f64::consts::PI * 100.0).abs() < 20.0);
        assert!((area(ShapeKind::Triangle) as i64 - 200).abs() < 20);
    }

    #[test]
    fn split_arithmetic() {
        let cfg = SynthConfig { count: 100, splits: [8, 1, 1], ..Default::default() };
        assert_eq!(cfg.split_counts(), [80, 10, 10]);
        let cfg = SynthConfig { count: 7, splits: [1, 1, 1], ..Default::default() };
        assert_eq!(cfg.split_counts(), [3, 2, 2]);
    }

    #[test]
    fn every_expression_picks_out_exactly_its_referent() {
        let cfg = SynthConfig { count: 300, seed: 11, ..Default::default() };
        for (scene, _) in generate(&cfg).unwrap() {
            let hits = resolve(&scene.expression, &scene.shapes, scene.width, scene.height).unwrap();
            assert_eq!(hits, [scene.referent], "{scene:?}");
            for (i, a) in scene.shapes.iter().enumerate() {
                for b in &scene.shapes[i + 1..] {
                    assert!(a.separated(b, GAP));
                }
            }
            let m = scene.mask();
            assert!(!m.is_empty() && (m.count() as usize) < 64 * 64);
        }
    }

    #[test]
    fn spatial_subset_is_balanced() {
        let cfg = SynthConfig { count: 400, seed: 3, ..Default::default() };
        let scenes = generate(&cfg).unwrap();
        let count = |w: &str| scenes.iter().filter(|(s, _)| s.expression.ends_with(w)).count();
        assert_eq!(count("left"), count("right"));
        assert_eq!(count("left"), 50);
        assert_eq!(scenes.iter().filter(|(s, _)| is_spatial(&s.expression)).count(), 200);
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = SynthConfig { count: 20, seed: 5, ..Default::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 6, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig { count: 0, ..Default::default() }).is_err());
        assert!(generate(&SynthConfig { width: 8, ..Default::default() }).is_err());
    }
}
