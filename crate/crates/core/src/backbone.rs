//! Fully convolutional visual pathway: strided convolutions, per-location L2
//! normalization, and two appended relative-coordinate channels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 3;
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

/// Ordered convolution stack. The total stride is the product of the layer strides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub layers: Vec<ConvLayer>,
}

impl Default for BackboneConfig {
    /// Four 3x3 layers with widths 16, 32, 32, 32; the first two have stride 2
    /// (total stride 4, so a 64x64 canvas gives a 16x16 response grid).
    fn default() -> Self {
        let layer = |out_channels, stride| ConvLayer { out_channels, kernel: 3, stride, pad: 1, relu: true };
        BackboneConfig { layers: vec![layer(16, 2), layer(32, 2), layer(32, 1), layer(32, 1)] }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Descriptor width of the final layer.
    pub fn d_im(&self) -> usize {
        self.layers.last().map_or(IMAGE_CHANNELS, |l| l.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("backbone", "at least one layer is required"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::contract("backbone", format!("layer {i} has a zero extent: {l:?}")));
            }
        }
        Ok(())
    }

    /// Grid extents produced for an `height x width` input; the input must be
    /// divisible by the total stride and every layer must map it exactly.
    pub fn grid_extents(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        if !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(Error::dim(
                "extract_feature_map",
                format!("input {height}x{width} is not divisible by the backbone stride {s}"),
            ));
        }
        let (mut h, mut w) = (height, width);
        for l in &self.layers {
            let step = |n: usize| (n + 2 * l.pad).checked_sub(l.kernel).map(|v| v / l.stride + 1).unwrap_or(0);
            (h, w) = (step(h), step(w));
        }
        if (h, w) != (height / s, width / s) {
            return Err(Error::dim(
                "extract_feature_map",
                format!("layers map {height}x{width} to {h}x{w}, expected {}x{}", height / s, width / s),
            ));
        }
        Ok((h, w))
    }
}

impl fmt::Display for BackboneConfig {
    /// `out:kernel:stride:pad:relu|linear`, comma separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            let act = if l.relu { "relu" } else { "linear" };
            write!(f, "{}:{}:{}:{}:{act}", l.out_channels, l.kernel, l.stride, l.pad)?;
        }
        Ok(())
    }
}

impl FromStr for BackboneConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |detail: String| Error::format("backbone", detail);
        let mut layers = Vec::new();
        for spec in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let parts: Vec<&str> = spec.split(':').collect();
            if parts.len() != 5 {
                return Err(bad(format!("layer {spec:?} must be out:kernel:stride:pad:relu|linear")));
            }
            let num = |p: &str| p.parse::<usize>().map_err(|_| bad(format!("bad number {p:?} in {spec:?}")));
            let relu = match parts[4] {
                "relu" => true,
                "linear" => false,
                other => return Err(bad(format!("unknown activation {other:?}"))),
            };
            layers.push(ConvLayer {
                out_channels: num(parts[0])?,
                kernel: num(parts[1])?,
                stride: num(parts[2])?,
                pad: num(parts[3])?,
                relu,
            });
        }
        let cfg = BackboneConfig { layers };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("backbone.{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("backbone.{layer}.bias")
}

/// Glorot-uniform filters, zero biases.
pub fn init_params<R: Rng + ?Sized>(params: &mut ParamStore, cfg: &BackboneConfig, rng: &mut R) {
    let mut in_ch = IMAGE_CHANNELS;
    for (i, l) in cfg.layers.iter().enumerate() {
        let k2 = l.kernel * l.kernel;
        let bound = (6.0 / ((in_ch * k2 + l.out_channels * k2) as f64)).sqrt();
        params.insert(weight_name(i), Tensor::uniform(&[l.out_channels, in_ch, l.kernel, l.kernel], bound, rng));
        params.insert(bias_name(i), Tensor::zeros(&[l.out_channels]));
        in_ch = l.out_channels;
    }
}

/// Runs the convolution stack on a `[3, H, W]` image; output `[D_im, H/s, W/s]`.
pub fn extract_feature_map(tape: &mut Tape, bound: &Bound, image: Var, cfg: &BackboneConfig) -> Result<Var> {
    let (c, h, w) = tape.value(image).chw()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::dim("extract_feature_map", format!("image has {c} channels, expected {IMAGE_CHANNELS}")));
    }
    cfg.grid_extents(h, w)?;
    let mut x = image;
    for (i, l) in cfg.layers.iter().enumerate() {
        let (wv, bv) = (bound.var(&weight_name(i))?, bound.var(&bias_name(i))?);
        x = tape.conv2d(x, wv, bv, l.stride, l.pad)?;
        if l.relu {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// L2-normalizes the descriptor at every grid location.
pub fn normalize_locations(tape: &mut Tape, map: Var) -> Result<Var> {
    tape.l2_normalize(map, NORM_EPS)
}

/// `[2, h, w]`: x then y, linearly spaced from -1 (first column/row) to +1
/// (last), or 0 along an axis of extent 1.
pub fn coordinate_channels(h: usize, w: usize) -> Tensor {
    let coord = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        data.extend((0..w).map(|j| coord(j, w)));
    }
    for i in 0..h {
        data.extend(std::iter::repeat_n(coord(i, h), w));
    }
    Tensor::new(vec![2, h, w], data).expect("coordinate grid shape")
}

/// Whether the coordinate channels carry positions or are zeroed (ablation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Coordinates {
    #[default]
    Relative,
    Zeroed,
}

pub fn append_coordinates(tape: &mut Tape, map: Var, mode: Coordinates) -> Result<Var> {
    let (_, h, w) = tape.value(map).chw()?;
    let coords = match mode {
        Coordinates::Relative => coordinate_channels(h, w),
        Coordinates::Zeroed => Tensor::zeros(&[2, h, w]),
    };
    let cv = tape.constant(coords);
    tape.concat(map, cv)
}

/// Full visual pathway: `[D_im + 2, H/s, W/s]`.
pub fn visual_features(
    tape: &mut Tape,
    bound: &Bound,
    image: Var,
    cfg: &BackboneConfig,
    coords: Coordinates,
) -> Result<Var> {
    let raw = extract_feature_map(tape, bound, image, cfg)?;
    let normed = normalize_locations(tape, raw)?;
    append_coordinates(tape, normed, coords)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn single_identity() -> (BackboneConfig, ParamStore) {
        let cfg = BackboneConfig { layers: vec![ConvLayer { out_channels: 3, kernel: 1, stride: 1, pad: 0, relu: false }] };
        let mut p = ParamStore::new();
        let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            eye.data_mut()[c * 3 + c] = 1.0;
        }
        p.insert(weight_name(0), eye);
        p.insert(bias_name(0), Tensor::zeros(&[3]));
        (cfg, p)
    }

    #[test]
    fn identity_network_passes_image_through() {
        let (cfg, p) = single_identity();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform(&[3, 5, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let x = tape.constant(img.clone());
        let y = extract_feature_map(&mut tape, &b, x, &cfg).unwrap();
        assert_eq!(tape.value(y), &img);
    }

    #[test]
    fn default_geometry() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.stride(), 4);
        assert_eq!(cfg.d_im(), 32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamStore::new();
        init_params(&mut p, &cfg, &mut rng);
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::uniform(&[3, 64, 64], 1.0, &mut rng));
        let y = extract_feature_map(&mut tape, &b, x, &cfg).unwrap();
        assert_eq!(tape.value(y).shape(), &[32, 16, 16]);

        let z = tape.constant(Tensor::zeros(&[3, 64, 64]));
        let y = extract_feature_map(&mut tape, &b, z, &cfg).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let odd = tape.constant(Tensor::zeros(&[3, 62, 62]));
        assert!(matches!(extract_feature_map(&mut tape, &b, odd, &cfg), Err(Error::Dimension { .. })));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.to_string(), "16:3:2:1:relu,32:3:2:1:relu,32:3:1:1:relu,32:3:1:1:relu");
        assert_eq!(cfg.to_string().parse::<BackboneConfig>().unwrap(), cfg);
        assert!("16:3:2:relu".parse::<BackboneConfig>().is_err());
        assert!("".parse::<BackboneConfig>().is_err());
    }

    #[test]
    fn normalization_examples() {
        let mut tape = Tape::new();
        let mut map = Tensor::zeros(&[2, 1, 2]);
        map.data_mut().copy_from_slice(&[3.0, 1.0, 4.0, 0.0]);
        let m = tape.constant(map);
        let n = normalize_locations(&mut tape, m).unwrap();
        let v = tape.value(n);
        assert_eq!((v.at3(0, 0, 0), v.at3(1, 0, 0)), (0.6, 0.8));
        assert_eq!((v.at3(0, 0, 1), v.at3(1, 0, 1)), (1.0, 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = tape.constant(Tensor::uniform(&[6, 3, 3], 1.0, &mut rng));
        let n1 = normalize_locations(&mut tape, m).unwrap();
        let n2 = normalize_locations(&mut tape, n1).unwrap();
        assert!(tape.value(n2).max_abs_diff(tape.value(n1)) < 1e-12);
        let big = tape.scale(m, 10.0);
        let nb = normalize_locations(&mut tape, big).unwrap();
        assert!(tape.value(nb).max_abs_diff(tape.value(n1)) < 1e-9);
    }

    #[test]
    fn normalization_keeps_argmax_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw = Tensor::uniform(&[5, 4, 4], 2.0, &mut rng);
        let mut tape = Tape::new();
        let m = tape.constant(raw.clone());
        let n = normalize_locations(&mut tape, m).unwrap();
        let normed = tape.value(n);
        let argmax = |t: &Tensor, y, x| (0..5).max_by(|&a, &b| t.at3(a, y, x).total_cmp(&t.at3(b, y, x))).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(argmax(&raw, y, x), argmax(normed, y, x));
            }
        }
    }

    #[test]
    fn coordinate_examples() {
        let c = coordinate_channels(3, 3);
        assert_eq!((0..3).map(|j| c.at3(0, 1, j)).collect::<Vec<_>>(), [-1.0, 0.0, 1.0]);
        assert_eq!((0..3).map(|i| c.at3(1, i, 2)).collect::<Vec<_>>(), [-1.0, 0.0, 1.0]);
        assert_eq!((c.at3(0, 0, 0), c.at3(1, 0, 0)), (-1.0, -1.0));
        assert_eq!((c.at3(0, 2, 2), c.at3(1, 2, 2)), (1.0, 1.0));
        let one = coordinate_channels(1, 1);
        assert_eq!(one.data(), &[0.0, 0.0]);
        let wide = coordinate_channels(4, 7);
        assert!(wide.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_descriptors_differ_after_coordinates() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::full(&[3, 2, 2], 0.5));
        let f = append_coordinates(&mut tape, m, Coordinates::Relative).unwrap();
        let v = tape.value(f);
        assert_eq!(v.shape(), &[5, 2, 2]);
        let at = |y, x| (0..5).map(|c| v.at3(c, y, x)).collect::<Vec<_>>();
        assert_eq!(at(0, 0)[..3], at(1, 1)[..3]);
        assert_ne!(at(0, 0)[3..], at(1, 1)[3..]);
        let z = append_coordinates(&mut tape, m, Coordinates::Zeroed).unwrap();
        assert!(tape.value(z).data()[12..].iter().all(|&c| c == 0.0));
    }

    #[test]
    fn coordinates_are_gradient_free() {
        let mut tape = Tape::new();
        let m = tape.param(Tensor::full(&[1, 2, 2], 0.5));
        let f = append_coordinates(&mut tape, m, Coordinates::Relative).unwrap();
        let l = tape.sum(f);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(m).unwrap().data(), &[1.0; 4]);
    }
}
