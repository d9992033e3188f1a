//! The end-to-end segmentation network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneConfig, Coordinates};
use crate::error::{Error, Result};
use crate::fusion::{self, Resolution, ResponseMap};
use crate::mask::Mask;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{self, EncoderConfig, TokenSequence, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub backbone: BackboneConfig,
    pub d_cls: usize,
    pub coordinates: Coordinates,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            backbone: BackboneConfig::default(),
            d_cls: 64,
            coordinates: Coordinates::Relative,
        }
    }
}

impl ModelConfig {
    /// Fused width `D_im + 2 + D_text`.
    pub fn d_star(&self) -> usize {
        self.backbone.d_im() + 2 + self.encoder.d_text
    }

    pub fn stride(&self) -> usize {
        self.backbone.stride()
    }
}

impl From<&crate::config::RunConfig> for ModelConfig {
    fn from(c: &crate::config::RunConfig) -> Self {
        ModelConfig { encoder: c.encoder(), backbone: c.backbone.clone(), d_cls: c.d_cls, coordinates: c.coordinates }
    }
}

/// Network parameters plus the vocabulary they were trained against.
///
/// Without a deconvolution filter the model is the low-resolution variant and
/// produces only coarse maps; [`SegModel::attach_bilinear_deconv`] turns it
/// into the high-resolution variant.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl SegModel {
    /// Randomly initialized low-resolution model.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&mut params, &config.backbone, &mut rng);
        text::init_params(&mut params, vocab.len(), config.encoder, &mut rng);
        fusion::init_classifier(&mut params, config.d_star(), config.d_cls, &mut rng);
        Ok(SegModel { config, vocab, params })
    }

    pub fn has_deconv(&self) -> bool {
        self.params.contains(fusion::DECONV_WEIGHT)
    }

    /// Adds the upsampling filter, initialized to bilinear interpolation. All
    /// other parameters are kept as they are.
    pub fn attach_bilinear_deconv(&mut self) -> Result<()> {
        let filter = fusion::make_bilinear_filter(self.config.stride())?;
        self.params.insert(fusion::DECONV_WEIGHT, filter);
        Ok(())
    }

    pub fn without_deconv(&self) -> SegModel {
        let mut m = self.clone();
        m.params.remove(fusion::DECONV_WEIGHT);
        m
    }

    pub fn encode(&self, expression: &str) -> TokenSequence {
        self.vocab.encode(expression)
    }

    /// Coarse score map `[1, H/s, W/s]` recorded on `tape`.
    pub fn forward_coarse(&self, tape: &mut Tape, bound: &Bound, image: &Tensor, tokens: &TokenSequence) -> Result<Var> {
        let img = tape.constant(image.clone());
        let features = backbone::visual_features(tape, bound, img, &self.config.backbone, self.config.coordinates)?;
        let h_t = text::encode_expression(tape, bound, tokens)?;
        let fused = fusion::tile_and_concat(tape, features, h_t)?;
        fusion::classify(tape, bound, fused)
    }

    /// Score map at the requested resolution. High resolution uses the learned
    /// filter when present and fixed bilinear interpolation otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: &Tensor,
        tokens: &TokenSequence,
        resolution: Resolution,
    ) -> Result<Var> {
        let coarse = self.forward_coarse(tape, bound, image, tokens)?;
        match resolution {
            Resolution::Coarse => Ok(coarse),
            Resolution::High => {
                let (_, h, w) = image.chw()?;
                let filter = match bound.var(fusion::DECONV_WEIGHT) {
                    Ok(v) => v,
                    Err(_) => tape.constant(fusion::make_bilinear_filter(self.config.stride())?),
                };
                fusion::upsample(tape, coarse, filter, self.config.stride(), (h, w))
            }
        }
    }

    /// Inference without gradient tracking.
    pub fn response(&self, image: &Tensor, tokens: &TokenSequence, resolution: Resolution) -> Result<ResponseMap> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, image, tokens, resolution)?;
        let scores = tape.value(out).clone();
        if !scores.all_finite() {
            return Err(Error::Numeric("non-finite value in response map".into()));
        }
        Ok(ResponseMap { scores, resolution })
    }

    pub fn predict(&self, image: &Tensor, expression: &str) -> Result<Mask> {
        let r = self.response(image, &self.encode(expression), Resolution::High)?;
        fusion::decide(&r.scores)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::backbone::ConvLayer;
    use crate::tensor::gradcheck::max_rel_error;

    fn tiny_config() -> ModelConfig {
        let layer = |c| ConvLayer { out_channels: c, kernel: 3, stride: 2, pad: 1, relu: true };
        ModelConfig {
            encoder: EncoderConfig { d_embed: 3, d_text: 3 },
            backbone: BackboneConfig { layers: vec![layer(3), layer(4)] },
            d_cls: 4,
            coordinates: Coordinates::Relative,
        }
    }

    #[test]
    fn shapes_through_the_network() {
        let vocab = Vocabulary::build(["red square", "blue circle"]);
        let mut m = SegModel::init(ModelConfig::default(), vocab, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::uniform(&[3, 64, 64], 1.0, &mut rng).map(f64::abs);
        let toks = m.encode("red circle");
        assert_eq!(m.response(&img, &toks, Resolution::Coarse).unwrap().extents(), (16, 16));
        m.attach_bilinear_deconv().unwrap();
        assert_eq!(m.response(&img, &toks, Resolution::High).unwrap().extents(), (64, 64));
        assert_eq!(m.predict(&img, "red circle").unwrap().extents(), (64, 64));
    }

    /// Whole-network gradient through deconvolution, classifier, tiling,
    /// backbone, and LSTM on a 16x16 image.
    #[test]
    fn end_to_end_gradients() {
        let vocab = Vocabulary::build(["red square left"]);
        let mut m = SegModel::init(tiny_config(), vocab, 3).unwrap();
        m.attach_bilinear_deconv().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = Tensor::uniform(&[3, 16, 16], 1.0, &mut rng);
        let tokens = m.encode("left red square");
        let mask = Mask::from_fn(16, 16, |y, x| (4..11).contains(&y) && (2..9).contains(&x));
        let names: Vec<String> = m.params.names().map(str::to_string).collect();
        let ins: Vec<Tensor> = names.iter().map(|n| m.params.get(n).unwrap().clone()).collect();
        let e = max_rel_error(&ins, 5, |tape, vars| {
            let mut p = ParamStore::new();
            let mut mapping = Vec::new();
            for (n, &v) in names.iter().zip(vars) {
                p.insert(n.clone(), tape.value(v).clone());
                mapping.push((n.clone(), v));
            }
            let bound = Bound::from_pairs(mapping);
            let out = m.forward(tape, &bound, &image, &tokens, Resolution::High).unwrap();
            crate::train::total_loss(tape, out, &mask, crate::train::LossWeights::default()).unwrap()
        });
        assert!(e < 1e-4, "{e}");
    }
}
