//! Run configuration: a flat `key=value` text file.
//!
//! Every key has a default; the full resolved set is written into checkpoints
//! so a saved model records exactly how it was built and trained.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::{BackboneConfig, Coordinates};
use crate::error::{Error, Result};
use crate::text::EncoderConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct StageSettings {
    pub lr: f64,
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub d_embed: usize,
    pub d_text: usize,
    pub d_cls: usize,
    pub backbone: BackboneConfig,
    pub coordinates: Coordinates,
    pub image_width: usize,
    pub image_height: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub alpha_f: f64,
    pub alpha_b: f64,
    pub log_every: u64,
    pub seed: u64,
    pub low: StageSettings,
    pub high: StageSettings,
    pub perword: StageSettings,
    /// Cap on the per-word baseline's word list; 0 keeps every non-stop word.
    pub perword_max_words: usize,
    /// Space-separated stop words excluded from the per-word list.
    pub perword_stopwords: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_embed: 32,
            d_text: 64,
            d_cls: 64,
            backbone: BackboneConfig::default(),
            coordinates: Coordinates::Relative,
            image_width: 64,
            image_height: 64,
            momentum: 0.9,
            batch_size: 1,
            alpha_f: 3.0,
            alpha_b: 1.0,
            log_every: 100,
            seed: 0,
            low: StageSettings { lr: 0.01, iterations: 5000 },
            high: StageSettings { lr: 0.01, iterations: 2000 },
            perword: StageSettings { lr: 0.01, iterations: 5000 },
            perword_max_words: 0,
            perword_stopwords: Vec::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format("config", format!("`{key}`: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig { d_embed: self.d_embed, d_text: self.d_text }
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_width, self.image_height)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "d_embed" => self.d_embed = parse_num(key, v)?,
            "d_text" => self.d_text = parse_num(key, v)?,
            "d_cls" => self.d_cls = parse_num(key, v)?,
            "backbone" => self.backbone = v.parse()?,
            "coordinates" => {
                self.coordinates = match v {
                    "relative" => Coordinates::Relative,
                    "zeroed" => Coordinates::Zeroed,
                    other => return Err(Error::format("config", format!("`coordinates`: unknown mode {other:?}"))),
                }
            }
            "image_width" => self.image_width = parse_num(key, v)?,
            "image_height" => self.image_height = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "alpha_f" => self.alpha_f = parse_num(key, v)?,
            "alpha_b" => self.alpha_b = parse_num(key, v)?,
            "log_every" => self.log_every = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "low.lr" => self.low.lr = parse_num(key, v)?,
            "low.iterations" => self.low.iterations = parse_num(key, v)?,
            "high.lr" => self.high.lr = parse_num(key, v)?,
            "high.iterations" => self.high.iterations = parse_num(key, v)?,
            "perword.lr" => self.perword.lr = parse_num(key, v)?,
            "perword.iterations" => self.perword.iterations = parse_num(key, v)?,
            "perword.max_words" => self.perword_max_words = parse_num(key, v)?,
            "perword.stopwords" => self.perword_stopwords = v.split_whitespace().map(str::to_string).collect(),
            other => return Err(Error::format("config", format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let coords = match self.coordinates {
            Coordinates::Relative => "relative",
            Coordinates::Zeroed => "zeroed",
        };
        [
            ("d_embed", self.d_embed.to_string()),
            ("d_text", self.d_text.to_string()),
            ("d_cls", self.d_cls.to_string()),
            ("backbone", self.backbone.to_string()),
            ("coordinates", coords.to_string()),
            ("image_width", self.image_width.to_string()),
            ("image_height", self.image_height.to_string()),
            ("momentum", self.momentum.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("alpha_f", self.alpha_f.to_string()),
            ("alpha_b", self.alpha_b.to_string()),
            ("log_every", self.log_every.to_string()),
            ("seed", self.seed.to_string()),
            ("low.lr", self.low.lr.to_string()),
            ("low.iterations", self.low.iterations.to_string()),
            ("high.lr", self.high.lr.to_string()),
            ("high.iterations", self.high.iterations.to_string()),
            ("perword.lr", self.perword.lr.to_string()),
            ("perword.iterations", self.perword.iterations.to_string()),
            ("perword.max_words", self.perword_max_words.to_string()),
            ("perword.stopwords", self.perword_stopwords.join(" ")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.to_map().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let s = self.backbone.stride();
        if !self.image_width.is_multiple_of(s) || !self.image_height.is_multiple_of(s) {
            return Err(Error::dim(
                "config",
                format!("image size {}x{} is not divisible by the backbone stride {s}", self.image_width, self.image_height),
            ));
        }
        if s > 1 && !s.is_multiple_of(2) {
            return Err(Error::contract("config", format!("backbone stride {s} must be even")));
        }
        if !(self.alpha_f > 0.0 && self.alpha_b > 0.0) {
            return Err(Error::contract("config", "loss weights must be positive"));
        }
        if self.batch_size == 0 || self.d_embed == 0 || self.d_text == 0 || self.d_cls == 0 {
            return Err(Error::contract("config", "batch size and widths must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_overrides() {
        let cfg = RunConfig::parse("# desk run\nd_text = 16\nlow.lr=0.05\ncoordinates=zeroed\n").unwrap();
        assert_eq!(cfg.d_text, 16);
        assert_eq!(cfg.low.lr, 0.05);
        assert_eq!(cfg.coordinates, Coordinates::Zeroed);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::from_map(&cfg.to_map()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nonsense").is_err());
        assert!(RunConfig::parse("unknown_key=1").is_err());
        assert!(RunConfig::parse("d_cls=many").is_err());
        let err = RunConfig::parse("image_width=62").unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }), "{err}");
        assert!(RunConfig::parse("alpha_f=0").is_err());
    }
}
