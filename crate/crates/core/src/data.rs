//! Samples and the tab-separated corpus manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::pnm;
use crate::tensor::Tensor;
use crate::text::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::format("manifest", format!("unknown split tag {other:?}"))),
        }
    }
}

/// One `(image, expression, mask)` training or evaluation tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    pub expression: String,
    pub tokens: Vec<String>,
    pub mask: Mask,
}

impl Sample {
    pub fn new(image: Tensor, expression: impl Into<String>, mask: Mask) -> Result<Self> {
        let (_, h, w) = image.chw()?;
        if mask.extents() != (h, w) {
            return Err(Error::dim("sample", format!("image {h}x{w} vs mask {:?}", mask.extents())));
        }
        let expression = expression.into();
        let tokens = tokenize(&expression);
        Ok(Sample { image, expression, tokens, mask })
    }

    pub fn extents(&self) -> (usize, usize) {
        self.mask.extents()
    }
}

/// Manifest line: image path, mask path, split, expression (tab-separated,
/// expression last). Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub expression: String,
}

impl Record {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.image.display(), self.mask.display(), self.split, self.expression)
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(Error::format("manifest", format!("line {}: expected 4 tab-separated fields", n + 1)));
        }
        let split = fields[2]
            .parse()
            .map_err(|e: Error| Error::format("manifest", format!("line {}: {e}", n + 1)))?;
        out.push(Record {
            image: PathBuf::from(fields[0]),
            mask: PathBuf::from(fields[1]),
            split,
            expression: fields[3].to_string(),
        });
    }
    Ok(out)
}

pub fn write_manifest(records: &[Record]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_manifest(&text)?;
    if records.is_empty() {
        return Err(Error::contract("load_manifest", format!("{} has no records", path.display())));
    }
    Ok(records)
}

/// Decodes one record's image and mask, resolving paths against `root`.
pub fn load_record(root: &Path, index: usize, record: &Record) -> Result<Sample> {
    let name = |e: Error| Error::format(format!("record {index} ({})", record.image.display()), e.to_string());
    let image = pnm::read_ppm_file(&root.join(&record.image)).map_err(name)?;
    let mask = pnm::read_mask_file(&root.join(&record.mask)).map_err(name)?;
    Sample::new(image, record.expression.clone(), mask).map_err(name)
}

/// Loads every record of the manifest (optionally restricted to one split),
/// decoding files in parallel.
pub fn load_manifest(path: &Path, split: Option<Split>) -> Result<Vec<Sample>> {
    let records = read_manifest(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let chosen: Vec<(usize, &Record)> =
        records.iter().enumerate().filter(|(_, r)| split.is_none_or(|s| r.split == s)).collect();
    if chosen.is_empty() {
        return Err(Error::contract("load_manifest", format!("no records for split {split:?}")));
    }
    crate::par::map(&chosen, |(i, r)| load_record(root, *i, r)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lines_round_trip() {
        let recs = vec![Record {
            image: "images/000001.ppm".into(),
            mask: "masks/000001.pgm".into(),
            split: Split::Val,
            expression: "red square on the left".into(),
        }];
        assert_eq!(parse_manifest(&write_manifest(&recs)).unwrap(), recs);
    }

    #[test]
    fn unknown_split_is_rejected() {
        let err = parse_manifest("a.ppm\tb.pgm\tholdout\tthe red square\n").unwrap_err();
        assert!(err.to_string().contains("holdout"), "{err}");
        assert!(parse_manifest("a.ppm\tb.pgm\n").is_err());
    }

    #[test]
    fn empty_manifest_is_a_contract_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.tsv");
        std::fs::write(&p, "\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Contract { .. })));
    }
}
