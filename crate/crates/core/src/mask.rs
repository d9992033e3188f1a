use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary `height x width` segmentation mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim("mask", format!("{height}x{width} mask needs {} bits, got {}", height * width, bits.len())));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![true; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect();
        Mask { height, width, bits }
    }

    /// Interprets a tensor of 0/1 values (any shape with `height * width` elements).
    pub fn from_binary_tensor(t: &Tensor, height: usize, width: usize) -> Result<Self> {
        if t.len() != height * width {
            return Err(Error::dim("mask", format!("tensor {:?} is not {height}x{width}", t.shape())));
        }
        let bits = t
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(Error::contract("mask", format!("non-binary value {other}"))),
            })
            .collect::<Result<_>>()?;
        Ok(Mask { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// `[1, H, W]` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("mask extents")
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a || b)
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.extents() == other.extents() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        if self.extents() != other.extents() {
            return Err(Error::dim("mask", format!("{:?} vs {:?}", self.extents(), other.extents())));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Ok(Mask { height: self.height, width: self.width, bits })
    }
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.height, self.width, self.count())
    }
}
