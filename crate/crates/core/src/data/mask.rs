//! Binary region masks with run-length JSON serialization.
//!
//! JSON form: `{"width": W, "height": H, "counts": [c0, c1, ...]}` where runs
//! alternate starting with an unset run (possibly of length 0), scanning pixels
//! row-major. The counts always sum to `W·H`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RleMask", into = "RleMask")]
pub struct RegionMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RleMask {
    width: usize,
    height: usize,
    counts: Vec<u32>,
}

impl RegionMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Validation(format!(
                "mask has {} pixels, expected {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Decode alternating runs (first run unset).
    pub fn from_runs(width: usize, height: usize, counts: &[u32]) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != (width * height) as u64 {
            return Err(Error::Format(format!(
                "RLE counts sum to {total}, expected {}",
                width * height
            )));
        }
        let mut bits = Vec::with_capacity(width * height);
        let mut value = false;
        for &c in counts {
            bits.extend(std::iter::repeat(value).take(c as usize));
            value = !value;
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn runs(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut value = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b == value {
                run += 1;
            } else {
                counts.push(run);
                value = b;
                run = 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_canvas(&self, other: &RegionMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn iou(&self, other: &RegionMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl TryFrom<RleMask> for RegionMask {
    type Error = Error;

    fn try_from(rle: RleMask) -> Result<Self> {
        RegionMask::from_runs(rle.width, rle.height, &rle.counts)
    }
}

impl From<RegionMask> for RleMask {
    fn from(m: RegionMask) -> Self {
        RleMask {
            width: m.width,
            height: m.height,
            counts: m.runs(),
        }
    }
}
