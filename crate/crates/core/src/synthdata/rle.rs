use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{input, Result};

/// Row-major run-length encoding of a binary mask.
///
/// `first` is the value of the first run; runs alternate from there. An
/// all-ones mask is a single run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub first: u8,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(m: &Mask) -> Self {
        let mut counts = Vec::new();
        let first = m.bits.first().map_or(0, |&b| u8::from(b != 0));
        let mut cur = first;
        let mut run = 0u32;
        for &b in &m.bits {
            let b = u8::from(b != 0);
            if b == cur {
                run += 1;
            } else {
                counts.push(run);
                cur = b;
                run = 1;
            }
        }
        if run > 0 {
            counts.push(run);
        }
        Self { height: m.height, width: m.width, first, counts }
    }

    pub fn decode(&self) -> Result<Mask> {
        if self.first > 1 {
            return input("rle 'first' must be 0 or 1");
        }
        let total: u64 = self.counts.iter().map(|&c| u64::from(c)).sum();
        if total != (self.height * self.width) as u64 {
            return input(format!("rle covers {total} pixels, expected {}", self.height * self.width));
        }
        let mut bits = Vec::with_capacity(self.height * self.width);
        let mut v = self.first;
        for &c in &self.counts {
            bits.extend(std::iter::repeat_n(v, c as usize));
            v ^= 1;
        }
        Ok(Mask { height: self.height, width: self.width, bits })
    }
}
