// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary feature-inclusion vectors.

use std::fmt;

/// One perturbation: bit `i` is set when feature `i` is present.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// All features present.
    pub fn full(d: usize) -> Self {
        Self { bits: vec![true; d] }
    }

    /// All features masked.
    pub fn empty(d: usize) -> Self {
        Self { bits: vec![false; d] }
    }

    /// Mask of length `d` with exactly the listed features present.
    pub fn from_present(d: usize, present: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; d];
        for i in present {
            bits[i] = true;
        }
        Self { bits }
    }

    /// Mask whose bit `i` is bit `i` of `code` (feature 0 is the lowest bit).
    pub fn from_code(d: usize, code: u64) -> Self {
        Self {
            bits: (0..d).map(|i| code >> i & 1 == 1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.iter().copied()
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// Number of present features `|z|`.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn set(&mut self, i: usize, present: bool) {
        self.bits[i] = present;
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn present_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter_map(|(i, b)| b.then_some(i))
    }

    /// Parses the `0101` form produced by `Display`.
    pub fn parse(text: &str) -> Option<Self> {
        text.chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Self::from_bits)
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}
