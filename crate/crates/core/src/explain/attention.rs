// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-based attribution: the bridge's head-averaged last-layer
//! cross-attention, pooled to features, read off directly. No perturbed
//! inputs are scored.

use super::Method;
use crate::attribution::AttributionMatrix;
use crate::error::Result;
use crate::instance::Instance;
use crate::oracle::Oracle;

pub fn explain_attention(instance: &Instance, oracle: &mut Oracle, seed: u64) -> Result<AttributionMatrix> {
    let attention = oracle.attention(instance)?;
    // A is T × d; phi is d × T
    let phi = (0..instance.num_features())
        .map(|i| attention.iter().map(|row| row[i]).collect())
        .collect();
    AttributionMatrix::new(instance, Method::Attention.as_str(), seed, phi)
}
