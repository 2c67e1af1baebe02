// SPDX-License-Identifier: MIT OR Apache-2.0

//! # seqattrib
//!
//! Feature attribution for conditional sequence generators. Every output
//! token is treated as its own prediction and attributed to groups of input
//! tokens ("features") by one of several local explanation methods:
//!
//! - exact Shapley values by coalition enumeration (small inputs),
//! - LERG_S, permutation-sampling Shapley values,
//! - Kernel SHAP, constrained Shapley-kernel weighted regression,
//! - LIME and LERG_L, local linear surrogates over random masks,
//! - head-averaged cross-attention reported by the model server.
//!
//! Models are reached through a [`oracle::Bridge`]: a subprocess speaking
//! JSON-lines, an HTTP endpoint, or the in-process [`toymodel`] whose value
//! function is known in closed form. Explanations are scored for
//! faithfulness with sufficiency and necessity perplexity curves.
//!
//! ```
//! use seqattrib::explain::{explain, ExplainerConfig, Method};
//! use seqattrib::oracle::Oracle;
//! use seqattrib::toymodel::{toy_corpus, ToyBridge};
//!
//! # fn main() -> seqattrib::Result<()> {
//! let instance = toy_corpus(42, 1)?.remove(0);
//! let mut oracle = Oracle::new(Box::new(ToyBridge::for_instance(&instance)?));
//! let phi = explain(&instance, &mut oracle, &ExplainerConfig::for_method(Method::ShapleyExact))?;
//! assert_eq!(phi.num_features(), instance.num_features());
//! # Ok(())
//! # }
//! ```

pub mod attribution;
pub mod error;
pub mod explain;
pub mod faithfulness;
pub mod instance;
pub mod mask;
pub mod oracle;
pub mod report;
pub mod toymodel;

pub use attribution::{aggregate_attribution, top_k_features, Aggregation, AttributionMatrix, SaliencyVector};
pub use error::{Error, Result};
pub use instance::{FeatureGroup, Instance, InstanceRecord, Span};
pub use mask::Mask;
