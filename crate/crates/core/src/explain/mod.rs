// SPDX-License-Identifier: MIT OR Apache-2.0

//! Local explanation methods. Each one turns value-function evaluations into
//! a `d × T` [`AttributionMatrix`], treating every output token as its own
//! prediction.
//!
//! The value function is `v_t(S) = log p(y_t | y_<t, x(S))`, the teacher-forced
//! logprob of output token `t` when only the features in coalition `S` are
//! left unmasked.

mod attention;
mod kernel_shap;
mod lime;
mod shapley;
mod wls;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use attention::explain_attention;
pub use kernel_shap::{explain_kernel_shap, kernel_shap_values, shapley_kernel_weight};
pub use lime::{
    explain_lerg_l, explain_lime, lerg_l_fit, lerg_l_values, lime_fit, lime_values, sample_bernoulli_masks,
};
pub use shapley::{
    explain_lerg_s, explain_shapley_exact, lerg_s_values, shapley_exact_values, shapley_from_permutations,
};
pub use wls::{wls_solve, wls_solve_with, LinearConstraint, WlsOptions, WlsSolution, RANK_TOLERANCE};

use crate::attribution::AttributionMatrix;
use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::mask::Mask;
use crate::oracle::Oracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lime,
    ShapleyExact,
    LergS,
    KernelShap,
    LergL,
    Attention,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Lime,
        Method::ShapleyExact,
        Method::LergS,
        Method::KernelShap,
        Method::LergL,
        Method::Attention,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Lime => "lime",
            Method::ShapleyExact => "shapley_exact",
            Method::LergS => "lerg_s",
            Method::KernelShap => "kernel_shap",
            Method::LergL => "lerg_l",
            Method::Attention => "attention",
        }
    }

    /// Whether the method queries the model on perturbed inputs.
    pub fn uses_perturbations(&self) -> bool {
        *self != Method::Attention
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|m| m.as_str()).join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method {s:?}; valid methods: {}", Self::valid_names())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    pub method: Method,
    /// Perturbations (lime, lerg_l, kernel_shap) or permutations (lerg_s).
    pub n_samples: usize,
    /// Width of LIME's exponential locality kernel.
    pub kernel_width: f64,
    pub ridge_lambda: f64,
    pub seed: u64,
    /// Largest feature count accepted by exact enumeration.
    pub d_max_exact: usize,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            method: Method::LergS,
            n_samples: 1000,
            kernel_width: 0.75,
            ridge_lambda: 1e-6,
            seed: 0,
            d_max_exact: 12,
        }
    }
}

impl ExplainerConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Invalid("n_samples must be >= 1".into()));
        }
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return Err(Error::Invalid(format!(
                "kernel_width must be > 0, got {}",
                self.kernel_width
            )));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::Invalid(format!(
                "ridge_lambda must be >= 0, got {}",
                self.ridge_lambda
            )));
        }
        if self.d_max_exact == 0 {
            return Err(Error::Invalid("d_max_exact must be >= 1".into()));
        }
        Ok(())
    }
}

/// Source of `v_t(S)` for every output token at once.
pub trait ValueFunction {
    fn num_features(&self) -> usize;
    fn num_outputs(&self) -> usize;
    /// `rows[j][t] = v_t(masks[j])`.
    fn values(&mut self, masks: &[Mask]) -> Result<Vec<Vec<f64>>>;
}

/// Value function of an instance scored through an oracle.
pub struct OracleValues<'a> {
    oracle: &'a mut Oracle,
    instance: &'a Instance,
}

impl<'a> OracleValues<'a> {
    pub fn new(oracle: &'a mut Oracle, instance: &'a Instance) -> Self {
        Self { oracle, instance }
    }
}

impl ValueFunction for OracleValues<'_> {
    fn num_features(&self) -> usize {
        self.instance.num_features()
    }

    fn num_outputs(&self) -> usize {
        self.instance.num_outputs()
    }

    fn values(&mut self, masks: &[Mask]) -> Result<Vec<Vec<f64>>> {
        self.oracle.score_batch(self.instance, masks)
    }
}

/// Value function given by a closure over masks.
pub struct FnValues<F> {
    d: usize,
    t: usize,
    f: F,
}

impl<F: FnMut(&Mask) -> Vec<f64>> FnValues<F> {
    pub fn new(d: usize, t: usize, f: F) -> Self {
        Self { d, t, f }
    }
}

impl<F: FnMut(&Mask) -> Vec<f64>> ValueFunction for FnValues<F> {
    fn num_features(&self) -> usize {
        self.d
    }

    fn num_outputs(&self) -> usize {
        self.t
    }

    fn values(&mut self, masks: &[Mask]) -> Result<Vec<Vec<f64>>> {
        Ok(masks.iter().map(|m| (self.f)(m)).collect())
    }
}

/// Runs the method named in `config`.
pub fn explain(instance: &Instance, oracle: &mut Oracle, config: &ExplainerConfig) -> Result<AttributionMatrix> {
    match config.method {
        Method::Lime => explain_lime(instance, oracle, config),
        Method::ShapleyExact => explain_shapley_exact(instance, oracle, config),
        Method::LergS => explain_lerg_s(instance, oracle, config),
        Method::KernelShap => explain_kernel_shap(instance, oracle, config),
        Method::LergL => explain_lerg_l(instance, oracle, config),
        Method::Attention => explain_attention(instance, oracle, config.seed),
    }
}

/// `d × T` matrix of zeros.
pub(crate) fn zeros(d: usize, t: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; t]; d]
}
