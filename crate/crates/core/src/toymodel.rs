// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-form conditional sequence model used as a hermetic stand-in for a
//! real model server.
//!
//! Output step `t` has logits `b_t + Σ_{i present} W_t[i]`; masked features
//! contribute nothing. The value function is therefore a softmax of an
//! additive score: nonlinear in the features, yet cheap enough that every
//! Shapley quantity can be brute-forced over all `2^d` coalitions.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{FeatureGroup, Instance, InstanceRecord, Span};
use crate::mask::Mask;
use crate::oracle::{Bridge, BridgeCapabilities, Message};

/// Mask token announced by the toy bridge.
pub const TOY_MASK_TOKEN: &str = "<mask>";

/// Vocabulary size used when instance metadata does not name one.
pub const DEFAULT_TOY_VOCAB: usize = 4;

/// Parameters of one output position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStep {
    /// `d × V`, row `i` is added to the logits when feature `i` is present.
    pub weights: Vec<Vec<f64>>,
    /// Length `V`.
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub vocab: Vec<String>,
    pub steps: Vec<ToyStep>,
}

impl ToyModelSpec {
    pub fn new(vocab: Vec<String>, steps: Vec<ToyStep>) -> Result<Self> {
        let spec = Self { vocab, steps };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab.len();
        if v < 2 {
            return Err(Error::Invalid(format!("toy vocabulary has {v} symbols, need >= 2")));
        }
        let Some(first) = self.steps.first() else {
            return Err(Error::Invalid("toy model has no output steps".into()));
        };
        let d = first.weights.len();
        if d == 0 {
            return Err(Error::Invalid("toy model has no features".into()));
        }
        for (t, step) in self.steps.iter().enumerate() {
            if step.weights.len() != d {
                return Err(Error::dim(d, step.weights.len(), format!("toy step {t} weight rows")));
            }
            if step.bias.len() != v {
                return Err(Error::dim(v, step.bias.len(), format!("toy step {t} bias")));
            }
            for row in &step.weights {
                if row.len() != v {
                    return Err(Error::dim(v, row.len(), format!("toy step {t} weight columns")));
                }
            }
            let all_finite = step.weights.iter().flatten().chain(&step.bias).all(|x| x.is_finite());
            if !all_finite {
                return Err(Error::Invalid(format!("toy step {t} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.steps[0].weights.len()
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    fn symbol(&self, token: &str) -> Result<usize> {
        self.vocab
            .iter()
            .position(|s| s == token)
            .ok_or_else(|| Error::Vocabulary(token.to_string()))
    }

    fn check_outputs(&self, output_tokens: &[String]) -> Result<Vec<usize>> {
        if output_tokens.len() != self.num_steps() {
            return Err(Error::dim(self.num_steps(), output_tokens.len(), "toy output length"));
        }
        output_tokens.iter().map(|tok| self.symbol(tok)).collect()
    }

    fn logits(&self, t: usize, present: &Mask) -> Vec<f64> {
        let step = &self.steps[t];
        let mut logits = step.bias.clone();
        for i in present.present_indices() {
            for (l, w) in logits.iter_mut().zip(&step.weights[i]) {
                *l += w;
            }
        }
        logits
    }

    /// Teacher-forced logprobs `log softmax(logits_t)[y_t]` with only the
    /// features of `present` contributing.
    pub fn score(&self, present: &Mask, output_tokens: &[String]) -> Result<Vec<f64>> {
        if present.len() != self.num_features() {
            return Err(Error::dim(self.num_features(), present.len(), "toy mask length"));
        }
        let symbols = self.check_outputs(output_tokens)?;
        Ok(symbols
            .iter()
            .enumerate()
            .map(|(t, &y)| log_softmax_at(&self.logits(t, present), y))
            .collect())
    }

    /// `T × d` matrix with row `t` the softmax over features of `W_t[i][y_t]`.
    pub fn attention(&self, output_tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        let symbols = self.check_outputs(output_tokens)?;
        Ok(symbols
            .iter()
            .zip(&self.steps)
            .map(|(&y, step)| {
                let column: Vec<f64> = step.weights.iter().map(|row| row[y]).collect();
                softmax(&column)
            })
            .collect())
    }

    /// Argmax symbol at every step (lowest index on ties).
    pub fn greedy_decode(&self, present: &Mask) -> Vec<String> {
        (0..self.num_steps())
            .map(|t| {
                let logits = self.logits(t, present);
                let best = logits
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > logits[best] { i } else { best });
                self.vocab[best].clone()
            })
            .collect()
    }

    /// Random spec with every weight and bias i.i.d. uniform in `[-2, 2]`.
    /// Draw order: for each step, the weight rows then the bias.
    pub fn generate(seed: u64, d: usize, t: usize, v: usize) -> Result<Self> {
        if d == 0 || t == 0 || v == 0 {
            return Err(Error::Invalid(format!(
                "toy dimensions must be >= 1 (d={d}, T={t}, V={v})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect() };
        let steps = (0..t)
            .map(|_| ToyStep {
                weights: (0..d).map(|_| draw(v)).collect(),
                bias: draw(v),
            })
            .collect();
        Ok(Self {
            vocab: (0..v).map(|k| format!("s{k}")).collect(),
            steps,
        })
    }

    /// The toy model an instance was generated from: metadata `toy_seed` and
    /// optional `toy_vocab`, with `d` and `T` taken from the instance.
    pub fn for_instance(instance: &Instance) -> Result<Self> {
        let meta = instance.metadata();
        let seed = meta
            .get("toy_seed")
            .ok_or_else(|| Error::Invalid(format!("instance {} has no toy_seed metadata", instance.id())))?
            .parse::<u64>()
            .map_err(|e| Error::Invalid(format!("toy_seed: {e}")))?;
        let vocab = match meta.get("toy_vocab") {
            Some(v) => v
                .parse::<usize>()
                .map_err(|e| Error::Invalid(format!("toy_vocab: {e}")))?,
            None => DEFAULT_TOY_VOCAB,
        };
        Self::generate(seed, instance.num_features(), instance.num_outputs(), vocab)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    // lse >= max >= logits[y], so the result is never positive
    logits[y] - log_sum_exp(logits)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Deliberate contract violations, for exercising validation and
/// conformance checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyFault {
    #[default]
    None,
    /// First logprob of every response is `+0.5`.
    PositiveLogprob,
    /// First logprob of every response is NaN.
    NanLogprob,
    /// Last logprob of every response is dropped.
    TruncateLogprobs,
    /// Attention rows are scaled to sum to 0.8.
    BadAttention,
    /// Announces no attention support.
    NoAttention,
    /// Adds a per-call drift to every logprob.
    Unstable,
}

impl std::str::FromStr for ToyFault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::Invalid(format!("unknown toy fault {s:?}")))
    }
}

/// Request counts observed by a toy bridge, shared with its creator.
#[derive(Debug, Default)]
pub struct ToyCallCounts {
    pub score: AtomicU64,
    pub attention: AtomicU64,
    pub generate: AtomicU64,
}

impl ToyCallCounts {
    pub fn score(&self) -> u64 {
        self.score.load(Ordering::Relaxed)
    }

    pub fn attention(&self) -> u64 {
        self.attention.load(Ordering::Relaxed)
    }
}

/// In-process bridge backed by a [`ToyModelSpec`].
///
/// A feature counts as present when none of its tokens equals the mask token.
pub struct ToyBridge {
    spec: ToyModelSpec,
    features: Vec<FeatureGroup>,
    capabilities: BridgeCapabilities,
    fault: ToyFault,
    counts: Arc<ToyCallCounts>,
}

impl ToyBridge {
    pub fn new(spec: ToyModelSpec, features: Vec<FeatureGroup>) -> Result<Self> {
        spec.validate()?;
        if features.len() != spec.num_features() {
            return Err(Error::dim(spec.num_features(), features.len(), "toy bridge features"));
        }
        Ok(Self {
            spec,
            features,
            capabilities: BridgeCapabilities {
                mask_token: TOY_MASK_TOKEN.to_string(),
                supports_attention: true,
                max_batch: 64,
                supports_generate: true,
            },
            fault: ToyFault::None,
            counts: Arc::default(),
        })
    }

    /// Bridge for an instance generated by [`toy_corpus`] (or any instance
    /// with `toy_seed` metadata).
    pub fn for_instance(instance: &Instance) -> Result<Self> {
        Self::new(ToyModelSpec::for_instance(instance)?, instance.features().to_vec())
    }

    pub fn with_fault(mut self, fault: ToyFault) -> Self {
        self.fault = fault;
        if fault == ToyFault::NoAttention {
            self.capabilities.supports_attention = false;
        }
        self
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.capabilities.max_batch = max_batch;
        self
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn counts(&self) -> Arc<ToyCallCounts> {
        Arc::clone(&self.counts)
    }

    /// The `hello` line this bridge announces.
    pub fn announcement(&self) -> Message {
        Message::Hello {
            mask_token: self.capabilities.mask_token.clone(),
            supports_attention: self.capabilities.supports_attention,
            max_batch: self.capabilities.max_batch,
            supports_generate: self.capabilities.supports_generate,
        }
    }

    fn present(&self, input_tokens: &[String]) -> std::result::Result<Mask, String> {
        let mut mask = Mask::full(self.features.len());
        for (i, feature) in self.features.iter().enumerate() {
            for idx in feature.token_indices() {
                match input_tokens.get(idx) {
                    Some(tok) if tok == &self.capabilities.mask_token => mask.set(i, false),
                    Some(_) => {}
                    None => {
                        return Err(format!(
                            "input has {} tokens but feature {i} spans token {idx}",
                            input_tokens.len()
                        ))
                    }
                }
            }
        }
        Ok(mask)
    }

    /// Answers one protocol request.
    pub fn respond(&self, request: &Message) -> Message {
        let error = |id: &str, message: String| Message::Error {
            id: id.to_string(),
            message,
        };
        match request {
            Message::Score {
                id,
                input_tokens,
                output_tokens,
            } => {
                let n = self.counts.score.fetch_add(1, Ordering::Relaxed);
                let present = match self.present(input_tokens) {
                    Ok(mask) => mask,
                    Err(msg) => return error(id, msg),
                };
                match self.spec.score(&present, output_tokens) {
                    Ok(mut logprobs) => {
                        match self.fault {
                            ToyFault::PositiveLogprob => logprobs[0] = 0.5,
                            ToyFault::NanLogprob => logprobs[0] = f64::NAN,
                            ToyFault::TruncateLogprobs => {
                                logprobs.pop();
                            }
                            ToyFault::Unstable => {
                                for lp in &mut logprobs {
                                    *lp -= 1e-3 * (n + 1) as f64;
                                }
                            }
                            _ => {}
                        }
                        Message::ScoreResult {
                            id: id.clone(),
                            logprobs,
                        }
                    }
                    Err(e) => error(id, e.to_string()),
                }
            }
            Message::Attention { id, output_tokens, .. } => {
                self.counts.attention.fetch_add(1, Ordering::Relaxed);
                if !self.capabilities.supports_attention {
                    return error(id, "attention not supported".into());
                }
                match self.spec.attention(output_tokens) {
                    Ok(mut matrix) => {
                        if self.fault == ToyFault::BadAttention {
                            matrix.iter_mut().flatten().for_each(|a| *a *= 0.8);
                        }
                        Message::AttentionResult { id: id.clone(), matrix }
                    }
                    Err(e) => error(id, e.to_string()),
                }
            }
            Message::Generate { id, input_tokens } => {
                self.counts.generate.fetch_add(1, Ordering::Relaxed);
                match self.present(input_tokens) {
                    Ok(present) => Message::GenerateResult {
                        id: id.clone(),
                        output_tokens: self.spec.greedy_decode(&present),
                    },
                    Err(msg) => error(id, msg),
                }
            }
            Message::Hello { .. } => self.announcement(),
            other => error(other.id().unwrap_or(""), format!("unexpected {} message", other.kind())),
        }
    }

    /// Answers one raw line, replying with a typed error for anything that
    /// does not parse as a request.
    pub fn respond_line(&self, line: &str) -> Message {
        match Message::parse_line(line) {
            Ok(request) => self.respond(&request),
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(str::to_string))
                    .unwrap_or_default();
                Message::Error {
                    id,
                    message: e.to_string(),
                }
            }
        }
    }
}

impl Bridge for ToyBridge {
    fn capabilities(&self) -> &BridgeCapabilities {
        &self.capabilities
    }

    fn describe(&self) -> String {
        "toy".into()
    }

    fn exchange(&mut self, requests: &[Message]) -> Result<Vec<Message>> {
        Ok(requests.iter().map(|r| self.respond(r)).collect())
    }

    fn exchange_raw(&mut self, line: &str) -> Result<Message> {
        Ok(self.respond_line(line))
    }
}

/// Deterministic corpus of `n` toy instances.
///
/// Each instance has 3 to 8 features of one or two tokens (with a `|`
/// separator outside every feature), 1 to 4 output tokens decoded greedily
/// from its own generated spec, and metadata `id`, `toy_seed`, `toy_vocab`.
pub fn toy_corpus(seed: u64, n: usize) -> Result<Vec<Instance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|j| {
            let d = rng.random_range(3..=8usize);
            let t = rng.random_range(1..=4usize);
            let toy_seed: u64 = rng.random_range(0..1_000_000_000);
            let mut input_tokens = Vec::new();
            let mut features = Vec::new();
            for i in 0..d {
                if i == d / 2 {
                    input_tokens.push("|".to_string());
                }
                let start = input_tokens.len();
                let width = if rng.random_bool(0.3) { 2 } else { 1 };
                for k in 0..width {
                    input_tokens.push(format!("w{j}_{i}{}", ["", "b"][k]));
                }
                features.push(FeatureGroup::new(format!("f{i}"), vec![Span(start, start + width)]));
            }
            let spec = ToyModelSpec::generate(toy_seed, d, t, DEFAULT_TOY_VOCAB)?;
            let output_tokens = spec.greedy_decode(&Mask::full(d));
            let mut record = InstanceRecord {
                input_tokens,
                features,
                output_tokens,
                metadata: Default::default(),
            };
            record.metadata.insert("id".into(), format!("toy-{j:02}"));
            record.metadata.insert("toy_seed".into(), toy_seed.to_string());
            record
                .metadata
                .insert("toy_vocab".into(), DEFAULT_TOY_VOCAB.to_string());
            record.into_instance()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// d=2, V=2 (A,B), zero bias, W[0]=[1,0], W[1]=[0,1].
    fn worked() -> ToyModelSpec {
        ToyModelSpec::new(
            vec!["A".into(), "B".into()],
            vec![ToyStep {
                weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                bias: vec![0.0, 0.0],
            }],
        )
        .unwrap()
    }

    fn a() -> Vec<String> {
        vec!["A".to_string()]
    }

    #[test]
    fn worked_example_scores() {
        let spec = worked();
        let none = spec.score(&Mask::empty(2), &a()).unwrap()[0];
        assert_abs_diff_eq!(none, -std::f64::consts::LN_2, epsilon = 1e-15);
        let first = spec.score(&Mask::from_present(2, [0]), &a()).unwrap()[0];
        // hand evaluation: ln(e / (e + 1))
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(first, (e / (e + 1.0)).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(first, -0.3133, epsilon = 1e-4);
        let both = spec.score(&Mask::full(2), &a()).unwrap()[0];
        assert_abs_diff_eq!(both, -std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn unknown_symbol() {
        let err = worked().score(&Mask::full(2), &["C".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Vocabulary(s) if s == "C"));
    }

    #[test]
    fn attention_examples() {
        let uniform = ToyModelSpec::new(
            vec!["A".into(), "B".into()],
            vec![ToyStep {
                weights: vec![vec![0.3, 1.0]; 4],
                bias: vec![0.0, 0.0],
            }],
        )
        .unwrap();
        for v in &uniform.attention(&a()).unwrap()[0] {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }

        let single = ToyModelSpec::new(
            vec!["A".into(), "B".into()],
            vec![ToyStep {
                weights: vec![vec![-1.0, 2.0]],
                bias: vec![0.0, 0.0],
            }],
        )
        .unwrap();
        assert_eq!(single.attention(&a()).unwrap(), vec![vec![1.0]]);

        let three_to_one = ToyModelSpec::new(
            vec!["A".into(), "B".into()],
            vec![ToyStep {
                weights: vec![vec![3f64.ln(), 0.0], vec![0.0, 0.0]],
                bias: vec![0.0, 0.0],
            }],
        )
        .unwrap();
        let row = &three_to_one.attention(&a()).unwrap()[0];
        assert_abs_diff_eq!(row[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(row[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn generation_is_seeded() {
        let a = ToyModelSpec::generate(7, 3, 2, 4).unwrap();
        let b = ToyModelSpec::generate(7, 3, 2, 4).unwrap();
        let c = ToyModelSpec::generate(8, 3, 2, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a
            .steps
            .iter()
            .flat_map(|s| s.weights.iter().flatten().chain(&s.bias))
            .all(|w| (-2.0..=2.0).contains(w)));

        let tiny = ToyModelSpec::generate(1, 1, 1, 2).unwrap();
        assert_eq!(tiny.steps.len(), 1);
        assert_eq!(tiny.steps[0].weights.len(), 1);
        assert_eq!(tiny.steps[0].weights[0].len(), 2);
        assert_eq!(tiny.steps[0].bias.len(), 2);
    }

    #[test]
    fn seeds_7_and_8_differ_in_first_weight() {
        // frozen from one generation run
        let a = ToyModelSpec::generate(7, 2, 1, 2).unwrap();
        let b = ToyModelSpec::generate(8, 2, 1, 2).unwrap();
        assert_ne!(a.steps[0].weights[0][0], b.steps[0].weights[0][0]);
    }

    #[test]
    fn dummy_feature_changes_nothing() {
        let mut spec = ToyModelSpec::generate(3, 3, 2, 3).unwrap();
        for step in &mut spec.steps {
            step.weights[1] = vec![0.7; 3];
        }
        let outputs = spec.greedy_decode(&Mask::full(3));
        for code in 0..8u64 {
            let without = Mask::from_code(3, code & !0b010);
            let with = Mask::from_code(3, code | 0b010);
            let lhs = spec.score(&without, &outputs).unwrap();
            let rhs = spec.score(&with, &outputs).unwrap();
            for (x, y) in lhs.iter().zip(&rhs) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bridge_reads_presence_from_tokens() {
        let inst = Instance::new(
            vec!["x".into(), "|".into(), "y".into()],
            vec![FeatureGroup::single("x", 0), FeatureGroup::single("y", 2)],
            a(),
        )
        .unwrap();
        let bridge = ToyBridge::new(worked(), inst.features().to_vec()).unwrap();
        let masked = inst.apply_mask(&Mask::from_present(2, [0]), TOY_MASK_TOKEN).unwrap();
        let reply = bridge.respond(&Message::Score {
            id: "q".into(),
            input_tokens: masked,
            output_tokens: a(),
        });
        match reply {
            Message::ScoreResult { logprobs, .. } => {
                assert_abs_diff_eq!(logprobs[0], -0.31326168751822286, epsilon = 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
        let malformed = bridge.respond_line(r#"{"type":"score","id":"z"}"#);
        assert!(matches!(malformed, Message::Error { ref id, .. } if id == "z"));
    }

    #[test]
    fn corpus_is_deterministic_and_self_consistent() {
        let first = toy_corpus(42, 20).unwrap();
        assert_eq!(first, toy_corpus(42, 20).unwrap());
        for inst in &first {
            let spec = ToyModelSpec::for_instance(inst).unwrap();
            assert_eq!(
                spec.greedy_decode(&Mask::full(inst.num_features())),
                inst.output_tokens()
            );
            assert!((3..=8).contains(&inst.num_features()));
        }
    }

    #[test]
    fn fault_names_parse() {
        assert_eq!(
            "positive-logprob".parse::<ToyFault>().unwrap(),
            ToyFault::PositiveLogprob
        );
        assert!("bogus".parse::<ToyFault>().is_err());
    }
}
