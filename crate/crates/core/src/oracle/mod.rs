// SPDX-License-Identifier: MIT OR Apache-2.0

//! Access to the model under explanation.
//!
//! A [`Bridge`] moves protocol [`Message`]s to a model server (a subprocess
//! speaking JSON-lines, an HTTP endpoint, or the in-process toy model). The
//! [`Oracle`] sits on top: it materializes masked inputs, deduplicates and
//! caches requests, splits them to the bridge's batch limit and validates
//! every response before it reaches an explainer.

mod cache;
mod http;
mod protocol;
mod stdio;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use cache::ScoreCache;
pub use http::HttpBridge;
pub use protocol::Message;
pub use stdio::StdioBridge;

use crate::error::{Error, Result};
use crate::instance::{Instance, InstanceRecord};
use crate::mask::Mask;

/// Row sums of an attention matrix must be within this of 1.
pub const ATTENTION_ROW_TOLERANCE: f64 = 1e-6;

/// What a bridge declared in its `hello` announcement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeCapabilities {
    pub mask_token: String,
    pub supports_attention: bool,
    pub max_batch: usize,
    #[serde(default)]
    pub supports_generate: bool,
}

impl BridgeCapabilities {
    pub fn validate(&self) -> Result<()> {
        if self.mask_token.is_empty() {
            return Err(Error::Protocol("announcement has an empty mask_token".into()));
        }
        if self.max_batch == 0 {
            return Err(Error::Protocol("announcement has max_batch = 0".into()));
        }
        Ok(())
    }
}

/// Validates a bridge's `hello` announcement line.
pub fn handshake(announcement: &str) -> Result<BridgeCapabilities> {
    match Message::parse_line(announcement)? {
        Message::Hello {
            mask_token,
            supports_attention,
            max_batch,
            supports_generate,
        } => {
            let caps = BridgeCapabilities {
                mask_token,
                supports_attention,
                max_batch,
                supports_generate,
            };
            caps.validate()?;
            Ok(caps)
        }
        other => Err(Error::Protocol(format!(
            "expected hello announcement, got {}",
            other.kind()
        ))),
    }
}

/// A connection to one model server.
pub trait Bridge: Send {
    fn capabilities(&self) -> &BridgeCapabilities;

    /// Human-readable identity for manifests (command line, URL, ...).
    fn describe(&self) -> String;

    /// Sends a batch of requests and returns one reply per request, in any
    /// order. Callers match replies by id.
    fn exchange(&mut self, requests: &[Message]) -> Result<Vec<Message>>;

    /// Sends an arbitrary line and returns the reply. Used by conformance
    /// checks to probe malformed-request handling.
    fn exchange_raw(&mut self, line: &str) -> Result<Message>;
}

impl<B: Bridge + ?Sized> Bridge for Box<B> {
    fn capabilities(&self) -> &BridgeCapabilities {
        (**self).capabilities()
    }

    fn describe(&self) -> String {
        (**self).describe()
    }

    fn exchange(&mut self, requests: &[Message]) -> Result<Vec<Message>> {
        (**self).exchange(requests)
    }

    fn exchange_raw(&mut self, line: &str) -> Result<Message> {
        (**self).exchange_raw(line)
    }
}

/// A bridge shared between oracles on several threads. Conversations are
/// serialized by a mutex, one in flight at a time.
#[derive(Clone)]
pub struct SharedBridge {
    inner: Arc<Mutex<Box<dyn Bridge>>>,
    capabilities: BridgeCapabilities,
    description: String,
}

impl SharedBridge {
    pub fn new(bridge: Box<dyn Bridge>) -> Self {
        Self {
            capabilities: bridge.capabilities().clone(),
            description: bridge.describe(),
            inner: Arc::new(Mutex::new(bridge)),
        }
    }
}

impl Bridge for SharedBridge {
    fn capabilities(&self) -> &BridgeCapabilities {
        &self.capabilities
    }

    fn describe(&self) -> String {
        self.description.clone()
    }

    fn exchange(&mut self, requests: &[Message]) -> Result<Vec<Message>> {
        self.inner
            .lock()
            .map_err(|_| Error::Transport("bridge lock poisoned".into()))?
            .exchange(requests)
    }

    fn exchange_raw(&mut self, line: &str) -> Result<Message> {
        self.inner
            .lock()
            .map_err(|_| Error::Transport("bridge lock poisoned".into()))?
            .exchange_raw(line)
    }
}

/// Checks one teacher-forced logprob vector against the response contract.
pub fn validate_logprobs(id: &str, logprobs: &[f64], expected_len: usize) -> Result<()> {
    if logprobs.len() != expected_len {
        return Err(Error::Protocol(format!(
            "response {id} has {} logprobs for {expected_len} output tokens",
            logprobs.len()
        )));
    }
    if let Some((t, v)) = logprobs.iter().enumerate().find(|(_, v)| !v.is_finite() || **v > 0.0) {
        return Err(Error::Data {
            id: id.to_string(),
            message: format!("logprob {v} at output position {t} is not a finite value <= 0"),
        });
    }
    Ok(())
}

/// Checks a `T × d` attention matrix: shape, non-negativity, row sums.
pub fn validate_attention(id: &str, matrix: &[Vec<f64>], t: usize, d: usize) -> Result<()> {
    if matrix.len() != t {
        return Err(Error::Protocol(format!(
            "attention response {id} has {} rows for {t} output tokens",
            matrix.len()
        )));
    }
    for (row_idx, row) in matrix.iter().enumerate() {
        if row.len() != d {
            return Err(Error::Protocol(format!(
                "attention response {id} row {row_idx} has {} entries for {d} features",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Data {
                id: id.to_string(),
                message: format!("attention entry {v} in row {row_idx} is not a finite value >= 0"),
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ATTENTION_ROW_TOLERANCE {
            return Err(Error::Data {
                id: id.to_string(),
                message: format!("attention row {row_idx} sums to {sum}, not 1"),
            });
        }
    }
    Ok(())
}

/// Request counters of one oracle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleStats {
    /// `score` messages sent to the bridge.
    pub score_requests: u64,
    /// Bridge round trips carrying score requests.
    pub score_batches: u64,
    pub attention_requests: u64,
    pub generate_requests: u64,
}

/// Validated, cached access to a bridge.
pub struct Oracle {
    bridge: Box<dyn Bridge>,
    cache: Arc<ScoreCache>,
    stats: OracleStats,
    next_id: u64,
}

impl Oracle {
    pub fn new(bridge: Box<dyn Bridge>) -> Self {
        Self::with_cache(bridge, Arc::new(ScoreCache::new()))
    }

    pub fn with_cache(bridge: Box<dyn Bridge>, cache: Arc<ScoreCache>) -> Self {
        Self {
            bridge,
            cache,
            stats: OracleStats::default(),
            next_id: 0,
        }
    }

    pub fn capabilities(&self) -> &BridgeCapabilities {
        self.bridge.capabilities()
    }

    pub fn describe(&self) -> String {
        self.bridge.describe()
    }

    pub fn stats(&self) -> OracleStats {
        self.stats
    }

    pub fn cache(&self) -> &Arc<ScoreCache> {
        &self.cache
    }

    fn fresh_id(&mut self, prefix: &str) -> String {
        self.next_id += 1;
        format!("{prefix}{}", self.next_id)
    }

    /// Teacher-forced logprobs of the instance's outputs for every mask:
    /// `rows[j][t] = log p(y_t | y_<t, x masked by masks[j])`.
    pub fn score_batch(&mut self, instance: &Instance, masks: &[Mask]) -> Result<Vec<Vec<f64>>> {
        let d = instance.num_features();
        if let Some(bad) = masks.iter().find(|m| m.len() != d) {
            return Err(Error::dim(d, bad.len(), "mask length"));
        }
        let digest = instance.digest();
        let t = instance.num_outputs();

        let mut rows: Vec<Option<Arc<[f64]>>> = Vec::with_capacity(masks.len());
        let mut pending: Vec<Mask> = Vec::new();
        let mut pending_index: HashMap<Mask, usize> = HashMap::new();
        for mask in masks {
            if pending_index.contains_key(mask) {
                rows.push(None);
                continue;
            }
            match self.cache.get(&digest, mask) {
                Some(row) => rows.push(Some(row)),
                None => {
                    pending_index.insert(mask.clone(), pending.len());
                    pending.push(mask.clone());
                    rows.push(None);
                }
            }
        }

        let mask_token = self.capabilities().mask_token.clone();
        let max_batch = self.capabilities().max_batch;
        let mut fetched: Vec<Option<Arc<[f64]>>> = vec![None; pending.len()];
        for (chunk_idx, chunk) in pending.chunks(max_batch).enumerate() {
            let mut ids = Vec::with_capacity(chunk.len());
            let mut requests = Vec::with_capacity(chunk.len());
            for mask in chunk {
                let id = self.fresh_id("s");
                requests.push(Message::Score {
                    id: id.clone(),
                    input_tokens: instance.apply_mask(mask, &mask_token)?,
                    output_tokens: instance.output_tokens().to_vec(),
                });
                ids.push(id);
            }
            self.stats.score_requests += requests.len() as u64;
            self.stats.score_batches += 1;
            let replies = self.bridge.exchange(&requests)?;
            let by_id = match_replies(&ids, replies)?;
            for (offset, (id, reply)) in ids.iter().zip(by_id).enumerate() {
                let logprobs = match reply {
                    Message::ScoreResult { logprobs, .. } => logprobs,
                    Message::Error { message, .. } => {
                        return Err(Error::Bridge {
                            id: id.clone(),
                            message,
                        })
                    }
                    other => {
                        return Err(Error::Protocol(format!(
                            "expected score_result for {id}, got {}",
                            other.kind()
                        )))
                    }
                };
                validate_logprobs(id, &logprobs, t)?;
                let pos = chunk_idx * max_batch + offset;
                fetched[pos] = Some(self.cache.insert(&digest, pending[pos].clone(), logprobs.into()));
            }
        }

        masks
            .iter()
            .zip(rows)
            .map(|(mask, row)| {
                let row = match row {
                    Some(row) => row,
                    None => fetched[pending_index[mask]]
                        .clone()
                        .expect("every pending mask was fetched"),
                };
                Ok(row.to_vec())
            })
            .collect()
    }

    /// Logprobs of the unmasked input.
    pub fn baseline(&mut self, instance: &Instance) -> Result<Vec<f64>> {
        let full = Mask::full(instance.num_features());
        Ok(self.score_batch(instance, &[full])?.remove(0))
    }

    /// `T × d` feature-pooled attention for the unmasked input.
    pub fn attention(&mut self, instance: &Instance) -> Result<Vec<Vec<f64>>> {
        if !self.capabilities().supports_attention {
            return Err(Error::Capability(format!(
                "bridge {} does not support attention",
                self.describe()
            )));
        }
        let id = self.fresh_id("a");
        let request = Message::Attention {
            id: id.clone(),
            input_tokens: instance.input_tokens().to_vec(),
            output_tokens: instance.output_tokens().to_vec(),
            features: instance.features().to_vec(),
        };
        self.stats.attention_requests += 1;
        let reply = match_replies(std::slice::from_ref(&id), self.bridge.exchange(&[request])?)?.remove(0);
        match reply {
            Message::AttentionResult { matrix, .. } => {
                validate_attention(&id, &matrix, instance.num_outputs(), instance.num_features())?;
                Ok(matrix)
            }
            Message::Error { message, .. } => Err(Error::Bridge { id, message }),
            other => Err(Error::Protocol(format!(
                "expected attention_result for {id}, got {}",
                other.kind()
            ))),
        }
    }

    /// The bridge's greedy prediction for the unmasked input of `record`.
    pub fn generate(&mut self, record: &InstanceRecord) -> Result<Vec<String>> {
        if !self.capabilities().supports_generate {
            return Err(Error::Capability(format!(
                "bridge {} does not decode predictions; supply gold outputs instead",
                self.describe()
            )));
        }
        let id = self.fresh_id("g");
        let request = Message::Generate {
            id: id.clone(),
            input_tokens: record.input_tokens.clone(),
        };
        self.stats.generate_requests += 1;
        let reply = match_replies(std::slice::from_ref(&id), self.bridge.exchange(&[request])?)?.remove(0);
        match reply {
            Message::GenerateResult { output_tokens, .. } if !output_tokens.is_empty() => Ok(output_tokens),
            Message::GenerateResult { .. } => Err(Error::Data {
                id,
                message: "empty prediction".into(),
            }),
            Message::Error { message, .. } => Err(Error::Bridge { id, message }),
            other => Err(Error::Protocol(format!(
                "expected generate_result for {id}, got {}",
                other.kind()
            ))),
        }
    }
}

/// Orders replies to match `ids`, rejecting missing, unknown and duplicated
/// ids. An `error` reply without an id is attributed to the first request.
fn match_replies(ids: &[String], replies: Vec<Message>) -> Result<Vec<Message>> {
    if replies.len() != ids.len() {
        return Err(Error::Protocol(format!(
            "sent {} requests, received {} replies",
            ids.len(),
            replies.len()
        )));
    }
    let position: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut slots: Vec<Option<Message>> = vec![None; ids.len()];
    for reply in replies {
        let idx = match reply.id() {
            Some(id) if position.contains_key(id) => position[id],
            Some("") if matches!(reply, Message::Error { .. }) => 0,
            Some(id) => return Err(Error::Protocol(format!("reply for unknown request id {id:?}"))),
            None => return Err(Error::Protocol(format!("unexpected {} message", reply.kind()))),
        };
        if slots[idx].is_some() {
            if matches!(reply, Message::Error { .. }) {
                return Err(Error::Bridge {
                    id: ids[idx].clone(),
                    message: match reply {
                        Message::Error { message, .. } => message,
                        _ => unreachable!(),
                    },
                });
            }
            return Err(Error::Protocol(format!("duplicate reply for {}", ids[idx])));
        }
        slots[idx] = Some(reply);
    }
    Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn handshake_examples() {
        let caps =
            handshake(r#"{"type":"hello","mask_token":"<extra_id_0>","supports_attention":true,"max_batch":32}"#)
                .unwrap();
        assert_eq!(caps.mask_token, "<extra_id_0>");
        assert!(caps.supports_attention);
        assert_eq!(caps.max_batch, 32);
        assert!(!caps.supports_generate);

        let missing = handshake(r#"{"type":"hello","supports_attention":true,"max_batch":32}"#);
        assert!(matches!(missing, Err(Error::Protocol(_))));
        let zero = handshake(r#"{"type":"hello","mask_token":"<m>","supports_attention":true,"max_batch":0}"#);
        assert!(matches!(zero, Err(Error::Protocol(_))));
        let empty = handshake(r#"{"type":"hello","mask_token":"","supports_attention":true,"max_batch":1}"#);
        assert!(matches!(empty, Err(Error::Protocol(_))));
        let wrong = handshake(r#"{"type":"error","id":"","message":"no"}"#);
        assert!(matches!(wrong, Err(Error::Protocol(_))));
    }

    #[test]
    fn logprob_validation() {
        assert!(validate_logprobs("a", &[-1.0, 0.0], 2).is_ok());
        assert!(matches!(validate_logprobs("a", &[-1.0], 2), Err(Error::Protocol(_))));
        match validate_logprobs("req-7", &[-1.0, 0.5], 2) {
            Err(Error::Data { id, .. }) => assert_eq!(id, "req-7"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            validate_logprobs("a", &[f64::NAN], 1),
            Err(Error::Data { .. })
        ));
    }

    #[test]
    fn attention_validation() {
        let third = 1.0 / 3.0;
        assert!(validate_attention("a", &[vec![third; 3]], 1, 3).is_ok());
        assert!(matches!(
            validate_attention("a", &[vec![0.4, 0.4]], 1, 2),
            Err(Error::Data { .. })
        ));
        assert!(matches!(
            validate_attention("a", &[vec![1.5, -0.5]], 1, 2),
            Err(Error::Data { .. })
        ));
        assert!(matches!(
            validate_attention("a", &[vec![1.0]], 1, 2),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn reply_matching() {
        let ids = vec!["s1".to_string(), "s2".to_string()];
        let reply = |id: &str| Message::ScoreResult {
            id: id.into(),
            logprobs: vec![],
        };
        let ordered = match_replies(&ids, vec![reply("s2"), reply("s1")]).unwrap();
        assert_eq!(ordered[0].id(), Some("s1"));
        assert!(match_replies(&ids, vec![reply("s1")]).is_err());
        assert!(match_replies(&ids, vec![reply("s1"), reply("s1")]).is_err());
        assert!(match_replies(&ids, vec![reply("s1"), reply("s9")]).is_err());
    }
}
