// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bridge conformance checks.

use seqattrib::oracle::{validate_attention, Bridge, Message};
use seqattrib::{Error, Instance, Mask, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, outcome: std::result::Result<String, String>) -> Self {
        match outcome {
            Ok(detail) => Self {
                name,
                status: Status::Pass,
                detail,
            },
            Err(detail) => Self {
                name,
                status: Status::Fail,
                detail,
            },
        }
    }

    fn skip(name: &'static str, detail: &str) -> Self {
        Self {
            name,
            status: Status::Skip,
            detail: detail.into(),
        }
    }

    pub fn failed(name: &'static str, detail: String) -> Self {
        Self::new(name, Err(detail))
    }

    pub fn line(&self) -> String {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        format!("{tag} {:<20} {}", self.name, self.detail)
    }
}

/// Transport failures abort the run; everything else fails one check.
fn guard<T>(result: Result<T>) -> Result<std::result::Result<T, String>> {
    match result {
        Ok(v) => Ok(Ok(v)),
        Err(e @ Error::Transport(_)) => Err(e),
        Err(e) => Ok(Err(e.to_string())),
    }
}

struct Prober<'a> {
    bridge: &'a mut dyn Bridge,
    probe: &'a Instance,
    next: u32,
}

impl Prober<'_> {
    fn id(&mut self) -> String {
        self.next += 1;
        format!("check-{}", self.next)
    }

    fn score_request(&mut self, mask: &Mask) -> Result<Message> {
        let mask_token = self.bridge.capabilities().mask_token.clone();
        Ok(Message::Score {
            id: self.id(),
            input_tokens: self.probe.apply_mask(mask, &mask_token)?,
            output_tokens: self.probe.output_tokens().to_vec(),
        })
    }

    /// Raw logprobs for each request, with the reply id checked.
    fn score(&mut self, masks: &[Mask]) -> Result<std::result::Result<Vec<Vec<f64>>, String>> {
        let requests = masks
            .iter()
            .map(|m| self.score_request(m))
            .collect::<Result<Vec<_>>>()?;
        let replies = match guard(self.bridge.exchange(&requests))? {
            Ok(r) => r,
            Err(e) => return Ok(Err(e)),
        };
        let mut rows = Vec::with_capacity(requests.len());
        for request in &requests {
            let id = request.id().unwrap_or_default();
            match replies.iter().find(|r| r.id() == Some(id)) {
                Some(Message::ScoreResult { logprobs, .. }) => rows.push(logprobs.clone()),
                Some(Message::Error { message, .. }) => return Ok(Err(format!("bridge error for {id}: {message}"))),
                Some(other) => return Ok(Err(format!("reply to {id} is {}", other.kind()))),
                None => return Ok(Err(format!("no reply carries id {id}"))),
            }
        }
        Ok(Ok(rows))
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn shape_and_values(
    rows: &[Vec<f64>],
    t: usize,
) -> (std::result::Result<String, String>, std::result::Result<String, String>) {
    let shape = match rows.iter().find(|r| r.len() != t) {
        Some(r) => Err(format!("{} logprobs for {t} output tokens", r.len())),
        None => Ok(format!("{} row(s) of length {t}", rows.len())),
    };
    let values = match rows.iter().flatten().find(|v| !v.is_finite() || **v > 0.0) {
        Some(v) => Err(format!("logprob {v} is not a finite value <= 0")),
        None => Ok("all finite and <= 0".into()),
    };
    (shape, values)
}

/// Runs every check against a connected bridge. Returns `Err` only when the
/// bridge becomes unreachable.
pub fn run_checks(bridge: &mut dyn Bridge, probe: &Instance) -> Result<Vec<CheckResult>> {
    let caps = bridge.capabilities().clone();
    let d = probe.num_features();
    let t = probe.num_outputs();
    let mut results = vec![CheckResult::new(
        "handshake",
        Ok(format!(
            "mask_token={:?} attention={} generate={} max_batch={}",
            caps.mask_token, caps.supports_attention, caps.supports_generate, caps.max_batch
        )),
    )];
    let mut prober = Prober { bridge, probe, next: 0 };

    let full = Mask::full(d);
    let baseline = prober.score(std::slice::from_ref(&full))?;
    match &baseline {
        Ok(rows) => {
            let (shape, values) = shape_and_values(rows, t);
            results.push(CheckResult::new("baseline_shape", shape));
            results.push(CheckResult::new("logprob_validity", values));
        }
        Err(e) => {
            results.push(CheckResult::new("baseline_shape", Err(e.clone())));
            results.push(CheckResult::skip("logprob_validity", "no baseline response"));
        }
    }

    // fresh requests each time: nothing here goes through a cache
    let repeat = prober.score(&[full.clone(), full.clone()])?;
    results.push(CheckResult::new(
        "identity_stability",
        match (&baseline, repeat) {
            (Ok(first), Ok(again)) => {
                if again.iter().all(|r| same_bits(r, &first[0])) {
                    Ok("3 identical baseline responses".into())
                } else {
                    Err(format!("baseline changed between calls: {:?} vs {:?}", first[0], again))
                }
            }
            (Err(e), _) => Err(e.clone()),
            (_, Err(e)) => Err(e),
        },
    ));

    let masked = prober.score(&[Mask::empty(d)])?;
    results.push(CheckResult::new(
        "fully_masked_input",
        masked.and_then(|rows| {
            let (shape, values) = shape_and_values(&rows, t);
            shape
                .and(values)
                .map(|_| "valid logprobs with every feature masked".into())
        }),
    ));

    if caps.max_batch >= 2 {
        let mixed: Vec<Mask> = (0..caps.max_batch.min(4))
            .map(|j| if j % 2 == 0 { full.clone() } else { Mask::empty(d) })
            .collect();
        let batch = prober.score(&mixed)?;
        results.push(CheckResult::new(
            "batched_requests",
            batch.and_then(|rows| match &baseline {
                Ok(first) if rows.iter().step_by(2).all(|r| same_bits(r, &first[0])) => {
                    Ok(format!("{} replies matched by id", rows.len()))
                }
                Ok(_) => Err("batched baseline differs from single request".into()),
                Err(_) => Err("no baseline to compare against".into()),
            }),
        ));
    } else {
        results.push(CheckResult::skip("batched_requests", "max_batch = 1"));
    }

    if caps.supports_attention {
        let id = prober.id();
        let request = Message::Attention {
            id: id.clone(),
            input_tokens: probe.input_tokens().to_vec(),
            output_tokens: probe.output_tokens().to_vec(),
            features: probe.features().to_vec(),
        };
        let outcome = guard(prober.bridge.exchange(&[request]))?.and_then(|mut replies| match replies.pop() {
            Some(Message::AttentionResult { id: rid, matrix }) if rid == id => validate_attention(&id, &matrix, t, d)
                .map(|()| format!("{t}x{d} row-stochastic"))
                .map_err(|e| e.to_string()),
            Some(other) => Err(format!("unexpected {} reply", other.kind())),
            None => Err("no reply".into()),
        });
        results.push(CheckResult::new("attention", outcome));
    } else {
        results.push(CheckResult::skip("attention", "not declared"));
    }

    if caps.supports_generate {
        let id = prober.id();
        let request = Message::Generate {
            id: id.clone(),
            input_tokens: probe.input_tokens().to_vec(),
        };
        let outcome = guard(prober.bridge.exchange(&[request]))?.and_then(|mut replies| match replies.pop() {
            Some(Message::GenerateResult { id: rid, output_tokens }) if rid == id && !output_tokens.is_empty() => {
                Ok(format!("{} output tokens", output_tokens.len()))
            }
            Some(Message::GenerateResult { .. }) => Err("empty or mismatched generate_result".into()),
            Some(other) => Err(format!("unexpected {} reply", other.kind())),
            None => Err("no reply".into()),
        });
        results.push(CheckResult::new("generate", outcome));
    } else {
        results.push(CheckResult::skip("generate", "not declared"));
    }

    let malformed = guard(prober.bridge.exchange_raw(r#"{"type":"score","id":"check-malformed"}"#))?;
    results.push(CheckResult::new(
        "malformed_request",
        malformed.and_then(|reply| match reply {
            Message::Error { .. } => Ok("answered with a typed error".into()),
            other => Err(format!("answered a malformed request with {}", other.kind())),
        }),
    ));
    Ok(results)
}
