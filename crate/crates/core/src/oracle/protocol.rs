// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON-lines messages exchanged with a bridge.
//!
//! Every message is one JSON object with a `type` tag. The bridge announces
//! itself with `hello` as soon as it starts; afterwards each request carries an
//! `id` echoed by its response.

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::instance::FeatureGroup;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// Sent by the bridge on startup (and in reply to an empty `hello` over HTTP).
    Hello {
        mask_token: String,
        supports_attention: bool,
        max_batch: usize,
        #[serde(default)]
        supports_generate: bool,
    },
    Score {
        id: String,
        input_tokens: Vec<String>,
        output_tokens: Vec<String>,
    },
    ScoreResult {
        id: String,
        #[serde(deserialize_with = "lenient_vec")]
        logprobs: Vec<f64>,
    },
    Attention {
        id: String,
        input_tokens: Vec<String>,
        output_tokens: Vec<String>,
        features: Vec<FeatureGroup>,
    },
    AttentionResult {
        id: String,
        #[serde(deserialize_with = "lenient_matrix")]
        matrix: Vec<Vec<f64>>,
    },
    /// Greedy decode of the (unmasked) input.
    Generate {
        id: String,
        input_tokens: Vec<String>,
    },
    GenerateResult {
        id: String,
        output_tokens: Vec<String>,
    },
    Error {
        #[serde(default)]
        id: String,
        message: String,
    },
}

impl Message {
    pub fn id(&self) -> Option<&str> {
        match self {
            Message::Hello { .. } => None,
            Message::Score { id, .. }
            | Message::ScoreResult { id, .. }
            | Message::Attention { id, .. }
            | Message::AttentionResult { id, .. }
            | Message::Generate { id, .. }
            | Message::GenerateResult { id, .. }
            | Message::Error { id, .. } => Some(id),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Score { .. } => "score",
            Message::ScoreResult { .. } => "score_result",
            Message::Attention { .. } => "attention",
            Message::AttentionResult { .. } => "attention_result",
            Message::Generate { .. } => "generate",
            Message::GenerateResult { .. } => "generate_result",
            Message::Error { .. } => "error",
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("protocol message serializes")
    }

    /// Parses one line received from a bridge. Bare `NaN` / `Infinity`
    /// literals, which some JSON encoders emit, are accepted so that they can
    /// be reported as data errors against the offending request.
    pub fn parse_line(line: &str) -> Result<Self> {
        let cleaned = quote_non_finite(line.trim());
        serde_json::from_str(&cleaned)
            .map_err(|e| Error::Protocol(format!("malformed message {:?}: {e}", truncate(line, 200))))
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LenientF64 {
    Num(f64),
    Text(String),
}

impl LenientF64 {
    fn value(self) -> std::result::Result<f64, String> {
        match self {
            LenientF64::Num(v) => Ok(v),
            LenientF64::Text(s) => match s.as_str() {
                "NaN" => Ok(f64::NAN),
                "Infinity" => Ok(f64::INFINITY),
                "-Infinity" => Ok(f64::NEG_INFINITY),
                other => Err(format!("expected a number, got string {other:?}")),
            },
        }
    }
}

/// `null` stands for a value the encoder could not represent.
fn lenient_value<E: serde::de::Error>(v: Option<LenientF64>) -> std::result::Result<f64, E> {
    v.map_or(Ok(f64::NAN), |v| v.value().map_err(E::custom))
}

fn lenient_vec<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Vec::<Option<LenientF64>>::deserialize(d)?
        .into_iter()
        .map(lenient_value)
        .collect()
}

fn lenient_matrix<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Vec<f64>>, D::Error> {
    Vec::<Vec<Option<LenientF64>>>::deserialize(d)?
        .into_iter()
        .map(|row| row.into_iter().map(lenient_value).collect())
        .collect()
}

/// Wraps bare `NaN`, `Infinity` and `-Infinity` tokens (outside string
/// literals) in quotes.
fn quote_non_finite(line: &str) -> std::borrow::Cow<'_, str> {
    if !line.contains("NaN") && !line.contains("Infinity") {
        return line.into();
    }
    let mut out = String::with_capacity(line.len() + 8);
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = line;
    while let Some(c) = rest.chars().next() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if c == '"' {
            in_string = true;
            out.push(c);
            rest = &rest[1..];
            continue;
        }
        let literal = ["-Infinity", "Infinity", "NaN"]
            .into_iter()
            .find(|lit| rest.starts_with(lit));
        if let Some(lit) = literal {
            out.push('"');
            out.push_str(lit);
            out.push('"');
            rest = &rest[lit.len()..];
        } else {
            out.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    out.into()
}
