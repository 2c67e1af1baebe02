// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instances under explanation: input tokens grouped into features plus the
//! output token sequence being attributed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Half-open token index range `[start, end)`. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn start(&self) -> usize {
        self.0
    }

    pub fn end(&self) -> usize {
        self.1
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.0..self.1
    }
}

/// A named group of input token spans treated as one unit of attribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub spans: Vec<Span>,
}

impl FeatureGroup {
    pub fn new(name: impl Into<String>, spans: Vec<Span>) -> Self {
        Self {
            name: name.into(),
            spans,
        }
    }

    /// Feature covering exactly one token.
    pub fn single(name: impl Into<String>, index: usize) -> Self {
        Self::new(name, vec![Span(index, index + 1)])
    }

    /// Token indices covered by this feature, in span order.
    pub fn token_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.spans.iter().flat_map(Span::range)
    }
}

/// Serialized form of an [`Instance`], before invariants are checked.
///
/// `output_tokens` may be empty here; it is filled by the bridge when the
/// model's own prediction is being explained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub input_tokens: Vec<String>,
    pub features: Vec<FeatureGroup>,
    #[serde(default)]
    pub output_tokens: Vec<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl InstanceRecord {
    /// Checks every invariant except the non-empty output sequence.
    pub fn validate_inputs(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Invalid("instance has no features".into()));
        }
        let n = self.input_tokens.len();
        let mut owner: Vec<Option<usize>> = vec![None; n];
        for (f, group) in self.features.iter().enumerate() {
            if group.spans.is_empty() {
                return Err(Error::Invalid(format!("feature {f} ({:?}) has no spans", group.name)));
            }
            for span in &group.spans {
                if span.start() >= span.end() {
                    return Err(Error::Invalid(format!(
                        "feature {f} ({:?}) has empty or reversed span [{}, {})",
                        group.name,
                        span.start(),
                        span.end()
                    )));
                }
                if span.end() > n {
                    return Err(Error::Invalid(format!(
                        "feature {f} ({:?}) span [{}, {}) exceeds {n} input tokens",
                        group.name,
                        span.start(),
                        span.end()
                    )));
                }
                for idx in span.range() {
                    if let Some(other) = owner[idx] {
                        return Err(Error::Invalid(format!(
                            "token {idx} is claimed by features {other} and {f}"
                        )));
                    }
                    owner[idx] = Some(f);
                }
            }
        }
        Ok(())
    }

    pub fn into_instance(self) -> Result<Instance> {
        self.validate_inputs()?;
        if self.output_tokens.is_empty() {
            return Err(Error::Invalid("instance has no output tokens".into()));
        }
        Ok(Instance { record: self })
    }
}

/// A validated instance. Immutable once constructed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRecord", into = "InstanceRecord")]
pub struct Instance {
    record: InstanceRecord,
}

impl TryFrom<InstanceRecord> for Instance {
    type Error = Error;

    fn try_from(record: InstanceRecord) -> Result<Self> {
        record.into_instance()
    }
}

impl From<Instance> for InstanceRecord {
    fn from(instance: Instance) -> Self {
        instance.record
    }
}

impl Instance {
    pub fn new(input_tokens: Vec<String>, features: Vec<FeatureGroup>, output_tokens: Vec<String>) -> Result<Self> {
        InstanceRecord {
            input_tokens,
            features,
            output_tokens,
            metadata: BTreeMap::new(),
        }
        .into_instance()
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.record.metadata.insert(key.into(), value.into());
        self
    }

    pub fn input_tokens(&self) -> &[String] {
        &self.record.input_tokens
    }

    pub fn features(&self) -> &[FeatureGroup] {
        &self.record.features
    }

    pub fn output_tokens(&self) -> &[String] {
        &self.record.output_tokens
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.record.metadata
    }

    /// Number of features `d`.
    pub fn num_features(&self) -> usize {
        self.record.features.len()
    }

    /// Number of output tokens `T`.
    pub fn num_outputs(&self) -> usize {
        self.record.output_tokens.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.record.features.iter().map(|f| f.name.clone()).collect()
    }

    /// Identifier for reports: the `id` metadata entry, or the digest prefix.
    pub fn id(&self) -> String {
        self.record
            .metadata
            .get("id")
            .cloned()
            .unwrap_or_else(|| self.digest()[..12].to_string())
    }

    /// Hex SHA-256 over tokens and features. Metadata does not participate.
    pub fn digest(&self) -> String {
        let payload = serde_json::to_vec(&(
            &self.record.input_tokens,
            &self.record.features,
            &self.record.output_tokens,
        ))
        .expect("instance payload serializes");
        let hash = Sha256::digest(&payload);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same inputs with a different output sequence.
    pub fn with_output_tokens(&self, output_tokens: Vec<String>) -> Result<Self> {
        InstanceRecord {
            output_tokens,
            ..self.record.clone()
        }
        .into_instance()
    }

    /// Input tokens with every token of every masked-out feature replaced by
    /// `mask_token`. Token count and positions outside feature spans are kept.
    pub fn apply_mask(&self, mask: &Mask, mask_token: &str) -> Result<Vec<String>> {
        if mask.len() != self.num_features() {
            return Err(Error::dim(self.num_features(), mask.len(), "mask length"));
        }
        let mut tokens = self.record.input_tokens.clone();
        for (feature, _) in self
            .record
            .features
            .iter()
            .zip(mask.iter())
            .filter(|(_, present)| !present)
        {
            for idx in feature.token_indices() {
                tokens[idx] = mask_token.to_string();
            }
        }
        Ok(tokens)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }
}

/// Reads instance records from a file: a single JSON object, or JSON-lines
/// (one record per non-empty line).
pub fn read_records(path: &Path) -> Result<Vec<InstanceRecord>> {
    let text = fs::read_to_string(path)?;
    parse_records(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

pub fn parse_records(text: &str) -> Result<Vec<InstanceRecord>> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    if let Ok(record) = serde_json::from_str::<InstanceRecord>(trimmed) {
        return Ok(vec![record]);
    }
    trimmed
        .lines()
        .filter(|line| !line.trim().is_empty())
        .enumerate()
        .map(|(i, line)| serde_json::from_str(line).map_err(|e| Error::Invalid(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Reads every `*.json` / `*.jsonl` file of a directory in file-name order.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<InstanceRecord>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json") | Some("jsonl")))
        .collect();
    paths.sort();
    let mut records = Vec::new();
    for path in paths {
        records.extend(read_records(&path)?);
    }
    Ok(records)
}
