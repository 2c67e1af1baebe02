// SPDX-License-Identifier: MIT OR Apache-2.0

//! Opening oracles from command-line flags.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Args;
use seqattrib::oracle::{Bridge, HttpBridge, Oracle, ScoreCache, SharedBridge, StdioBridge};
use seqattrib::toymodel::{ToyBridge, ToyFault, ToyModelSpec};
use seqattrib::{Error, Instance, Result};

#[derive(Debug, Clone, Args)]
pub struct BridgeArgs {
    /// Bridge command, spawned through `sh -c` and spoken to over stdio.
    #[arg(long, env = "SEQATTRIB_BRIDGE_CMD")]
    pub bridge_cmd: Option<String>,

    /// Bridge HTTP endpoint, used instead of a subprocess.
    #[arg(long, conflicts_with = "bridge_cmd")]
    pub bridge_url: Option<String>,

    /// Use the built-in toy model (spec from `--toy-spec` or the instance's
    /// `toy_seed` metadata).
    #[arg(long, conflicts_with_all = ["bridge_cmd", "bridge_url"])]
    pub toy: bool,

    /// Toy model spec file (JSON); implies `--toy`.
    #[arg(long)]
    pub toy_spec: Option<PathBuf>,

    /// Seconds to wait for any single bridge reply.
    #[arg(long, default_value_t = 120)]
    pub timeout: u64,
}

pub enum BridgeSource {
    Toy {
        spec: Option<ToyModelSpec>,
        fault: ToyFault,
    },
    Command(String),
    Url(String),
}

impl BridgeArgs {
    pub fn source(&self) -> Result<BridgeSource> {
        if self.toy || self.toy_spec.is_some() {
            let spec = match &self.toy_spec {
                Some(path) => Some(ToyModelSpec::from_json_str(&std::fs::read_to_string(path)?)?),
                None => None,
            };
            return Ok(BridgeSource::Toy {
                spec,
                fault: ToyFault::None,
            });
        }
        if let Some(url) = &self.bridge_url {
            return Ok(BridgeSource::Url(url.clone()));
        }
        match &self.bridge_cmd {
            Some(cmd) if !cmd.trim().is_empty() => Ok(BridgeSource::Command(cmd.clone())),
            _ => Err(Error::Invalid(
                "no bridge given: pass --bridge-cmd, set SEQATTRIB_BRIDGE_CMD, use --bridge-url, or --toy".into(),
            )),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout.max(1))
    }
}

impl BridgeSource {
    pub fn describe(&self) -> String {
        match self {
            BridgeSource::Toy { spec: Some(_), .. } => "toy (spec file)".into(),
            BridgeSource::Toy { spec: None, .. } => "toy (per-instance spec)".into(),
            BridgeSource::Command(cmd) => format!("stdio: {cmd}"),
            BridgeSource::Url(url) => format!("http: {url}"),
        }
    }

    /// Connects an external bridge. Toy bridges are built per instance.
    pub fn connect(&self, timeout: Duration) -> Result<Option<Box<dyn Bridge>>> {
        Ok(match self {
            BridgeSource::Toy { .. } => None,
            BridgeSource::Command(cmd) => Some(Box::new(StdioBridge::spawn(cmd, timeout)?)),
            BridgeSource::Url(url) => Some(Box::new(HttpBridge::connect(url, timeout)?)),
        })
    }

    pub fn toy_bridge(&self, instance: &Instance) -> Result<ToyBridge> {
        let BridgeSource::Toy { spec, fault } = self else {
            return Err(Error::Invalid("not a toy bridge".into()));
        };
        let bridge = match spec {
            Some(spec) => ToyBridge::new(spec.clone(), instance.features().to_vec())?,
            None => ToyBridge::for_instance(instance)?,
        };
        Ok(bridge.with_fault(*fault))
    }
}

/// Hands out oracles sharing one cache: a fresh toy bridge per instance, or
/// the connected external bridges.
pub struct OracleFactory {
    source: BridgeSource,
    shared: Vec<SharedBridge>,
    pub cache: Arc<ScoreCache>,
}

impl OracleFactory {
    pub fn new(source: BridgeSource, timeout: Duration, workers: usize) -> Result<Self> {
        let mut shared = Vec::new();
        if !matches!(source, BridgeSource::Toy { .. }) {
            for _ in 0..workers.max(1) {
                let bridge = source.connect(timeout)?.expect("external bridge");
                shared.push(SharedBridge::new(bridge));
            }
        }
        Ok(Self {
            source,
            shared,
            cache: Arc::new(ScoreCache::new()),
        })
    }

    pub fn describe(&self) -> String {
        self.source.describe()
    }

    pub fn oracle(&self, instance: &Instance) -> Result<Oracle> {
        if self.shared.is_empty() {
            let bridge = self.source.toy_bridge(instance)?;
            return Ok(Oracle::with_cache(Box::new(bridge), self.cache.clone()));
        }
        // stable assignment of instances to bridge processes
        let slot = instance
            .digest()
            .bytes()
            .take(8)
            .fold(0usize, |acc, b| acc.wrapping_mul(31).wrapping_add(b as usize))
            % self.shared.len();
        Ok(Oracle::with_cache(
            Box::new(self.shared[slot].clone()),
            self.cache.clone(),
        ))
    }

    /// Oracle for an instance record that may still lack output tokens.
    pub fn oracle_for_inputs(&self, record: &seqattrib::InstanceRecord) -> Result<Oracle> {
        let mut probe = record.clone();
        if probe.output_tokens.is_empty() {
            probe.output_tokens = vec![String::new()];
        }
        if matches!(self.source, BridgeSource::Toy { spec: None, .. }) && record.output_tokens.is_empty() {
            // the generated toy spec depends on T
            return Err(Error::Invalid(
                "toy instances without output_tokens need --toy-spec to fix the output length".into(),
            ));
        }
        self.oracle(&probe.into_instance()?)
    }
}
