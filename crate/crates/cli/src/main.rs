// SPDX-License-Identifier: MIT OR Apache-2.0

//! `seqattrib` command-line tool.
//!
//! Exit codes: 0 success, 1 failed check or computation, 2 usage or invalid
//! input, 3 bridge or environment failure.

mod bridges;
mod check;
mod manifest;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqattrib::explain::{explain, ExplainerConfig, Method};
use seqattrib::faithfulness::{evaluate_methods, ExplainTarget, MetricConfig, SkippedInstance};
use seqattrib::instance::{read_corpus_dir, read_records};
use seqattrib::report::{render_html, Selection};
use seqattrib::toymodel::{toy_corpus, ToyBridge, ToyFault, ToyModelSpec};
use seqattrib::{Aggregation, Error, Instance, InstanceRecord, Result};

use bridges::{BridgeArgs, BridgeSource, OracleFactory};
use check::{run_checks, CheckResult, Status};
use manifest::{write_atomic, ManifestClock};

#[derive(Debug, Parser)]
#[command(
    name = "seqattrib",
    version,
    about = "Per-token feature attribution for sequence generators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Explain one instance and write the attribution matrix and an HTML map.
    Explain(ExplainArgs),
    /// Explain a corpus with several methods and write faithfulness curves.
    Evaluate(EvaluateArgs),
    /// Run conformance checks against a bridge.
    BridgeCheck(BridgeCheckArgs),
    /// Write a deterministic corpus of toy instances.
    ToyCorpus(ToyCorpusArgs),
    /// Serve the toy model over stdin/stdout.
    #[command(hide = true)]
    ToyBridge(ToyBridgeArgs),
}

#[derive(Debug, Clone, Args)]
struct MethodArgs {
    /// Perturbations (lime, lerg_l, kernel_shap) or permutations (lerg_s).
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// LIME locality kernel width.
    #[arg(long, default_value_t = 0.75)]
    kernel_width: f64,
    /// Ridge penalty on the surrogate slopes.
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    /// Largest feature count for exact Shapley enumeration.
    #[arg(long, default_value_t = 12)]
    d_max_exact: usize,
    /// How per-token attributions are combined into one score per feature.
    #[arg(long, default_value = "sum")]
    aggregation: Aggregation,
    /// Explain the model's greedy prediction or the instance's own outputs.
    #[arg(long, default_value = "prediction")]
    target: ExplainTarget,
    /// Score cache spill file (JSON-lines), loaded if present and rewritten.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl MethodArgs {
    fn explainer(&self, method: Method) -> ExplainerConfig {
        ExplainerConfig {
            method,
            n_samples: self.samples,
            kernel_width: self.kernel_width,
            ridge_lambda: self.ridge,
            seed: self.seed,
            d_max_exact: self.d_max_exact,
        }
    }
}

#[derive(Debug, Args)]
struct ExplainArgs {
    /// Instance file (one JSON object).
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value = "lerg_s")]
    method: Method,
    #[command(flatten)]
    params: MethodArgs,
    #[command(flatten)]
    bridge: BridgeArgs,
    /// Output token shown in the HTML map; the aggregate when omitted.
    #[arg(long)]
    token: Option<usize>,
    /// Attribution JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    html: Option<PathBuf>,
    /// Long-form CSV (feature, token_index, phi).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory of instance files (*.json, *.jsonl).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "lime,kernel_shap,lerg_s,lerg_l,attention"
    )]
    methods: Vec<Method>,
    /// Top-K% grid.
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,30,40,50")]
    k: Vec<u32>,
    #[command(flatten)]
    params: MethodArgs,
    #[command(flatten)]
    bridge: BridgeArgs,
    /// Bridge processes to run in parallel.
    #[arg(long, default_value_t = 1)]
    bridge_workers: usize,
    /// Output directory for curves.csv, audit.csv, skipped.csv and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BridgeCheckArgs {
    #[command(flatten)]
    bridge: BridgeArgs,
    /// Probe instance; a built-in toy instance when omitted.
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Contract violation injected into the in-process toy bridge.
    #[arg(long, hide = true, default_value = "none")]
    fault: ToyFault,
}

#[derive(Debug, Args)]
struct ToyCorpusArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ToyBridgeArgs {
    /// Instance whose features and toy spec are served; the built-in probe
    /// instance when omitted.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    toy_spec: Option<PathBuf>,
    #[arg(long, default_value = "none")]
    fault: ToyFault,
}

fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Invalid(_) | Error::Dimension { .. } | Error::Vocabulary(_) | Error::Json(_) => 2,
        Error::Io(_) | Error::Evaluation(_) => 3,
        e if e.is_environmental() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Explain(args) => cmd_explain(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::BridgeCheck(args) => cmd_bridge_check(args),
        Command::ToyCorpus(args) => cmd_toy_corpus(args),
        Command::ToyBridge(args) => cmd_toy_bridge(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_single_record(path: &Path) -> Result<InstanceRecord> {
    let mut records = read_records(path)?;
    if records.len() != 1 {
        return Err(Error::Invalid(format!(
            "{}: expected one instance, found {}",
            path.display(),
            records.len()
        )));
    }
    let record = records.remove(0);
    record
        .validate_inputs()
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Ok(record)
}

/// The instance to explain: gold outputs, or the bridge's greedy decode.
fn resolve_record(record: InstanceRecord, target: ExplainTarget, factory: &OracleFactory) -> Result<Instance> {
    match target {
        ExplainTarget::Gold => record.into_instance(),
        ExplainTarget::ModelPrediction => {
            let predicted = factory.oracle_for_inputs(&record)?.generate(&record)?;
            InstanceRecord {
                output_tokens: predicted,
                ..record
            }
            .into_instance()
        }
    }
}

fn load_cache(factory: &OracleFactory, path: Option<&PathBuf>) -> Result<()> {
    if let Some(path) = path.filter(|p| p.exists()) {
        factory.cache.load_jsonl(path)?;
    }
    Ok(())
}

/// Attribution JSON with the producing manifest alongside.
#[derive(serde::Serialize)]
struct ExplainOutput<'a> {
    #[serde(flatten)]
    attribution: &'a seqattrib::AttributionMatrix,
    manifest: &'a manifest::RunManifest,
}

fn cmd_explain(args: ExplainArgs) -> Result<u8> {
    let clock = ManifestClock::start();
    let record = load_single_record(&args.instance)?;
    let config = args.params.explainer(args.method);
    config.validate()?;

    let source = args.bridge.source()?;
    let factory = OracleFactory::new(source, args.bridge.timeout(), 1)?;
    load_cache(&factory, args.params.cache.as_ref())?;
    let instance = resolve_record(record, args.params.target, &factory)?;
    let mut oracle = factory.oracle(&instance)?;
    let matrix = explain(&instance, &mut oracle, &config)?;

    let selection = match args.token {
        Some(t) => Selection::Token(t),
        None => Selection::Aggregate(args.params.aggregation),
    };
    let snapshot = serde_json::json!({
        "instance": instance.digest(),
        "explainer": config,
        "target": args.params.target.to_string(),
        "aggregation": args.params.aggregation.as_str(),
    });
    let manifest = clock.finish(
        "explain",
        snapshot,
        config.seed,
        factory.describe(),
        (factory.cache.hits(), factory.cache.misses()),
    );
    let manifest_json = manifest.to_json();

    let json = serde_json::to_string_pretty(&ExplainOutput {
        attribution: &matrix,
        manifest: &manifest,
    })? + "\n";
    match &args.out {
        Some(path) => write_atomic(path, json.as_bytes())?,
        None => print!("{json}"),
    }
    if let Some(path) = &args.html {
        let html = render_html(&instance, &matrix, selection, Some(&manifest_json))?;
        write_atomic(path, html.as_bytes())?;
    }
    if let Some(path) = &args.csv {
        write_atomic(path, matrix.to_csv().as_bytes())?;
    }
    if let Some(path) = &args.params.cache {
        factory.cache.save_jsonl(path)?;
    }
    Ok(0)
}

fn corpus_digest(instances: &[Instance]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for inst in instances {
        hasher.update(inst.digest().as_bytes());
        hasher.update(inst.id().as_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn skipped_csv(skipped: &[SkippedInstance]) -> String {
    let mut out = String::from("instance,method,reason\n");
    for s in skipped {
        let method = s.method.map_or("", |m| m.as_str());
        out.push_str(&format!(
            "{},{method},{}\n",
            csv_escape(&s.instance),
            csv_escape(&s.reason)
        ));
    }
    out
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<u8> {
    let clock = ManifestClock::start();
    let records =
        read_corpus_dir(&args.corpus).map_err(|e| Error::Invalid(format!("corpus {}: {e}", args.corpus.display())))?;
    if records.is_empty() {
        return Err(Error::Invalid(format!(
            "corpus {} has no instances",
            args.corpus.display()
        )));
    }
    for (j, r) in records.iter().enumerate() {
        r.validate_inputs()
            .map_err(|e| Error::Invalid(format!("corpus record {j}: {e}")))?;
    }
    let metric = MetricConfig {
        k_grid: args.k.clone(),
        aggregation: args.params.aggregation,
        explain_target: args.params.target,
    };
    metric.validate()?;
    let explainer = args.params.explainer(args.methods[0]);
    explainer.validate()?;

    let source = args.bridge.source()?;
    let factory = OracleFactory::new(source, args.bridge.timeout(), args.bridge_workers)?;
    load_cache(&factory, args.params.cache.as_ref())?;

    let mut corpus = Vec::with_capacity(records.len());
    let mut unresolved = Vec::new();
    for (j, record) in records.into_iter().enumerate() {
        if record.output_tokens.is_empty() && metric.explain_target == ExplainTarget::ModelPrediction {
            let label = record
                .metadata
                .get("id")
                .cloned()
                .unwrap_or_else(|| format!("record-{j}"));
            match resolve_record(record, metric.explain_target, &factory) {
                Ok(inst) => corpus.push(inst),
                Err(e) => unresolved.push(SkippedInstance {
                    instance: label,
                    method: None,
                    reason: e.to_string(),
                }),
            }
        } else {
            corpus.push(
                record
                    .into_instance()
                    .map_err(|e| Error::Invalid(format!("corpus record {j}: {e}")))?,
            );
        }
    }

    let mut evaluation = evaluate_methods(&corpus, &args.methods, &explainer, &metric, |inst| factory.oracle(inst))?;
    evaluation.skipped.extend(unresolved);

    let snapshot = serde_json::json!({
        "corpus_sha256": corpus_digest(&corpus),
        "n_instances": corpus.len(),
        "methods": args.methods.iter().map(Method::as_str).collect::<Vec<_>>(),
        "k_grid": metric.k_grid,
        "aggregation": metric.aggregation.as_str(),
        "target": metric.explain_target.to_string(),
        "n_samples": explainer.n_samples,
        "kernel_width": explainer.kernel_width,
        "ridge_lambda": explainer.ridge_lambda,
        "d_max_exact": explainer.d_max_exact,
    });
    let mut manifest = clock.finish(
        "evaluate",
        snapshot,
        explainer.seed,
        factory.describe(),
        (factory.cache.hits(), factory.cache.misses()),
    );

    std::fs::create_dir_all(&args.out)?;
    let files = [
        ("curves.csv", evaluation.curves_csv()),
        ("audit.csv", evaluation.audit_csv()),
        ("skipped.csv", skipped_csv(&evaluation.skipped)),
    ];
    for (name, contents) in &files {
        let path = args.out.join(name);
        write_atomic(&path, contents.as_bytes())?;
        manifest.record(&path, contents.as_bytes());
    }
    write_atomic(&args.out.join("manifest.json"), (manifest.to_json() + "\n").as_bytes())?;
    if let Some(path) = &args.params.cache {
        factory.cache.save_jsonl(path)?;
    }

    if !evaluation.skipped.is_empty() {
        eprintln!(
            "warning: {} failure(s) skipped; see {}",
            evaluation.skipped.len(),
            args.out.join("skipped.csv").display()
        );
    }
    println!(
        "{} curve(s) over {} instance(s) written to {} (run {})",
        evaluation.curves.len(),
        corpus.len(),
        args.out.display(),
        manifest.run_id
    );
    Ok(0)
}

fn default_probe() -> Result<Instance> {
    Ok(toy_corpus(42, 1)?.remove(0))
}

fn cmd_bridge_check(args: BridgeCheckArgs) -> Result<u8> {
    let probe_record = match &args.instance {
        Some(path) => load_single_record(path)?,
        None => default_probe()?.into(),
    };
    let mut source = args.bridge.source()?;
    if let BridgeSource::Toy { fault, .. } = &mut source {
        *fault = args.fault;
    }

    println!("bridge: {}", source.describe());
    let connected = match source.connect(args.bridge.timeout()) {
        Err(Error::Protocol(message)) => {
            // the process is up but its announcement breaks the protocol
            println!("{}", CheckResult::failed("handshake", message).line());
            println!("0 passed, 1 failed, 0 skipped");
            return Ok(1);
        }
        other => other?,
    };
    let mut bridge: Box<dyn seqattrib::oracle::Bridge> = match connected {
        Some(b) => b,
        None => Box::new(source.toy_bridge(&probe_record.clone().into_instance()?)?),
    };

    // outputs the bridge can score: its own prediction when it can decode
    let mut probe_record = probe_record;
    if bridge.capabilities().supports_generate {
        let request = seqattrib::oracle::Message::Generate {
            id: "check-probe".into(),
            input_tokens: probe_record.input_tokens.clone(),
        };
        match bridge.exchange(&[request]) {
            Ok(replies) => {
                if let Some(seqattrib::oracle::Message::GenerateResult { output_tokens, .. }) =
                    replies.into_iter().next()
                {
                    if !output_tokens.is_empty() {
                        probe_record.output_tokens = output_tokens;
                    }
                }
            }
            Err(e @ Error::Transport(_)) => return Err(e),
            Err(_) => {}
        }
    }
    let probe = probe_record.into_instance()?;

    let results = run_checks(bridge.as_mut(), &probe)?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| r.status == Status::Fail).count();
    let passed = results.iter().filter(|r| r.status == Status::Pass).count();
    println!(
        "{passed} passed, {failed} failed, {} skipped",
        results.len() - passed - failed
    );
    Ok(if failed == 0 { 0 } else { 1 })
}

fn cmd_toy_corpus(args: ToyCorpusArgs) -> Result<u8> {
    std::fs::create_dir_all(&args.out)?;
    for inst in toy_corpus(args.seed, args.n)? {
        let path = args.out.join(format!("{}.json", inst.id()));
        write_atomic(&path, (inst.to_json_string() + "\n").as_bytes())?;
    }
    println!("{} instances written to {}", args.n, args.out.display());
    Ok(0)
}

fn cmd_toy_bridge(args: ToyBridgeArgs) -> Result<u8> {
    let instance = match &args.instance {
        Some(path) => load_single_record(path)?.into_instance()?,
        None => default_probe()?,
    };
    let bridge = match &args.toy_spec {
        Some(path) => ToyBridge::new(
            ToyModelSpec::from_json_str(&std::fs::read_to_string(path)?)?,
            instance.features().to_vec(),
        )?,
        None => ToyBridge::for_instance(&instance)?,
    }
    .with_fault(args.fault);

    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", bridge.announcement().to_line())?;
    out.flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(out, "{}", bridge.respond_line(&line).to_line())?;
        out.flush()?;
    }
    Ok(0)
}
