//! The `mikv` command line.
//!
//! Exit codes: 0 success, 2 usage or validation, 3 data mismatch or malformed
//! trace, 4 I/O.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attention::{replay, ReplayOptions, RunReport, DEFAULT_ROPE_THETA};
use crate::balance::{analyze_outliers, write_outlier_csv};
use crate::cache::{
    memory_report, MemoryParams, MemoryReport, ModelDims, TierPrecision, FULL_PRECISION_BITS,
};
use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, PolicyKind};
use crate::quant::QuantSpec;
use crate::trace::{synth_random, synth_retrieval, AnswerKey, OutlierSpec, RetrievalSpec, Trace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_) | Error::InvalidState(_) | Error::Json(_) => EXIT_USAGE,
        Error::Format { .. } | Error::Mismatch(_) => EXIT_MISMATCH,
        Error::Io(_) | Error::Csv(_) => EXIT_IO,
    }
}

/// The run-config JSON consumed by `replay` and `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub policy: PolicyConfig,
    /// Checked against the trace header when present.
    #[serde(default)]
    pub dims: Option<ModelDims>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_theta")]
    pub theta_base: f64,
    /// Optional per-step CSV written next to the report.
    #[serde(default)]
    pub steps_csv: Option<PathBuf>,
}

fn default_theta() -> f64 {
    DEFAULT_ROPE_THETA
}

impl RunConfig {
    pub fn new(policy: PolicyConfig) -> Self {
        Self {
            policy,
            dims: None,
            seed: 0,
            theta_base: DEFAULT_ROPE_THETA,
            steps_csv: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Dims to replay with: the override if given, else the trace's own.
    pub fn resolve_dims(&self, trace: &Trace) -> Result<ModelDims> {
        match self.dims {
            Some(d) if d != trace.dims() => Err(Error::Mismatch(format!(
                "config dims {d:?} differ from trace header {:?}",
                trace.dims()
            ))),
            Some(d) => Ok(d),
            None => Ok(trace.dims()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mikv",
    version,
    about = "Mixed-precision KV cache compression toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic trace (and answer key in retrieval mode).
    Synth(SynthArgs),
    /// Replay a trace through a cache policy and write a JSON report.
    Replay(ReplayArgs),
    /// Analytic cache footprint for a configuration.
    Memory(MemoryArgs),
    /// Replay a grid of policies over one trace and write a CSV.
    Sweep(SweepArgs),
    /// Per-channel max |q|, |k|, |v| as CSV.
    AnalyzeOutliers(AnalyzeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Random,
    Retrieval,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "random")]
    mode: Mode,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long = "kv-heads", default_value_t = 2)]
    kv_heads: usize,
    #[arg(long = "head-dim", default_value_t = 128)]
    head_dim: usize,
    #[arg(long, default_value_t = 96)]
    prefill: usize,
    #[arg(long, default_value_t = 16)]
    gen: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `kv_head:channel:factor[:k|q|qk]`, repeatable.
    #[arg(long)]
    outlier: Vec<OutlierSpec>,
    /// Planted key/query pairs per head (retrieval mode).
    #[arg(long, default_value_t = 16)]
    pairs: usize,
    #[arg(long = "query-gain", default_value_t = 8.0)]
    query_gain: f32,
    /// Mark the trace as not yet rotated (random mode).
    #[arg(long = "pre-rope")]
    pre_rope: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Answer key; defaults to the trace's `.answers.json` sidecar if it exists.
    #[arg(long)]
    answers: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MemoryArgs {
    #[arg(long)]
    ratio: f64,
    /// `fp16` or an integer width.
    #[arg(long = "importance-bits", default_value = "fp16")]
    importance_bits: String,
    /// An integer width, or `evict`.
    #[arg(long = "retained-bits")]
    retained_bits: String,
    #[arg(long = "group-size", default_value_t = 64)]
    group_size: usize,
    #[arg(long)]
    aware: bool,
    /// A preset name or `layers,heads,kv_heads,head_dim`.
    #[arg(long, default_value = "llama2-7b")]
    dims: String,
    #[arg(long = "seq-len", default_value_t = 4096)]
    seq_len: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Width of an uncompressed element.
    #[arg(long = "element-bits", default_value_t = FULL_PRECISION_BITS)]
    element_bits: u32,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    ratios: Vec<f64>,
    /// Retained widths; `evict` selects the evicting policy.
    #[arg(long, value_delimiter = ',', required = true)]
    bits: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "false")]
    aware: Vec<bool>,
    /// Base config supplying window, importance precision and theta.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    answers: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Memory(a) => cmd_memory(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::AnalyzeOutliers(a) => cmd_analyze(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let dims = ModelDims::new(a.layers, a.heads, a.kv_heads, a.head_dim)?;
    match a.mode {
        Mode::Random => {
            let mut trace = synth_random(dims, a.prefill, a.gen, a.seed, &a.outlier)?;
            trace.header.rope_applied = !a.pre_rope;
            trace.save(&a.out)?;
            println!("wrote {} ({} steps)", a.out.display(), trace.n_steps());
        }
        Mode::Retrieval => {
            if a.pre_rope {
                return Err(Error::invalid("retrieval traces are always post-rotation"));
            }
            let spec = RetrievalSpec {
                n_pairs: a.pairs,
                n_prefill: a.prefill,
                n_gen: a.gen,
                query_gain: a.query_gain,
                outliers: a.outlier,
            };
            let (trace, answers) = synth_retrieval(dims, &spec, a.seed)?;
            trace.save(&a.out)?;
            let key_path = AnswerKey::sidecar_path(&a.out);
            answers.save(&key_path)?;
            println!(
                "wrote {} ({} steps) and {}",
                a.out.display(),
                trace.n_steps(),
                key_path.display()
            );
        }
    }
    Ok(())
}

fn load_answers(trace_path: &Path, explicit: Option<&Path>) -> Result<Option<AnswerKey>> {
    match explicit {
        Some(p) => Ok(Some(AnswerKey::load(p)?)),
        None => {
            let side = AnswerKey::sidecar_path(trace_path);
            if side.exists() {
                Ok(Some(AnswerKey::load(&side)?))
            } else {
                Ok(None)
            }
        }
    }
}

/// Replays with a run config, the shared path of `replay` and `sweep`.
pub fn run_config(
    trace: &Trace,
    config: &RunConfig,
    answers: Option<AnswerKey>,
) -> Result<RunReport> {
    let dims = config.resolve_dims(trace)?;
    let options = ReplayOptions {
        theta_base: config.theta_base,
        answers,
        seed: config.seed,
        ..ReplayOptions::default()
    };
    replay(trace, &config.policy, &dims, &options)
}

pub fn summary_line(r: &RunReport) -> String {
    let mut line = format!(
        "policy={} cosine={:.6} argmax_agreement={:.4}",
        r.policy.kind, r.aggregate.mean_cosine, r.aggregate.argmax_agreement
    );
    if let Some(f) = r.aggregate.retrieval_fidelity {
        line.push_str(&format!(" retrieval_fidelity={:.2}%", 100.0 * f));
    }
    line.push_str(&format!(" memory={:.2}%", r.memory.ratio_percent));
    line
}

fn cmd_replay(a: ReplayArgs) -> Result<()> {
    let config = RunConfig::load(&a.config)?;
    let trace = Trace::load(&a.trace)?;
    let answers = load_answers(&a.trace, a.answers.as_deref())?;
    let report = run_config(&trace, &config, answers)?;
    write_json(&a.out, &report)?;
    if let Some(csv_path) = &config.steps_csv {
        let mut w = create(csv_path)?;
        report.write_steps_csv(&mut w)?;
        w.flush()?;
    }
    println!("{}", summary_line(&report));
    Ok(())
}

/// `fp16`/`full`/`16` or an integer width.
pub fn parse_tier(text: &str) -> Result<TierPrecision> {
    match text.trim().to_ascii_lowercase().as_str() {
        "fp16" | "full" | "16" => Ok(TierPrecision::Full),
        "evict" | "none" => Ok(TierPrecision::Evicted),
        n => n
            .parse::<u8>()
            .map(TierPrecision::Int)
            .map_err(|_| Error::invalid(format!("bad bit width {text:?}"))),
    }
}

/// A preset name or `layers,heads,kv_heads,head_dim`.
pub fn parse_dims(text: &str) -> Result<ModelDims> {
    if !text.contains(',') {
        return ModelDims::preset(text);
    }
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::invalid(format!("bad dims {text:?}")))?;
    match parts[..] {
        [l, h, g, d] => ModelDims::new(l, h, g, d),
        _ => Err(Error::invalid(format!(
            "dims need four numbers, got {text:?}"
        ))),
    }
}

fn cmd_memory(a: MemoryArgs) -> Result<()> {
    let params = MemoryParams {
        dims: parse_dims(&a.dims)?,
        seq_len: a.seq_len,
        batch: a.batch,
        importance_ratio: a.ratio,
        importance: parse_tier(&a.importance_bits)?,
        retained: parse_tier(&a.retained_bits)?,
        group_size: a.group_size,
        outlier_aware: a.aware,
        element_bits: a.element_bits,
    };
    let report = memory_report(&params)?;
    if a.json {
        let mut out = io::stdout().lock();
        serde_json::to_writer_pretty(&mut out, &report)?;
        writeln!(out)?;
    } else {
        print!("{}", format_memory(&report));
    }
    Ok(())
}

pub fn format_memory(r: &MemoryReport) -> String {
    let gb = |b: f64| b / 1e9;
    let b = &r.breakdown;
    format!(
        "ratio: {:.2}%\nfull cache: {:.0} bytes ({:.2} GB)\ncompressed: {:.0} bytes ({:.2} GB)\n  importance: {:.0}\n  retained: {:.0}\n  scales/zeros: {:.0}\n  balancer: {:.0}\n",
        r.ratio_percent,
        r.full_cache_bytes,
        gb(r.full_cache_bytes),
        r.compressed_bytes,
        gb(r.compressed_bytes),
        b.importance_bytes,
        b.retained_bytes,
        b.scales_zeros_bytes,
        b.balancer_bytes,
    )
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub policy: PolicyKind,
    pub importance_ratio: f64,
    pub retained_bits: String,
    pub outlier_aware: bool,
    pub memory_percent: f64,
    pub mean_cosine: f64,
    pub min_cosine: f64,
    pub mean_logit_mse: f64,
    pub argmax_agreement: f64,
    pub retrieval_fidelity: Option<f64>,
}

/// Cross product of `ratios x bits x aware`, sorted by memory ascending.
pub fn sweep(
    trace: &Trace,
    base: &RunConfig,
    ratios: &[f64],
    bits: &[String],
    aware: &[bool],
    answers: Option<&AnswerKey>,
) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() || bits.is_empty() || aware.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let head_dim = trace.dims().head_dim;
    let mut rows = Vec::with_capacity(ratios.len() * bits.len() * aware.len());
    for &ratio in ratios {
        for b in bits {
            for &aw in aware {
                let mut policy = base.policy.clone();
                policy.importance_ratio = ratio;
                policy.outlier_aware = aw;
                match parse_tier(b)? {
                    TierPrecision::Evicted => policy.kind = PolicyKind::EvictHeavyHitter,
                    TierPrecision::Int(n) => {
                        if policy.kind == PolicyKind::EvictHeavyHitter {
                            policy.kind = PolicyKind::HeavyHitter;
                        }
                        policy.retained_precision = QuantSpec::for_head_dim(n, head_dim)?;
                    }
                    TierPrecision::Full => {
                        return Err(Error::invalid("sweep bit widths must be integers or evict"))
                    }
                }
                let config = RunConfig {
                    policy,
                    ..base.clone()
                };
                let r = run_config(trace, &config, answers.cloned())?;
                rows.push(SweepRow {
                    policy: r.policy.kind,
                    importance_ratio: ratio,
                    retained_bits: b.trim().to_string(),
                    outlier_aware: aw,
                    memory_percent: r.memory.ratio_percent,
                    mean_cosine: r.aggregate.mean_cosine,
                    min_cosine: r.aggregate.min_cosine,
                    mean_logit_mse: r.aggregate.mean_logit_mse,
                    argmax_agreement: r.aggregate.argmax_agreement,
                    retrieval_fidelity: r.aggregate.retrieval_fidelity,
                });
            }
        }
    }
    rows.sort_by(|a, b| a.memory_percent.total_cmp(&b.memory_percent));
    Ok(rows)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let trace = Trace::load(&a.trace)?;
    let head_dim = trace.dims().head_dim;
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(PolicyConfig::mixed(0.2, 4, head_dim, false)?),
    };
    let answers = load_answers(&a.trace, a.answers.as_deref())?;
    let rows = sweep(
        &trace,
        &base,
        &a.ratios,
        &a.bits,
        &a.aware,
        answers.as_ref(),
    )?;
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let trace = Trace::load(&a.trace)?;
    let stats = analyze_outliers(&trace);
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            write_outlier_csv(&stats, &mut w)?;
            w.flush()?;
        }
        None => write_outlier_csv(&stats, io::stdout().lock())?,
    }
    Ok(())
}
