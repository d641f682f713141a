//! Command-line front end: fixture generation, scoring, evaluation and curves.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 I/O error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use vlscore::metrics::{
    evaluate, pr_curve, retention_curve_with, Connectivity, EvalOptions, GridSpec, MetricsReport,
    ScoredPixels, DEFAULT_GRID_SIZE,
};
use vlscore::scoring::{class_index_for_bundle, score_bundle_with};
use vlscore::synth::{gen_fixture, FixtureSpec};
use vlscore::tensor::{read_tensor_f32, read_tensor_u8, write_atomic};
use vlscore::{load_bundle, parse_vocab_config, default_vocab, Execution, LabelMap, MergeMode, UncertaintyMap, VocabConfig};

pub const VOCAB_ENV: &str = "VLSCORE_DEFAULT_VOCAB";

#[derive(thiserror::Error, Debug)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] vlscore::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_io() => 2,
            CliError::Io { .. } => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "vlscore", version, about = "Vision-language anomaly scoring and benchmark metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a deterministic synthetic bundle directory.
    GenFixture(GenArgs),
    /// Score a bundle into an H×W anomaly map (.vlt).
    Score(ScoreArgs),
    /// Compute pixel and component metrics for one or more score maps.
    Eval(EvalArgs),
    /// Emit the retention or precision-recall curve as CSV.
    Curve(CurveArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FixtureKind {
    Demo,
    MergingBoundary,
    Random,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FixtureKind::Demo)]
    kind: FixtureKind,
    /// JSON fixture spec; overrides --kind (its seed is replaced by --seed).
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// "default" or a path to a vocabulary JSON.
    #[arg(long, default_value = "default")]
    vocab: String,
    #[arg(long, default_value = "19", value_parser = ["19", "8", "3", "1"])]
    merge: String,
    /// none, a named set from the vocabulary (ra19, smiyc, rba), or file:PATH.
    #[arg(long)]
    ood_prompts: Option<String>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    temp: Option<f32>,
    #[arg(long)]
    out: PathBuf,
    /// JSON provenance report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required = true)]
    scores: Vec<PathBuf>,
    #[arg(long, required = true)]
    labels: Vec<PathBuf>,
    /// Number of uniform component thresholds per image.
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CurveKind {
    Retention,
    Pr,
}

#[derive(Args, Debug)]
struct CurveArgs {
    #[arg(long, required = true)]
    scores: Vec<PathBuf>,
    #[arg(long, required = true)]
    labels: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = CurveKind::Retention)]
    kind: CurveKind,
    #[arg(long)]
    out: PathBuf,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenFixture(a) => cmd_gen(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Curve(a) => cmd_curve(a),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Shortest decimal that round-trips the f32, rather than its f64 widening.
fn f32_json(x: f32) -> Value {
    x.to_string().parse::<f64>().map(Value::from).unwrap_or(Value::Null)
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str::<FixtureSpec>(&read_text(p)?)
            .map_err(|e| CliError::Usage(format!("fixture spec {}: {e}", p.display())))?,
        None => match a.kind {
            FixtureKind::Demo => FixtureSpec::demo(a.seed),
            FixtureKind::MergingBoundary => FixtureSpec::merging_boundary(a.seed),
            FixtureKind::Random => FixtureSpec::random(a.seed),
        },
    };
    spec.seed = a.seed;
    let f = gen_fixture(&spec, &a.out)?;
    eprintln!(
        "wrote {} (N={}, H={}, W={}, P={})",
        a.out.display(),
        f.bundle.n_queries(),
        f.bundle.height(),
        f.bundle.width(),
        f.bundle.text_raw.rows()
    );
    Ok(())
}

/// Resolves `--vocab`: "default" reads the file named by the environment
/// variable when set, else the shipped vocabulary.
fn load_vocab(arg: &str) -> CliResult<VocabConfig> {
    if arg == "default" {
        return match std::env::var_os(VOCAB_ENV) {
            Some(p) if !p.is_empty() => Ok(parse_vocab_config(&read_text(Path::new(&p))?)?),
            _ => Ok(default_vocab()),
        };
    }
    Ok(parse_vocab_config(&read_text(Path::new(arg))?)?)
}

fn resolve_ood(cfg: &VocabConfig, arg: Option<&str>) -> CliResult<Vec<String>> {
    match arg {
        None => Ok(cfg.ood_classes.clone()),
        Some("none") => Ok(Vec::new()),
        Some(s) => match s.strip_prefix("file:") {
            Some(path) => {
                let text = read_text(Path::new(path))?;
                if text.trim_start().starts_with('[') {
                    serde_json::from_str(&text)
                        .map_err(|e| CliError::Usage(format!("OOD prompt file {path}: {e}")))
                } else {
                    Ok(text
                        .lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty())
                        .map(String::from)
                        .collect())
                }
            }
            None => Ok(cfg.ood_set(s)?.to_vec()),
        },
    }
}

fn cmd_score(a: ScoreArgs) -> CliResult<()> {
    let mut bundle = load_bundle(&a.bundle)?;
    let vocab = load_vocab(&a.vocab)?;
    let (cfg, mode) = if a.merge == "19" {
        (vocab, MergeMode::None)
    } else {
        (vocab.with_merging_preset(&a.merge)?, MergeMode::Merged)
    };
    let ood = resolve_ood(&cfg, a.ood_prompts.as_deref())?;
    if let Some(v) = a.alpha {
        bundle.alpha = v;
    }
    if let Some(v) = a.beta {
        bundle.beta = v;
    }
    if let Some(v) = a.temp {
        bundle.temperature = v;
    }
    bundle.validate()?;
    let idx = class_index_for_bundle(&bundle, &cfg, mode, &ood)?;
    let scored = score_bundle_with(&bundle, &idx, exec(a.sequential))?;
    let mode_name = serde_json::to_value(scored.mode).expect("mode serializes");
    eprintln!(
        "scored {}: K_eff={} Q={} classifier={} alpha={} beta={} T={}",
        a.bundle.display(),
        idx.id_channel_count(),
        idx.ood_count(),
        mode_name.as_str().unwrap_or_default(),
        bundle.alpha,
        bundle.beta,
        bundle.temperature
    );
    write_atomic(&a.out, &scored.map.tensor().to_bytes())?;
    if let Some(report) = &a.report {
        let u = scored.map.data();
        let (lo, hi) = u
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        write_json(
            report,
            &json!({
                "command": "score",
                "bundle": a.bundle.display().to_string(),
                "vocab": a.vocab,
                "merge": a.merge,
                "ood_prompts": a.ood_prompts.as_deref().unwrap_or("none"),
                "ood_prompt_names": ood,
                "k_eff": idx.id_channel_count(),
                "q": idx.ood_count(),
                "classifier": mode_name,
                "alpha": f32_json(bundle.alpha),
                "beta": f32_json(bundle.beta),
                "temperature": f32_json(bundle.temperature),
                "n_queries": bundle.n_queries(),
                "height": bundle.height(),
                "width": bundle.width(),
                "u_min": f32_json(lo),
                "u_max": f32_json(hi),
                "output": a.out.display().to_string(),
            }),
        )?;
    }
    Ok(())
}

fn load_pairs(scores: &[PathBuf], labels: &[PathBuf]) -> CliResult<Vec<(UncertaintyMap, LabelMap)>> {
    if scores.len() != labels.len() {
        return Err(CliError::Usage(format!(
            "{} --scores but {} --labels; they pair up in order",
            scores.len(),
            labels.len()
        )));
    }
    scores
        .iter()
        .zip(labels)
        .map(|(s, l)| {
            let u = UncertaintyMap::new(read_tensor_f32(s)?)?;
            let gt = LabelMap::new(read_tensor_u8(l)?)?;
            if u.shape() != gt.shape() {
                return Err(CliError::Core(vlscore::Error::Dimension(format!(
                    "{} is {:?} but {} is {:?}",
                    s.display(),
                    u.shape(),
                    l.display(),
                    gt.shape()
                ))));
            }
            Ok((u, gt))
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let images = load_pairs(&a.scores, &a.labels)?;
    if a.grid == 0 {
        return Err(CliError::Usage("--grid must be at least 1".into()));
    }
    let opts = EvalOptions {
        grid: GridSpec::Uniform(a.grid),
        exec: exec(a.sequential),
        ..EvalOptions::default()
    };
    let report: MetricsReport = evaluate(&images, &opts)?;
    let mut obj = match serde_json::to_value(&report).expect("report serializes") {
        Value::Object(m) => m,
        _ => unreachable!("struct serializes to an object"),
    };
    let paths = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>();
    let mut config = Map::new();
    config.insert("scores".into(), json!(paths(&a.scores)));
    config.insert("labels".into(), json!(paths(&a.labels)));
    config.insert("grid".into(), serde_json::to_value(&opts.grid).expect("grid serializes"));
    config.insert(
        "connectivity".into(),
        json!(if opts.connectivity == Connectivity::Eight { 8 } else { 4 }),
    );
    config.insert("target_tpr".into(), json!(opts.target_tpr));
    obj.insert("config".into(), Value::Object(config));
    let value = Value::Object(obj);
    match &a.report {
        Some(p) => write_json(p, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value).expect("json value serializes")),
    }
    eprintln!(
        "AP={:.4} FPR@95TPR={:.4} sIoU={:.4} PPV={:.4} F1={:.4}",
        report.ap, report.fpr_at_95tpr, report.siou_gt, report.ppv, report.mean_f1
    );
    Ok(())
}

fn cmd_curve(a: CurveArgs) -> CliResult<()> {
    let images = load_pairs(&a.scores, &a.labels)?;
    let mut pooled = ScoredPixels::default();
    for (u, gt) in &images {
        pooled.extend(&ScoredPixels::from_map(u, gt)?);
    }
    let mut csv = String::new();
    match a.kind {
        CurveKind::Retention => {
            csv.push_str("threshold,ood_recall,id_retention\n");
            for p in retention_curve_with(&pooled, &pooled.id_scores(), Execution::Parallel)? {
                let _ = writeln!(csv, "{},{},{}", p.threshold, p.ood_recall, p.id_retention);
            }
        }
        CurveKind::Pr => {
            csv.push_str("threshold,recall,precision\n");
            for p in pr_curve(&pooled)? {
                let _ = writeln!(csv, "{},{},{}", p.threshold, p.recall, p.precision);
            }
        }
    }
    Ok(write_atomic(&a.out, csv.as_bytes())?)
}
