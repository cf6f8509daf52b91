//! Command-line front end: `solve`, `synth`, `eval` and `features`.
//!
//! Exit codes: 0 on success (even when some objects have no valid
//! ellipsoid), 2 on invalid input or usage, 3 on a numerical failure.
//! `VGFM_THREADS` caps the number of worker threads.

use crate::eval::{evaluate, summarize, write_csv, EvalConfig, Summary};
use crate::geometry::Ellipsoid3D;
use crate::io::{
    has_numerical_failure, method_results, pair_features, FeaturesFile, InputError, ResultsFile,
    SceneFile, SkippedObject, FEATURES_VERSION, FEATURE_LAYOUT, RESULTS_VERSION,
};
use crate::scene::{SceneConfig, SceneError};
use crate::solver::{localize, Method, ObjectId};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const THREADS_ENV: &str = "VGFM_THREADS";
pub const SUMMARY_VERSION: &str = "vgfm-summary/1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<InputError> for CliError {
    fn from(e: InputError) -> Self {
        CliError::Input(e.0)
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::InvalidConfig(_) | SceneError::DegenerateConfig(_) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Lfd,
    Lfdc,
    Both,
}

impl MethodChoice {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodChoice::Lfd => vec![Method::Lfd],
            MethodChoice::Lfdc => vec![Method::Lfdc],
            MethodChoice::Both => Method::ALL.to_vec(),
        }
    }
}

/// Every setting a command uses. Serialised into each output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodChoice,
    pub seed: u64,
    pub noise_px: f64,
    pub scenes: usize,
    /// When set, each scene's arc span is drawn uniformly from this range.
    pub span_range_deg: Option<[f64; 2]>,
    pub iou_samples: usize,
    pub angle_bin_edges: Vec<f64>,
    pub scene: SceneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            method: MethodChoice::Both,
            seed: e.seed,
            noise_px: e.noise_px,
            scenes: 1,
            span_range_deg: e.span_range_deg,
            iou_samples: e.iou_samples,
            angle_bin_edges: e.angle_bin_edges,
            scene: e.scene,
        }
    }
}

impl RunConfig {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            scenes: self.scenes,
            seed: self.seed,
            methods: self.method.methods(),
            noise_px: self.noise_px,
            span_range_deg: self.span_range_deg,
            iou_samples: self.iou_samples,
            angle_bin_edges: self.angle_bin_edges.clone(),
            scene: self.scene.clone(),
        }
    }

    fn provenance(&self, command: &str) -> Value {
        json!({
            "tool": "vgfm",
            "tool_version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": self.seed,
            "settings": self,
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vgfm",
    version,
    about = "Ellipsoid localisation from multi-view detections"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate an ellipsoid per track of a scene file.
    Solve(SolveArgs),
    /// Generate synthetic scene files with ground truth.
    Synth(SynthArgs),
    /// Generate, solve and score synthetic scenes.
    Eval(EvalArgs),
    /// Emit pair geometry features from a scene or results file.
    Features(FeaturesArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SettingArgs {
    /// JSON file with settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Standard deviation of box-corner noise, pixels.
    #[arg(long = "noise-px")]
    pub noise_px: Option<f64>,
    /// Angle covered by the camera arc, degrees.
    #[arg(long = "span-deg")]
    pub span_deg: Option<f64>,
    /// Draw each scene's span uniformly from LO,HI degrees.
    #[arg(long = "span-range", value_name = "LO,HI", value_parser = parse_range)]
    pub span_range: Option<[f64; 2]>,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long = "iou-samples")]
    pub iou_samples: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    pub scene: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodChoice::Both)]
    pub method: MethodChoice,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub settings: SettingArgs,
    /// Output file for one scene, or directory when `--scenes` exceeds 1.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub settings: SettingArgs,
    #[arg(long, value_enum)]
    pub method: Option<MethodChoice>,
    /// Directory receiving `metrics.csv` and `summary.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FeaturesArgs {
    /// Scene or results file.
    pub input: PathBuf,
    /// Method to solve with (scene input) or to select (results input).
    #[arg(long, value_enum)]
    pub method: Option<MethodChoice>,
    /// Use the scene's ground-truth ellipsoids instead of solving.
    #[arg(long = "ground-truth")]
    pub ground_truth: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [lo, hi] = parts.as_slice() else {
        return Err(format!("expected LO,HI, got '{s}'"));
    };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("'{t}': {e}"));
    Ok([num(lo)?, num(hi)?])
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text)
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("output serialises");
    s.push('\n');
    s
}

/// Settings from `--config` (or defaults) with command-line overrides.
pub fn resolve_settings(
    args: &SettingArgs,
    method: Option<MethodChoice>,
    base: RunConfig,
) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        None => base,
    };
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.noise_px {
        cfg.noise_px = n;
    }
    if let Some(s) = args.span_deg {
        cfg.scene.span_deg = s;
        cfg.span_range_deg = None;
    }
    if let Some(r) = args.span_range {
        cfg.span_range_deg = Some(r);
    }
    if let Some(n) = args.objects {
        cfg.scene.objects = n;
    }
    if let Some(n) = args.frames {
        cfg.scene.frames = n;
    }
    if let Some(n) = args.scenes {
        cfg.scenes = n;
    }
    if let Some(n) = args.iou_samples {
        cfg.iou_samples = n;
    }
    cfg.eval_config().validate()?;
    Ok(cfg)
}

pub fn cmd_solve(args: &SolveArgs) -> Result<(), CliError> {
    let file = SceneFile::parse(&read_text(&args.scene)?)?;
    let problem = file.to_problem()?;
    let cfg = RunConfig {
        method: args.method,
        ..RunConfig::default()
    };
    let mut numerical = false;
    let results = args
        .method
        .methods()
        .into_iter()
        .map(|m| {
            let solves = localize(m, &problem.tracks, &problem.cameras);
            numerical |= has_numerical_failure(&solves);
            method_results(m, &solves, &problem)
        })
        .collect();
    let mut config = json!({
        "tool": "vgfm",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": "solve",
        "method": args.method,
        "seed": cfg.seed,
    });
    if let Some(src) = &file.config {
        config["scene_config"] = src.clone();
    }
    let out = ResultsFile {
        version: RESULTS_VERSION.to_string(),
        config,
        results,
    };
    write_text(args.out.as_deref(), &out.to_json())?;
    if numerical {
        return Err(CliError::Numerical(
            "at least one object's system could not be solved".into(),
        ));
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = resolve_settings(&args.settings, None, RunConfig::default())?;
    let eval = cfg.eval_config();
    let render = |i: usize| -> Result<String, CliError> {
        let scene = eval.scene(i)?;
        let mut provenance = cfg.provenance("synth");
        provenance["scene_index"] = json!(i);
        provenance["span_deg"] = json!(scene.span_deg());
        Ok(SceneFile::from_synthetic(&scene, Some(provenance)).to_json())
    };
    if cfg.scenes == 1 {
        return write_text(args.out.as_deref(), &render(0)?);
    }
    let dir = args
        .out
        .as_deref()
        .ok_or_else(|| CliError::Input("--out DIR is required when --scenes > 1".into()))?;
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    for i in 0..cfg.scenes {
        write_text(Some(&dir.join(format!("scene_{i:04}.json"))), &render(i)?)?;
    }
    Ok(())
}

/// Metrics CSV with a leading `#` line holding the settings as JSON.
pub fn metrics_csv(records: &[crate::eval::MetricsRecord], provenance: &Value) -> String {
    let mut buf = format!("# {}\n", serde_json::to_string(provenance).expect("json")).into_bytes();
    write_csv(records, &mut buf).expect("in-memory csv");
    String::from_utf8(buf).expect("utf-8 csv")
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Summary, CliError> {
    let base = RunConfig {
        scenes: EvalConfig::default().scenes,
        ..RunConfig::default()
    };
    let cfg = resolve_settings(&args.settings, args.method, base)?;
    let eval = cfg.eval_config();
    let records = evaluate(&eval)?;
    let summary = summarize(&records, &eval.angle_bin_edges);
    let provenance = cfg.provenance("eval");
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", args.out.display())))?;
    write_text(
        Some(&args.out.join("metrics.csv")),
        &metrics_csv(&records, &provenance),
    )?;
    let doc = json!({
        "version": SUMMARY_VERSION,
        "config": provenance,
        "summary": summary,
    });
    write_text(Some(&args.out.join("summary.json")), &to_pretty(&doc))?;
    Ok(summary)
}

pub fn cmd_features(args: &FeaturesArgs) -> Result<(), CliError> {
    let text = read_text(&args.input)?;
    let version = serde_json::from_str::<Value>(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.input.display())))?
        .get("version")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .unwrap_or_default();
    let mut skipped = Vec::new();
    let mut ellipsoids: BTreeMap<ObjectId, Ellipsoid3D> = BTreeMap::new();
    let source;
    if version == RESULTS_VERSION {
        let file = ResultsFile::parse(&text)?;
        let block = match args.method {
            None => file.results.first(),
            Some(MethodChoice::Both) => {
                return Err(CliError::Input("features need a single method".into()))
            }
            Some(m) => {
                let wanted = m.methods()[0];
                file.results.iter().find(|b| b.method == wanted)
            }
        }
        .ok_or_else(|| CliError::Input("results file has no matching method block".into()))?;
        source = block.method.to_string();
        for o in &block.objects {
            match o.ellipsoid.as_ref().map(|e| e.to_ellipsoid()) {
                Some(Ok(e)) => {
                    ellipsoids.insert(o.object_id, e);
                }
                Some(Err(reason)) => skipped.push(SkippedObject {
                    object_id: o.object_id,
                    reason,
                }),
                None => skipped.push(SkippedObject {
                    object_id: o.object_id,
                    reason: o.reason.clone().unwrap_or_else(|| "no ellipsoid".into()),
                }),
            }
        }
    } else {
        let problem = SceneFile::parse(&text)?.to_problem()?;
        if args.ground_truth {
            if problem.ground_truth.is_empty() {
                return Err(CliError::Input("scene file has no ground truth".into()));
            }
            source = "ground_truth".to_string();
            ellipsoids = problem.ground_truth.clone();
        } else {
            let method = match args.method.unwrap_or(MethodChoice::Lfdc) {
                MethodChoice::Both => {
                    return Err(CliError::Input("features need a single method".into()))
                }
                m => m.methods()[0],
            };
            source = method.to_string();
            let solves = localize(method, &problem.tracks, &problem.cameras);
            if has_numerical_failure(&solves) {
                return Err(CliError::Numerical(
                    "at least one object's system could not be solved".into(),
                ));
            }
            for s in solves {
                match s.result {
                    Ok(r) => match r.ellipsoid() {
                        Some(e) => {
                            ellipsoids.insert(s.object_id, *e);
                        }
                        None => skipped.push(SkippedObject {
                            object_id: s.object_id,
                            reason: r.estimate.reason().unwrap_or_default(),
                        }),
                    },
                    Err(e) => skipped.push(SkippedObject {
                        object_id: s.object_id,
                        reason: e.to_string(),
                    }),
                }
            }
        }
    }
    for s in &skipped {
        eprintln!("warning: object {} skipped: {}", s.object_id, s.reason);
    }
    let out = FeaturesFile {
        version: FEATURES_VERSION.to_string(),
        config: json!({
            "tool": "vgfm",
            "tool_version": env!("CARGO_PKG_VERSION"),
            "command": "features",
            "input_version": version,
            "seed": 0,
        }),
        source,
        layout: FEATURE_LAYOUT.to_string(),
        pairs: pair_features(&ellipsoids),
        skipped,
    };
    write_text(args.out.as_deref(), &out.to_json())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => {
            let s = cmd_eval(a)?;
            for (m, ms) in &s.methods {
                eprintln!(
                    "{m}: {}/{} valid ({:.1}%)",
                    ms.valid,
                    ms.objects,
                    100.0 * ms.validity_rate.unwrap_or(0.0)
                );
            }
            Ok(())
        }
        Command::Features(a) => cmd_features(a),
    }
}

/// Worker count from `VGFM_THREADS`, if set.
pub fn thread_limit() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Input(format!(
                "{THREADS_ENV} must be a positive integer, got '{v}'"
            ))),
        },
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = thread_limit().and_then(|limit| match limit {
        None => dispatch(&cli),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Input(format!("thread pool: {e}")))?
            .install(|| dispatch(&cli)),
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
