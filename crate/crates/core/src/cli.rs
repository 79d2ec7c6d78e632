//! The `faa` command line: argument parsing, configuration merging, run
//! manifests and the experiment harnesses behind each subcommand.
//!
//! Every command writes `manifest.json` into its `--out` directory.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration or usage
//! error, 3 data error, 4 search aborted, 130 interrupted.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Once;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{load_dataset, synth_dataset, Dataset, Format, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{self, Metrics, ModelParams, TrainConfig};
use crate::policy::{apply_sub_policy_traced, Partners, Policy, PolicySet, SubPolicy};
use crate::rng::{self, tag};
use crate::search::{self, fast_autoaugment, SearchConfig};
use crate::tpe::{SearchSpace, TpeConfig, TrialHistory};

/// Environment variable overriding `--concurrency`.
pub const WORKERS_ENV: &str = "FAA_WORKERS";

/// Pool sizes of the sub-policy sweep; 0 stands for the whole pool.
pub const DEFAULT_SWEEP_SIZES: [usize; 6] = [5, 25, 50, 100, 200, 0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Search,
    Interrupted,
    Other,
}

/// An error tagged with the stage that produced it, which fixes the exit code.
#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub error: Error,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self.category {
            Category::Other => 1,
            Category::Config => 2,
            Category::Data => 3,
            Category::Search => 4,
            Category::Interrupted => 130,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.category {
            Category::Config => "config error",
            Category::Data => "data error",
            Category::Search => "search aborted",
            Category::Interrupted => "interrupted",
            Category::Other => "error",
        };
        write!(f, "{stage}: {}", self.error)
    }
}

impl std::error::Error for CliError {}

trait Tag<T> {
    fn tag(self, category: Category) -> Result<T, CliError>;
}

impl<T> Tag<T> for Result<T> {
    fn tag(self, category: Category) -> Result<T, CliError> {
        self.map_err(|error| {
            let category = match error {
                Error::Interrupted => Category::Interrupted,
                _ => category,
            };
            CliError { category, error }
        })
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "faa", version, about = "Augmentation policy search by density matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search augmentation policies and write policies.json.
    Search(SearchArgs),
    /// Train a fresh probe, optionally augmented with a policy set.
    Retrain(RetrainArgs),
    /// Loss and accuracy of a checkpoint, optionally under a policy set.
    Eval(EvalArgs),
    /// Apply one sub-policy repeatedly and tabulate which operations fired.
    Apply(ApplyArgs),
    /// Retrain with growing prefixes of a searched sub-policy pool.
    SweepSubpolicies(SweepArgs),
    /// Run the optimizer on toy objectives against uniform random search.
    BenchTpe(BenchArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct SearchArgs {
    /// Dataset: `synth:CxN[@seed]`, `idx:<prefix>`, `raw:<dir>` or a path.
    #[arg(long)]
    pub data: String,
    /// TOML file with `[search]` and `[retrain]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "faa-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub eval_subsample: Option<usize>,
    /// Epochs of fold probe training.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Random flips and ±2 px shifts while training fold probes.
    #[arg(long)]
    pub fold_baseline_aug: bool,
    /// Fresh optimizer history for every round.
    #[arg(long)]
    pub restart_rounds: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RetrainArgs {
    #[arg(long)]
    pub data: String,
    /// Held-out dataset for the reported test metrics.
    #[arg(long)]
    pub test_data: Option<String>,
    /// policies.json from a search; omitted means no augmentation.
    #[arg(long, conflicts_with = "random_policies")]
    pub policies: Option<PathBuf>,
    /// Augment with this many uniformly random policies instead.
    #[arg(long)]
    pub random_policies: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "faa-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Random flips and ±2 px shifts before policy augmentation.
    #[arg(long)]
    pub baseline_aug: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: String,
    /// Evaluate on `T(D)` for the union of all sub-policies in this set.
    #[arg(long)]
    pub policies: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "faa-out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ApplyArgs {
    #[arg(long)]
    pub data: String,
    /// Two operations as `Kind:p:lambda,Kind:p:lambda`.
    #[arg(long)]
    pub sub_policy: String,
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    /// Number of augmented images written as fixtures.
    #[arg(long, default_value_t = 16)]
    pub dump: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "faa-out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub test_data: String,
    #[arg(long)]
    pub policies: PathBuf,
    /// Pool sizes; 0 means the whole pool.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_SIZES)]
    pub sizes: Vec<usize>,
    /// Repetitions per pool size.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "faa-out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long, default_value_t = 150)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "faa-out")]
    pub out: PathBuf,
}

impl Default for BenchArgs {
    fn default() -> Self {
        Self {
            runs: 100,
            trials: 150,
            seed: 0,
            out: PathBuf::from("faa-out"),
        }
    }
}

/// Contents of a `--config` file. Both tables are optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub search: SearchConfig,
    pub retrain: TrainConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }
}

fn workers_override() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Usage(format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

/// Built-in defaults, then the config file, then flags, then `FAA_WORKERS`.
pub fn search_config(args: &SearchArgs) -> Result<SearchConfig> {
    let mut cfg = FileConfig::load(args.config.as_deref())?.search;
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.k, args.k);
    set(&mut cfg.t, args.t);
    set(&mut cfg.b, args.b);
    set(&mut cfg.n, args.n);
    set(&mut cfg.concurrency, args.concurrency);
    set(&mut cfg.fold_train.epochs, args.epochs);
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(cap) = args.eval_subsample {
        cfg.eval_subsample = Some(cap);
    }
    if let Some(lr) = args.lr {
        cfg.fold_train.learning_rate = lr;
    }
    cfg.fold_train.baseline_aug |= args.fold_baseline_aug;
    cfg.restart_rounds |= args.restart_rounds;
    if let Some(w) = workers_override()? {
        cfg.concurrency = w;
    }
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train_config(file: Option<&Path>, seed: Option<u64>, epochs: Option<usize>, lr: Option<f64>) -> Result<TrainConfig> {
    let mut cfg = FileConfig::load(file)?.retrain;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = lr {
        cfg.learning_rate = lr;
    }
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Resolves a dataset URI.
///
/// - `synth:CxN` or `synth:CxN@seed`: C classes of N synthetic 16×16 images.
/// - `idx:<prefix>`: `<prefix>-images-idx3-ubyte` and `<prefix>-labels-idx1-ubyte`.
/// - `raw:<dir>`: per-class directories of image buffers.
/// - any other string: a directory is read as raw-dir, anything else as an IDX prefix.
pub fn load_source(uri: &str) -> Result<Dataset> {
    if let Some(spec) = uri.strip_prefix("synth:") {
        let (dims, seed) = match spec.split_once('@') {
            Some((d, s)) => (d, s.parse().map_err(|_| Error::Usage(format!("bad synth seed in '{uri}'")))?),
            None => (spec, 0),
        };
        let parsed = dims
            .split_once('x')
            .and_then(|(c, n)| Some((c.parse().ok()?, n.parse().ok()?)));
        let Some((classes, per_class)) = parsed else {
            return Err(Error::Usage(format!("expected synth:CxN, got '{uri}'")));
        };
        return synth_dataset(&SynthSpec::new(classes, per_class), rng::derive_seed(seed, &[tag::SYNTH]));
    }
    if let Some(prefix) = uri.strip_prefix("idx:") {
        return load_dataset(Path::new(prefix), Format::Idx);
    }
    if let Some(dir) = uri.strip_prefix("raw:") {
        return load_dataset(Path::new(dir), Format::RawDir);
    }
    let path = Path::new(uri);
    let format = if path.is_dir() { Format::RawDir } else { Format::Idx };
    load_dataset(path, format)
}

/// The run record written as `manifest.json`.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// `ok`, `aborted` or `failed`.
    pub status: String,
    pub error: Option<String>,
    pub config: Value,
    pub seeds: Value,
    pub datasets: Vec<DatasetInfo>,
    pub timings: Value,
    /// Files written by the run that exist at manifest time.
    pub outputs: Vec<PathBuf>,
    pub summary: Value,
    /// Algorithm defaults, for comparison with `config`.
    pub reference_defaults: Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct DatasetInfo {
    pub role: String,
    pub source: String,
    pub name: String,
    pub images: usize,
    pub classes: usize,
    pub shape: [usize; 3],
    pub fingerprint: String,
}

impl DatasetInfo {
    fn new(role: &str, source: &str, d: &Dataset) -> Self {
        let (h, w, c) = d.shape();
        Self {
            role: role.into(),
            source: source.into(),
            name: d.name().into(),
            images: d.len(),
            classes: d.class_count(),
            shape: [h, w, c],
            fingerprint: d.fingerprint(),
        }
    }
}

fn reference_defaults() -> Value {
    json!({"k": 5, "t": 2, "b": 200, "n": 10, "ops_per_sub_policy": 2, "sub_policies": 5, "operations": 16})
}

struct ManifestWriter {
    out: PathBuf,
    started: Instant,
    manifest: RunManifest,
}

impl ManifestWriter {
    fn new(command: &str, out: &Path) -> CliResult<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e)).tag(Category::Other)?;
        Ok(Self {
            out: out.to_path_buf(),
            started: Instant::now(),
            manifest: RunManifest {
                command: command.into(),
                status: "failed".into(),
                error: None,
                config: Value::Null,
                seeds: Value::Null,
                datasets: Vec::new(),
                timings: Value::Null,
                outputs: Vec::new(),
                summary: Value::Null,
                reference_defaults: reference_defaults(),
            },
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn output(&mut self, name: &str) {
        self.manifest.outputs.push(self.out.join(name));
    }

    fn finish<T>(mut self, result: CliResult<T>) -> CliResult<T> {
        match &result {
            Ok(_) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = match e.category {
                    Category::Interrupted | Category::Search => "aborted",
                    _ => "failed",
                }
                .into();
                self.manifest.error = Some(e.to_string());
            }
        }
        if self.manifest.timings.is_null() {
            self.manifest.timings = json!({});
        }
        if let Value::Object(map) = &mut self.manifest.timings {
            map.insert("total_ms".into(), json!(self.started.elapsed().as_millis() as u64));
        }
        self.manifest.outputs.retain(|p| p.exists());
        let path = self.path("manifest.json");
        self.manifest.outputs.push(path.clone());
        let written = serde_json::to_string_pretty(&self.manifest)
            .map_err(Error::from)
            .and_then(|s| fs::write(&path, s + "\n").map_err(|e| Error::io(&path, e)))
            .tag(Category::Other);
        match (result, written) {
            (Err(e), _) => Err(e),
            (Ok(_), Err(e)) => Err(e),
            (Ok(v), Ok(())) => Ok(v),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

fn csv_error(path: &Path, e: impl fmt::Display) -> Error {
    Error::Usage(format!("{}: {e}", path.display()))
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);
static HANDLER: Once = Once::new();

fn interrupt_flag() -> &'static AtomicBool {
    HANDLER.call_once(|| {
        // another handler may already be installed by an embedding program
        let _ = ctrlc::set_handler(|| INTERRUPTED.store(true, Ordering::SeqCst));
    });
    &INTERRUPTED
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub train_seed: u64,
    pub probe_hash: String,
    pub train_accuracy: f64,
    pub d_a_accuracy: f64,
    pub d_a_loss: f64,
    pub mean_trial_loss: f64,
    pub mean_selected_loss: f64,
    pub best_loss: f64,
    /// Mean accuracy of the probe on `T(D_A)` over the selected trials.
    pub mean_selected_accuracy: f64,
    pub train_ms: u64,
    pub explore_ms: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SearchReport {
    pub policies_path: PathBuf,
    pub policies: usize,
    pub sub_policies: usize,
    pub trials: usize,
    pub folds: Vec<FoldSummary>,
}

impl fmt::Display for SearchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} policies ({} sub-policies) from {} trials -> {}",
            self.policies,
            self.sub_policies,
            self.trials,
            self.policies_path.display()
        )?;
        for s in &self.folds {
            writeln!(
                f,
                "fold {}: probe train acc {:.4}, D_A acc {:.4} loss {:.4}; trial loss mean {:.4}, selected mean {:.4}, best {:.4}",
                s.fold, s.train_accuracy, s.d_a_accuracy, s.d_a_loss, s.mean_trial_loss, s.mean_selected_loss, s.best_loss
            )?;
        }
        Ok(())
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// `search`: runs the full policy search and writes `policies.json`,
/// `trials.jsonl` and `manifest.json` into `args.out`.
pub fn cmd_search(args: &SearchArgs) -> CliResult<SearchReport> {
    let mut mf = ManifestWriter::new("search", &args.out)?;
    let result = run_search(args, &mut mf);
    mf.finish(result)
}

fn run_search(args: &SearchArgs, mf: &mut ManifestWriter) -> CliResult<SearchReport> {
    let cfg = search_config(args).tag(Category::Config)?;
    mf.manifest.config = serde_json::to_value(&cfg).map_err(Error::from).tag(Category::Other)?;
    let data = load_source(&args.data).tag(Category::Data)?;
    mf.manifest.datasets.push(DatasetInfo::new("train", &args.data, &data));
    mf.manifest.seeds = json!({
        "master": cfg.seed,
        "fold_train": (0..cfg.k).map(|f| search::fold_train_seed(&cfg, f)).collect::<Vec<_>>(),
    });

    let outcome = fast_autoaugment(&data, &cfg, Some(interrupt_flag())).tag(Category::Search)?;

    let policies_path = mf.path("policies.json");
    outcome.policies.save(&policies_path).tag(Category::Other)?;
    mf.output("policies.json");
    let trials_path = mf.path("trials.jsonl");
    let mut lines = String::new();
    for t in outcome.trial_records() {
        let line = json!({
            "fold": t.fold,
            "round": t.round,
            "trial": t.trial,
            "params": t.params,
            "loss": t.loss,
            "accuracy": t.accuracy,
            "elapsed_ms": t.elapsed_ms,
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    write_text(&trials_path, &lines).tag(Category::Other)?;
    mf.output("trials.jsonl");

    let folds: Vec<FoldSummary> = outcome
        .folds
        .iter()
        .map(|f| {
            let all = f.rounds.iter().flat_map(|r| r.trials.iter());
            let selected: Vec<_> = f
                .rounds
                .iter()
                .flat_map(|r| r.selected.iter().map(move |&i| &r.trials[i]))
                .collect();
            FoldSummary {
                fold: f.fold,
                train_seed: search::fold_train_seed(&cfg, f.fold),
                probe_hash: f.hash_after.clone(),
                train_accuracy: f.train_metrics.accuracy,
                d_a_accuracy: f.d_a_metrics.accuracy,
                d_a_loss: f.d_a_metrics.loss,
                mean_trial_loss: mean(all.map(|t| t.loss)),
                mean_selected_loss: mean(selected.iter().map(|t| t.loss)),
                best_loss: selected.iter().map(|t| t.loss).fold(f64::INFINITY, f64::min),
                mean_selected_accuracy: mean(selected.iter().map(|t| t.accuracy)),
                train_ms: f.train_ms,
                explore_ms: f.explore_ms,
            }
        })
        .collect();
    mf.manifest.timings = json!({
        "folds": folds.iter().map(|s| json!({"fold": s.fold, "train_ms": s.train_ms, "explore_ms": s.explore_ms})).collect::<Vec<_>>(),
    });
    let report = SearchReport {
        policies_path,
        policies: outcome.policies.len(),
        sub_policies: outcome.policies.sub_policy_pool().len(),
        trials: outcome.trial_records().count(),
        folds,
    };
    mf.manifest.summary = serde_json::to_value(&report).map_err(Error::from).tag(Category::Other)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrainReport {
    pub checkpoint: PathBuf,
    pub param_hash: String,
    /// Sub-policies in the augmentation pool; 0 for plain training.
    pub pool_size: usize,
    pub train: Metrics,
    pub test: Option<Metrics>,
}

impl fmt::Display for RetrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "checkpoint {} ({} sub-policies)", self.checkpoint.display(), self.pool_size)?;
        writeln!(f, "train: loss {:.4}, accuracy {:.4}", self.train.loss, self.train.accuracy)?;
        if let Some(t) = &self.test {
            writeln!(f, "test: loss {:.4}, accuracy {:.4}, error {:.4}", t.loss, t.accuracy, 1.0 - t.accuracy)?;
        }
        Ok(())
    }
}

/// `retrain`: trains from scratch with the given (or random, or no) policy set
/// and writes `model.faam`.
pub fn cmd_retrain(args: &RetrainArgs) -> CliResult<RetrainReport> {
    let mut mf = ManifestWriter::new("retrain", &args.out)?;
    let result = run_retrain(args, &mut mf);
    mf.finish(result)
}

fn run_retrain(args: &RetrainArgs, mf: &mut ManifestWriter) -> CliResult<RetrainReport> {
    let mut cfg = train_config(args.config.as_deref(), args.seed, args.epochs, args.lr).tag(Category::Config)?;
    cfg.baseline_aug |= args.baseline_aug;
    let set = match (&args.policies, args.random_policies) {
        (Some(p), _) => Some(PolicySet::load(p).tag(Category::Data)?),
        (None, Some(n)) => Some(
            search::random_policy_set(n, crate::policy::DEFAULT_SUB_POLICIES, crate::policy::DEFAULT_OPS_PER_SUB_POLICY, cfg.seed)
                .tag(Category::Config)?,
        ),
        (None, None) => None,
    };
    mf.manifest.config = json!({
        "train": cfg,
        "policies": args.policies,
        "random_policies": args.random_policies,
    });
    mf.manifest.seeds = json!({"master": cfg.seed});
    let data = load_source(&args.data).tag(Category::Data)?;
    mf.manifest.datasets.push(DatasetInfo::new("train", &args.data, &data));
    let test = match &args.test_data {
        Some(uri) => {
            let d = load_source(uri).tag(Category::Data)?;
            mf.manifest.datasets.push(DatasetInfo::new("test", uri, &d));
            Some(d)
        }
        None => None,
    };

    let started = Instant::now();
    let params = search::retrain_with_policies(&data, set.as_ref(), &cfg).tag(Category::Other)?;
    let train_ms = started.elapsed().as_millis() as u64;
    let checkpoint = mf.path("model.faam");
    params.save(&checkpoint).tag(Category::Other)?;
    mf.output("model.faam");
    let report = RetrainReport {
        checkpoint,
        param_hash: params.param_hash(),
        pool_size: set.as_ref().map_or(0, |s| s.sub_policy_pool().len()),
        train: model::evaluate(&params, data.images()).tag(Category::Data)?,
        test: test.map(|t| model::evaluate(&params, t.images())).transpose().tag(Category::Data)?,
    };
    mf.manifest.timings = json!({"train_ms": train_ms});
    mf.manifest.summary = serde_json::to_value(&report).map_err(Error::from).tag(Category::Other)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    /// Sub-policies applied as `T(D)`; 0 for the plain dataset.
    pub pool_size: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} images{}: loss {:.4}, accuracy {:.4}",
            self.metrics.count,
            if self.pool_size > 0 {
                format!(" (T(D) over {} sub-policies)", self.pool_size)
            } else {
                String::new()
            },
            self.metrics.loss,
            self.metrics.accuracy
        )
    }
}

/// `eval`: loss and accuracy of a checkpoint on a dataset or on `T(D)`.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let mut mf = ManifestWriter::new("eval", &args.out)?;
    let result = run_eval(args, &mut mf);
    mf.finish(result)
}

fn run_eval(args: &EvalArgs, mf: &mut ManifestWriter) -> CliResult<EvalReport> {
    mf.manifest.config = json!({"checkpoint": args.checkpoint, "policies": args.policies});
    mf.manifest.seeds = json!({"master": args.seed});
    let params = ModelParams::load(&args.checkpoint).tag(Category::Data)?;
    let data = load_source(&args.data).tag(Category::Data)?;
    mf.manifest.datasets.push(DatasetInfo::new("eval", &args.data, &data));
    let report = match &args.policies {
        Some(p) => {
            let set = PolicySet::load(p).tag(Category::Data)?;
            let policy = Policy::new(set.sub_policy_pool()).tag(Category::Data)?;
            let stream = rng::stream(args.seed, &[tag::EVALUATE]);
            EvalReport {
                metrics: search::evaluate_policy(&params, &policy, data.images(), stream).tag(Category::Data)?,
                pool_size: policy.sub_policies.len(),
            }
        }
        None => EvalReport {
            metrics: model::evaluate(&params, data.images()).tag(Category::Data)?,
            pool_size: 0,
        },
    };
    mf.manifest.summary = serde_json::to_value(&report).map_err(Error::from).tag(Category::Other)?;
    Ok(report)
}

/// Outcome of a two-operation sub-policy, by which operations fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Branch {
    Both,
    FirstOnly,
    SecondOnly,
    Neither,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Both, Branch::FirstOnly, Branch::SecondOnly, Branch::Neither];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Both => "both",
            Branch::FirstOnly => "first-only",
            Branch::SecondOnly => "second-only",
            Branch::Neither => "neither",
        }
    }

    fn of(fired: &[bool]) -> Branch {
        match (fired[0], fired[1]) {
            (true, true) => Branch::Both,
            (true, false) => Branch::FirstOnly,
            (false, true) => Branch::SecondOnly,
            (false, false) => Branch::Neither,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ApplyReport {
    pub draws: usize,
    /// Counts in [`Branch::ALL`] order.
    pub counts: [usize; 4],
}

impl ApplyReport {
    pub fn frequency(&self, b: Branch) -> f64 {
        self.counts[b as usize] as f64 / self.draws as f64
    }
}

impl fmt::Display for ApplyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} draws", self.draws)?;
        for b in Branch::ALL {
            writeln!(f, "{:>12}: {:>7} ({:.4})", b.name(), self.counts[b as usize], self.frequency(b))?;
        }
        Ok(())
    }
}

/// Applies a two-operation sub-policy `draws` times, cycling over `data`,
/// and returns the branch counts plus the first `keep` outputs.
pub fn apply_branches(
    data: &Dataset,
    sub_policy: &SubPolicy,
    draws: usize,
    keep: usize,
    seed: u64,
) -> Result<(ApplyReport, Vec<crate::imageops::Image>)> {
    if sub_policy.ops().len() != 2 {
        return Err(Error::Usage(format!(
            "branch frequencies need a two-operation sub-policy, got {}",
            sub_policy.ops().len()
        )));
    }
    if draws == 0 {
        return Err(Error::Usage("draws must be at least 1".into()));
    }
    let mut s = rng::stream(seed, &[tag::AUGMENT]);
    let mut counts = [0usize; 4];
    let mut kept = Vec::with_capacity(keep.min(draws));
    let images = data.images();
    for d in 0..draws {
        let i = d % images.len();
        let partners = Partners::new(images, Some(i));
        let (img, fired) = apply_sub_policy_traced(&images[i], sub_policy, &mut s, Some(&partners))?;
        counts[Branch::of(&fired) as usize] += 1;
        if kept.len() < keep {
            kept.push(img);
        }
    }
    Ok((ApplyReport { draws, counts }, kept))
}

/// `apply`: writes `branches.csv` and the first `--dump` outputs as a raw-dir
/// under `fixtures/`.
pub fn cmd_apply(args: &ApplyArgs) -> CliResult<ApplyReport> {
    let mut mf = ManifestWriter::new("apply", &args.out)?;
    let result = run_apply(args, &mut mf);
    mf.finish(result)
}

fn run_apply(args: &ApplyArgs, mf: &mut ManifestWriter) -> CliResult<ApplyReport> {
    mf.manifest.config = json!({"sub_policy": args.sub_policy, "draws": args.draws, "dump": args.dump});
    mf.manifest.seeds = json!({"master": args.seed});
    let sub_policy: SubPolicy = args.sub_policy.parse().tag(Category::Config)?;
    let data = load_source(&args.data).tag(Category::Data)?;
    mf.manifest.datasets.push(DatasetInfo::new("input", &args.data, &data));
    let (report, kept) = apply_branches(&data, &sub_policy, args.draws, args.dump, args.seed).tag(Category::Config)?;

    let path = mf.path("branches.csv");
    let mut w = csv_writer(&path).tag(Category::Other)?;
    w.write_record(["branch", "count", "frequency"])
        .map_err(|e| csv_error(&path, e))
        .tag(Category::Other)?;
    for b in Branch::ALL {
        w.write_record([
            b.name().to_string(),
            report.counts[b as usize].to_string(),
            report.frequency(b).to_string(),
        ])
        .map_err(|e| csv_error(&path, e))
        .tag(Category::Other)?;
    }
    w.flush().map_err(|e| Error::io(&path, e)).tag(Category::Other)?;
    mf.output("branches.csv");

    if !kept.is_empty() {
        let fixtures = Dataset::new("apply", kept, data.class_count()).tag(Category::Other)?;
        crate::data::save_raw_dir(&fixtures, &mf.path("fixtures")).tag(Category::Other)?;
        mf.output("fixtures");
    }
    mf.manifest.summary = json!({
        "draws": report.draws,
        "branches": Branch::ALL.iter().map(|&b| json!({"branch": b.name(), "count": report.counts[b as usize], "frequency": report.frequency(b)})).collect::<Vec<_>>(),
    });
    Ok(report)
}

/// Sub-policies of `set` ordered by the loss of their policy (best first,
/// ties in file order), keeping each policy's sub-policies in order.
pub fn ranked_pool(set: &PolicySet) -> Vec<SubPolicy> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.policies[a].loss.total_cmp(&set.policies[b].loss));
    order
        .into_iter()
        .flat_map(|i| set.policies[i].sub_policies.iter().cloned())
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub pool_size: usize,
    pub test_errors: Vec<f64>,
    pub median_error: f64,
    pub mean_error: f64,
    /// Standard error of the mean.
    pub std_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>9} {:>12} {:>10} {:>10}", "pool", "median_err", "mean_err", "std_err")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>9} {:>12.4} {:>10.4} {:>10.4}",
                r.pool_size, r.median_error, r.mean_error, r.std_error
            )?;
        }
        Ok(())
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn std_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Retrains on `train` with the best `size` sub-policies of `pool` for every
/// size and every seed in `0..seeds`, and reports test error per size.
/// Sizes of 0 or above the pool length mean the whole pool; repeated sizes are dropped.
pub fn sweep_subpolicies(
    train: &Dataset,
    test: &Dataset,
    pool: &[SubPolicy],
    sizes: &[usize],
    seeds: usize,
    cfg: &TrainConfig,
) -> Result<SweepReport> {
    if pool.is_empty() || seeds == 0 {
        return Err(Error::Usage("sweep needs a non-empty pool and at least one seed".into()));
    }
    let mut resolved: Vec<usize> = Vec::new();
    for &s in sizes {
        let s = if s == 0 || s > pool.len() { pool.len() } else { s };
        if !resolved.contains(&s) {
            resolved.push(s);
        }
    }
    let mut rows = Vec::with_capacity(resolved.len());
    for size in resolved {
        let set = PolicySet::from_sub_policies(pool[..size].to_vec())?;
        let mut errors = Vec::with_capacity(seeds);
        for r in 0..seeds {
            let run_cfg = TrainConfig {
                seed: rng::derive_seed(cfg.seed, &[tag::RETRAIN, r as u64]),
                ..cfg.clone()
            };
            let params = search::retrain_with_policies(train, Some(&set), &run_cfg)?;
            errors.push(1.0 - model::evaluate(&params, test.images())?.accuracy);
        }
        rows.push(SweepRow {
            pool_size: size,
            median_error: median(&errors),
            mean_error: mean(errors.iter().copied()),
            std_error: std_error(&errors),
            test_errors: errors,
        });
    }
    Ok(SweepReport { rows })
}

/// `sweep-subpolicies`: writes `sweep.csv` with one row per pool size.
pub fn cmd_sweep_subpolicies(args: &SweepArgs) -> CliResult<SweepReport> {
    let mut mf = ManifestWriter::new("sweep-subpolicies", &args.out)?;
    let result = run_sweep(args, &mut mf);
    mf.finish(result)
}

fn run_sweep(args: &SweepArgs, mf: &mut ManifestWriter) -> CliResult<SweepReport> {
    let cfg = train_config(args.config.as_deref(), Some(args.seed), args.epochs, args.lr).tag(Category::Config)?;
    mf.manifest.config = json!({"train": cfg, "sizes": args.sizes, "seeds": args.seeds, "policies": args.policies});
    mf.manifest.seeds = json!({"master": args.seed});
    let set = PolicySet::load(&args.policies).tag(Category::Data)?;
    let train = load_source(&args.data).tag(Category::Data)?;
    let test = load_source(&args.test_data).tag(Category::Data)?;
    mf.manifest.datasets.push(DatasetInfo::new("train", &args.data, &train));
    mf.manifest.datasets.push(DatasetInfo::new("test", &args.test_data, &test));

    let report = sweep_subpolicies(&train, &test, &ranked_pool(&set), &args.sizes, args.seeds, &cfg).tag(Category::Config)?;

    let path = mf.path("sweep.csv");
    let mut w = csv_writer(&path).tag(Category::Other)?;
    let mut rows = vec![vec![
        "pool_size".to_string(),
        "median_test_error".into(),
        "mean_test_error".into(),
        "std_error".into(),
        "test_errors".into(),
    ]];
    for r in &report.rows {
        let runs: Vec<String> = r.test_errors.iter().map(|e| e.to_string()).collect();
        rows.push(vec![
            r.pool_size.to_string(),
            r.median_error.to_string(),
            r.mean_error.to_string(),
            r.std_error.to_string(),
            runs.join(","),
        ]);
    }
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(&path, e)).tag(Category::Other)?;
    }
    w.flush().map_err(|e| Error::io(&path, e)).tag(Category::Other)?;
    mf.output("sweep.csv");
    mf.manifest.summary = serde_json::to_value(&report).map_err(Error::from).tag(Category::Other)?;
    Ok(report)
}

/// Toy objectives on `[0, 1]` with their minimizer at 0.7.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Objective {
    /// `(x − 0.7)²`
    Quadratic,
    /// `|x − 0.7|` rounded down to a multiple of 1e-4; zero on `(0.6999, 0.7001)`.
    Step,
}

impl Objective {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Objective::Quadratic => (x - 0.7).powi(2),
            Objective::Step => ((x - 0.7).abs() * 1e4).floor() / 1e4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Quadratic => "quadratic",
            Objective::Step => "step",
        }
    }

    /// Minimizer over the grid `0, 0.001, …, 1` (first one on ties).
    pub fn grid_optimum(self) -> f64 {
        (0..=1000)
            .map(|i| f64::from(i) * 0.001)
            .fold((f64::NAN, f64::INFINITY), |(bx, bf), x| {
                let v = self.eval(x);
                if v < bf {
                    (x, v)
                } else {
                    (bx, bf)
                }
            })
            .0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchSuite {
    pub objective: Objective,
    pub runs: usize,
    pub trials: usize,
    pub grid_optimum: f64,
    /// Runs whose best point lies within 0.05 of the grid optimum.
    pub within_tolerance: usize,
    /// Runs where the optimizer's best value is strictly below random search's.
    pub wins: usize,
    pub ties: usize,
    pub mean_best_tpe: f64,
    pub mean_best_random: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub suites: Vec<BenchSuite>,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(
                f,
                "{}: {}/{} runs within 0.05 of {:.3}; beats random in {} (ties {}); mean best {:.3e} vs random {:.3e}",
                s.objective.name(),
                s.within_tolerance,
                s.runs,
                s.grid_optimum,
                s.wins,
                s.ties,
                s.mean_best_tpe,
                s.mean_best_random
            )?;
        }
        Ok(())
    }
}

/// Best `(x, f(x))` of `trials` optimizer steps on a one-dimensional objective.
pub fn tpe_best(objective: Objective, trials: usize, seed: u64) -> Result<(f64, f64)> {
    let mut h = TrialHistory::new(SearchSpace::continuous(1)?, TpeConfig::default())?;
    let mut s = rng::stream(seed, &[tag::SUGGEST]);
    let mut best = (f64::NAN, f64::INFINITY);
    for _ in 0..trials {
        let (id, x) = h.ask(&mut s)?;
        let v = objective.eval(x[0]);
        h.tell(id, v)?;
        if v < best.1 {
            best = (x[0], v);
        }
    }
    Ok(best)
}

/// Best `(x, f(x))` of `trials` uniform draws.
pub fn random_best(objective: Objective, trials: usize, seed: u64) -> (f64, f64) {
    let mut s = rng::stream(seed, &[tag::RANDOM_POLICY]);
    let mut best = (f64::NAN, f64::INFINITY);
    for _ in 0..trials {
        let x: f64 = s.random();
        let v = objective.eval(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    best
}

pub fn bench_tpe(runs: usize, trials: usize, seed: u64) -> Result<BenchReport> {
    let mut suites = Vec::new();
    for objective in [Objective::Quadratic, Objective::Step] {
        let opt = objective.grid_optimum();
        let mut suite = BenchSuite {
            objective,
            runs,
            trials,
            grid_optimum: opt,
            within_tolerance: 0,
            wins: 0,
            ties: 0,
            mean_best_tpe: 0.0,
            mean_best_random: 0.0,
        };
        for r in 0..runs {
            let run_seed = rng::derive_seed(seed, &[r as u64]);
            let (x, v) = tpe_best(objective, trials, run_seed)?;
            let (_, rv) = random_best(objective, trials, run_seed);
            suite.within_tolerance += usize::from((x - opt).abs() <= 0.05);
            suite.wins += usize::from(v < rv);
            suite.ties += usize::from(v == rv);
            suite.mean_best_tpe += v / runs as f64;
            suite.mean_best_random += rv / runs as f64;
        }
        suites.push(suite);
    }
    Ok(BenchReport { suites })
}

/// `bench-tpe`: writes `bench_tpe.csv`.
pub fn cmd_bench_tpe(args: &BenchArgs) -> CliResult<BenchReport> {
    let mut mf = ManifestWriter::new("bench-tpe", &args.out)?;
    let result = run_bench(args, &mut mf);
    mf.finish(result)
}

fn run_bench(args: &BenchArgs, mf: &mut ManifestWriter) -> CliResult<BenchReport> {
    mf.manifest.config = json!({"runs": args.runs, "trials": args.trials, "tpe": TpeConfig::default()});
    mf.manifest.seeds = json!({"master": args.seed});
    let report = bench_tpe(args.runs, args.trials, args.seed).tag(Category::Config)?;
    let path = mf.path("bench_tpe.csv");
    let mut w = csv_writer(&path).tag(Category::Other)?;
    let header = [
        "objective",
        "runs",
        "trials",
        "grid_optimum",
        "within_0.05",
        "wins_vs_random",
        "ties",
        "mean_best_tpe",
        "mean_best_random",
    ];
    w.write_record(header).map_err(|e| csv_error(&path, e)).tag(Category::Other)?;
    for s in &report.suites {
        w.write_record([
            s.objective.name().to_string(),
            s.runs.to_string(),
            s.trials.to_string(),
            s.grid_optimum.to_string(),
            s.within_tolerance.to_string(),
            s.wins.to_string(),
            s.ties.to_string(),
            s.mean_best_tpe.to_string(),
            s.mean_best_random.to_string(),
        ])
        .map_err(|e| csv_error(&path, e))
        .tag(Category::Other)?;
    }
    w.flush().map_err(|e| Error::io(&path, e)).tag(Category::Other)?;
    mf.output("bench_tpe.csv");
    mf.manifest.summary = serde_json::to_value(&report).map_err(Error::from).tag(Category::Other)?;
    Ok(report)
}

/// Runs one parsed command and prints its report. Returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let printed = match &cli.command {
        Command::Search(a) => cmd_search(a).map(|r| r.to_string()),
        Command::Retrain(a) => cmd_retrain(a).map(|r| r.to_string()),
        Command::Eval(a) => cmd_eval(a).map(|r| r.to_string()),
        Command::Apply(a) => cmd_apply(a).map(|r| r.to_string()),
        Command::SweepSubpolicies(a) => cmd_sweep_subpolicies(a).map(|r| r.to_string()),
        Command::BenchTpe(a) => cmd_bench_tpe(a).map(|r| r.to_string()),
    };
    match printed {
        Ok(text) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("faa: {e}");
            e.exit_code()
        }
    }
}
