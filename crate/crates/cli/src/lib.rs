//! Batch runner behind the `pica` binary: training runs, parameter counts,
//! bound-verification campaigns, and metrics export.
//!
//! Everything that parses external input (JSON configs, `KEY=VALUE`
//! overrides, metrics lines) lives here so it can be exercised directly by
//! tests and fuzz targets.

use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use pica_core::optim::Hyper;
use pica_core::task::{Perturbation, SyntheticTask, TaskSpec};
use pica_core::theory::campaign::{self, CampaignKind, CampaignParams, CampaignSummary, TrialRecord};
use pica_core::train::{self, Adapter, EvalPoint, Method};
use pica_core::{adapter_io, Error};

/// Largest accepted layer width.
pub const MAX_WIDTH: usize = 4096;
/// Largest accepted number of layers.
pub const MAX_LAYERS: usize = 256;
/// Largest accepted batch size.
pub const MAX_BATCH: usize = 1 << 16;
/// Deepest accepted override key, in dot-separated segments.
pub const MAX_KEY_DEPTH: usize = 32;
/// Environment variable capping the worker threads of `verify`.
pub const THREADS_ENV: &str = "PICA_VERIFY_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{violations} of {trials} trials violated a bound; replay with --trials 1 --seed {seed}")]
    Violation { violations: usize, trials: usize, seed: u64 },

    #[error("non-finite loss at step {step}; last good step {last_good_step}")]
    Diverged { step: u64, last_good_step: u64 },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Core(Error),
}

impl CliError {
    /// Process exit status: 1 bound violation, 2 bad input, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Violation { .. } => 1,
            CliError::Diverged { .. } => 3,
            CliError::Config(_) | CliError::Io { .. } | CliError::Core(_) => 2,
        }
    }

    fn config(field: &str, msg: impl std::fmt::Display) -> Self {
        CliError::Config(format!("{field}: {msg}"))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { step, last_good_step } => CliError::Diverged { step, last_good_step },
            Error::Io { path, source } => CliError::Io { path, source },
            other => CliError::Core(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Adam hyperparameters; the rank lives on [`TrainConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        let h = Hyper::new(1, 1e-2);
        Self {
            eta: h.eta,
            beta1: h.beta1,
            beta2: h.beta2,
            eps_adam: h.eps_adam,
        }
    }
}

/// One training run. Missing fields take the [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Required for every method except `full_ft`.
    pub rank: Option<usize>,
    pub hyper: HyperConfig,
    /// Model dims, group layout, and teacher perturbation.
    pub task: TaskSpec,
    /// Seeds task generation and any random adapter initialization.
    pub seed: u64,
    pub steps: u64,
    /// Evaluate every this many steps; 0 evaluates only at the start and end.
    pub eval_interval: u64,
    /// Metrics file; standard output when absent.
    pub out: Option<PathBuf>,
    /// Final adapter checkpoint for PiCa methods; defaults to `out` with a
    /// `.pica` extension.
    pub checkpoint: Option<PathBuf>,
    /// Store the projection bases in the checkpoint.
    pub include_projectors: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Pica,
            rank: Some(4),
            hyper: HyperConfig::default(),
            task: TaskSpec::default_toy(Perturbation::InColumnSpace { rank: 4, scale: 0.5 }),
            seed: 0,
            steps: 300,
            eval_interval: 25,
            out: None,
            checkpoint: None,
            include_projectors: false,
        }
    }
}

impl TrainConfig {
    /// Checks every field before any work is done; messages name the field.
    pub fn validate(&self) -> Result<(), CliError> {
        let spec = &self.task;
        if spec.dims.len() > MAX_LAYERS + 1 {
            return Err(CliError::config("task.dims", format!("more than {MAX_LAYERS} layers")));
        }
        if let Some(&w) = spec.dims.iter().find(|&&w| w > MAX_WIDTH) {
            return Err(CliError::config("task.dims", format!("width {w} exceeds {MAX_WIDTH}")));
        }
        if spec.batch_size > MAX_BATCH {
            return Err(CliError::config("task.batch_size", format!("exceeds {MAX_BATCH}")));
        }
        spec.validate().map_err(|e| CliError::config("task", e))?;
        self.hyper().validate().map_err(|e| CliError::config("hyper", e))?;
        if self.method.needs_rank() {
            let max = (0..spec.groups.len())
                .map(|l| spec.dims[l].min(spec.dims[l + 1]))
                .min()
                .unwrap_or(0);
            match self.rank {
                None => return Err(CliError::config("rank", format!("required for method {}", self.method))),
                Some(r) if r == 0 || r > max => {
                    return Err(CliError::config("rank", format!("{r} outside 1..={max}")));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            rank: self.rank.unwrap_or(0),
            eta: self.hyper.eta,
            beta1: self.hyper.beta1,
            beta2: self.hyper.beta2,
            eps_adam: self.hyper.eps_adam,
        }
    }

    /// Where the final checkpoint goes, if anywhere.
    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        if !self.method.is_pica() {
            return None;
        }
        self.checkpoint
            .clone()
            .or_else(|| self.out.as_ref().map(|p| p.with_extension("pica")))
    }
}

/// Applies one `KEY=VALUE` override to a JSON document.
///
/// `KEY` is a dot-separated path; numeric segments index arrays and missing
/// object keys are created. `VALUE` is parsed as JSON and taken as a plain
/// string when that fails, so `method=lora` and `hyper.eta=0.01` both work.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} has an empty segment")));
    }
    if segments.len() > MAX_KEY_DEPTH {
        return Err(CliError::Config(format!("override key {key:?} is deeper than {MAX_KEY_DEPTH}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut cur = doc;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let here = segments[..=i].join(".");
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let len = items.len();
                let slot = seg
                    .parse::<usize>()
                    .ok()
                    .and_then(|idx| items.get_mut(idx))
                    .ok_or_else(|| CliError::config(&here, format!("not an index into an array of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                let parent = segments[..i].join(".");
                return Err(CliError::config(&parent, "is not an object or array"));
            }
        };
    }
    unreachable!("the last segment returns")
}

fn parse_document(text: &str) -> Result<Value, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<(), CliError> {
    overrides.iter().try_for_each(|o| apply_override(doc, o))
}

/// Builds a validated training config from an optional JSON document and
/// overrides. Without a document the defaults are the starting point.
pub fn resolve_train_config(text: Option<&str>, overrides: &[String]) -> Result<TrainConfig, CliError> {
    let mut doc = match text {
        Some(t) => parse_document(t)?,
        None => serde_json::to_value(TrainConfig::default()).expect("default config serializes"),
    };
    apply_overrides(&mut doc, overrides)?;
    let config: TrainConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Builds validated campaign parameters. The document, if any, may name the
/// campaign in its `"campaign"` field; otherwise `kind` must.
pub fn resolve_campaign(
    kind: Option<CampaignKind>,
    text: Option<&str>,
    overrides: &[String],
) -> Result<CampaignParams, CliError> {
    let mut doc = match text {
        Some(t) => parse_document(t)?,
        None => {
            let kind = kind.ok_or_else(|| CliError::config("campaign", "required without --config"))?;
            serde_json::to_value(CampaignParams::default_for(kind)).expect("default params serialize")
        }
    };
    if let (Some(kind), Value::Object(map)) = (kind, &mut doc) {
        match map.get("campaign") {
            None => {
                map.insert("campaign".into(), Value::String(kind.as_str().into()));
            }
            Some(Value::String(s)) if s == kind.as_str() => {}
            Some(other) => {
                return Err(CliError::config("campaign", format!("config says {other}, flag says {kind}")));
            }
        }
    }
    apply_overrides(&mut doc, overrides)?;
    let params: CampaignParams = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    params.validate().map_err(|e| CliError::config("params", e))?;
    Ok(params)
}

/// One line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    /// `Σ_l ‖W_eff − W*‖_F` over layers.
    pub distance: f64,
    pub params: usize,
    pub wall_ms: f64,
    pub seed: u64,
    pub method: Method,
    pub rank: Option<usize>,
    /// The resolved config; present on the first record of each run only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
}

pub fn parse_metrics_line(line: &str) -> Result<MetricsRecord, serde_json::Error> {
    serde_json::from_str(line)
}

/// Final state of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: EvalPoint,
    pub params: usize,
    pub records: usize,
    pub checkpoint: Option<PathBuf>,
}

/// Runs training and writes one metrics line per evaluation to `sink`,
/// flushing after each so a partial file is always line-complete.
/// `sink_name` labels write errors.
pub fn train_into(config: &TrainConfig, sink: &mut dyn Write, sink_name: &Path) -> Result<TrainOutcome, CliError> {
    config.validate()?;
    let started = Instant::now();
    let task = SyntheticTask::generate(config.seed, config.task.clone())?;
    let hyper = config.hyper();
    let mut adapter = Adapter::new(config.method, &task.model, &hyper, config.seed)?;
    let params = adapter.trainable_params(&task.model);

    let mut records = 0usize;
    let mut emit = |p: &EvalPoint| -> pica_core::Result<()> {
        let record = MetricsRecord {
            step: p.step,
            loss: p.loss,
            distance: p.distance,
            params,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            seed: config.seed,
            method: config.method,
            rank: config.rank,
            config: (records == 0).then(|| config.clone()),
        };
        let mut line = serde_json::to_vec(&record).expect("metrics serialize");
        line.push(b'\n');
        records += 1;
        sink.write_all(&line).and_then(|_| sink.flush()).map_err(|source| Error::Io {
            path: sink_name.to_path_buf(),
            source,
        })
    };
    let last = train::train(&task, &mut adapter, &hyper, config.steps, config.eval_interval, &mut emit)?;

    let checkpoint = match (config.checkpoint_path(), adapter.as_pica()) {
        (Some(path), Some(state)) => {
            adapter_io::save(state, &task.model, &path, config.include_projectors)?;
            Some(path)
        }
        _ => None,
    };
    Ok(TrainOutcome {
        last,
        params,
        records,
        checkpoint,
    })
}

/// Runs training with metrics going to `config.out`, or standard output.
pub fn run_train(config: &TrainConfig) -> Result<TrainOutcome, CliError> {
    match &config.out {
        Some(path) => {
            let mut file = BufWriter::new(File::create(path).map_err(io_err(path))?);
            train_into(config, &mut file, path)
        }
        None => train_into(config, &mut io::stdout().lock(), Path::new("<stdout>")),
    }
}

/// Worker-thread cap from [`THREADS_ENV`], if set.
pub fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::config(THREADS_ENV, format!("{v:?} is not a positive integer"))),
        },
    }
}

/// Runs a campaign, optionally on a pool of at most `threads` workers.
pub fn run_verify(
    params: &CampaignParams,
    trials: usize,
    seed: u64,
    threads: Option<usize>,
) -> Result<(Vec<TrialRecord>, CampaignSummary), CliError> {
    if trials == 0 {
        return Err(CliError::config("trials", "must be at least 1"));
    }
    let run = || campaign::run_campaign(params, trials, seed);
    let records = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::config(THREADS_ENV, e))?
            .install(run)?,
        None => run()?,
    };
    let summary = campaign::summarize(params.kind(), &records);
    Ok((records, summary))
}

/// Writes campaign records as NDJSON, one trial per line.
pub fn write_records(records: &[TrialRecord], sink: &mut dyn Write, sink_name: &Path) -> Result<(), CliError> {
    for r in records {
        serde_json::to_writer(&mut *sink, r).map_err(|e| CliError::Io {
            path: sink_name.to_path_buf(),
            source: e.into(),
        })?;
        sink.write_all(b"\n").map_err(io_err(sink_name))?;
    }
    sink.flush().map_err(io_err(sink_name))
}

pub fn format_summary(s: &CampaignSummary) -> String {
    let worst = match s.worst_seed {
        Some(seed) => format!("worst margin {:.3e} (seed {seed})", s.worst_margin),
        None => "no trials".to_string(),
    };
    format!(
        "{}: {} trials, {} passed, {} violations, {worst}",
        s.campaign, s.trials, s.passed, s.violations
    )
}

/// Turns a summary into the exit contract: `Ok` iff every bound held.
pub fn check_summary(s: &CampaignSummary) -> Result<(), CliError> {
    match s.first_failing_seed {
        None => Ok(()),
        Some(seed) => Err(CliError::Violation {
            violations: s.violations,
            trials: s.trials,
            seed,
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub method: Method,
    pub rank: Option<usize>,
    pub params: usize,
}

/// Trainable parameter count of every method on the config's model.
pub fn count_params(config: &TrainConfig) -> Result<Vec<ParamRow>, CliError> {
    config.validate()?;
    let rank = config
        .rank
        .ok_or_else(|| CliError::config("rank", "required to count low-rank methods"))?;
    let task = SyntheticTask::generate(config.seed, config.task.clone())?;
    Ok(Method::ALL
        .into_iter()
        .map(|method| ParamRow {
            method,
            rank: method.needs_rank().then_some(rank),
            params: method.param_count(&task.model, rank),
        })
        .collect())
}

pub fn format_param_table(rows: &[ParamRow]) -> String {
    let mut out = format!("{:<16} {:>6} {:>12}\n", "method", "rank", "params");
    for r in rows {
        let rank = r.rank.map_or("-".to_string(), |k| k.to_string());
        out.push_str(&format!("{:<16} {:>6} {:>12}\n", r.method.as_str(), rank, r.params));
    }
    out
}

#[derive(Serialize)]
struct CsvRow {
    step: u64,
    loss: f64,
    distance: f64,
    params: usize,
    wall_ms: f64,
    seed: u64,
    method: &'static str,
    rank: Option<usize>,
}

/// Converts a metrics stream to CSV line by line; returns the row count.
///
/// A record carrying a config starts a new run; within a run steps must
/// increase strictly.
pub fn export_csv(input: impl BufRead, output: impl Write) -> Result<usize, CliError> {
    let mut writer = csv::Writer::from_writer(output);
    let mut last_step: Option<u64> = None;
    let mut rows = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(io_err(Path::new("<input>")))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_metrics_line(&line).map_err(|e| CliError::config(&format!("line {}", i + 1), e))?;
        if rec.config.is_some() {
            last_step = None;
        }
        if last_step.is_some_and(|s| rec.step <= s) {
            return Err(CliError::config(
                &format!("line {}", i + 1),
                format!("step {} does not follow step {}", rec.step, last_step.unwrap_or(0)),
            ));
        }
        last_step = Some(rec.step);
        writer
            .serialize(CsvRow {
                step: rec.step,
                loss: rec.loss,
                distance: rec.distance,
                params: rec.params,
                wall_ms: rec.wall_ms,
                seed: rec.seed,
                method: rec.method.as_str(),
                rank: rec.rank,
            })
            .map_err(|e| CliError::Io {
                path: PathBuf::from("<output>"),
                source: e.into(),
            })?;
        rows += 1;
    }
    writer.flush().map_err(io_err(Path::new("<output>")))?;
    Ok(rows)
}

/// Reads a file named on the command line.
pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::config(&path.display().to_string(), e))
}
