//! Multi-stage orchestration over file artifacts.
//!
//! A pipeline is a chain of stages, each turning one artifact kind into a later
//! one. Documents run in parallel on a bounded pool and each stage caps the
//! number of its own invocations in flight. A failing document is reported and
//! the rest carry on.
//!
//! External stages are shell command templates with `{input}`, `{output}` and
//! (recognition only) `{batch}` placeholders. A batched recognition stage is
//! called once per batch of words: `{batch}` names a JSON array of word records
//! and the command writes the same records, with text filled in, to `{output}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    load_document, nfc, to_canonical_json, ArtifactKind, DocumentAnnotation, DocumentRecord, StageArtifact,
    WordRecord,
};
use crate::reconstruct::{build_intermediate, emit_html, write_intermediate};

pub const DEFAULT_WORKERS: usize = 2;
pub const DEFAULT_BATCH_SIZE: usize = 160;
pub const DEFAULT_TIMEOUT_SECS: u64 = 300;
pub const WORKERS_ENV: &str = "DOCREBENCH_WORKERS";

const POLL_INTERVAL: Duration = Duration::from_millis(5);

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    ExternalCommand,
    /// Copies its input to its output unchanged.
    Passthrough,
    /// Built-in HTML reconstruction of a recognized document.
    Reconstruct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub kind: StageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    pub input_kind: ArtifactKind,
    pub output_kind: ArtifactKind,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_workers() -> usize {
    DEFAULT_WORKERS
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}

impl StageConfig {
    pub fn new(name: &str, kind: StageKind, input_kind: ArtifactKind, output_kind: ArtifactKind) -> Self {
        Self {
            name: name.into(),
            kind,
            command: None,
            input_kind,
            output_kind,
            workers: DEFAULT_WORKERS,
            batch_size: DEFAULT_BATCH_SIZE,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        }
    }

    /// Whether the stage is invoked once per word batch.
    pub fn is_batched(&self) -> bool {
        self.output_kind == ArtifactKind::Recognized
            && self.kind == StageKind::ExternalCommand
            && self.command.as_deref().is_some_and(|c| c.contains("{batch}"))
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(format!("stage `{}`: {m}", self.name)));
        if self.output_kind <= self.input_kind {
            return err(format!("output kind {} does not follow input kind {}", self.output_kind, self.input_kind));
        }
        if self.workers == 0 || self.batch_size == 0 || self.timeout_secs == 0 {
            return err("workers, batch_size and timeout_secs must be positive".into());
        }
        match (self.kind, &self.command) {
            (StageKind::ExternalCommand, None) => return err("external_command needs a command".into()),
            (StageKind::ExternalCommand, Some(c)) if c.contains("{batch}") && self.output_kind != ArtifactKind::Recognized => {
                return err("only the recognition stage may use {batch}".into())
            }
            (StageKind::Reconstruct, _) if self.input_kind != ArtifactKind::Recognized || self.output_kind != ArtifactKind::Html => {
                return err("reconstruct maps recognized to html".into())
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Sys1,
    Sys2,
    Sys3,
    Custom,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Sys1 => "sys1",
            Preset::Sys2 => "sys2",
            Preset::Sys3 => "sys3",
            Preset::Custom => "custom",
        }
    }

    /// Column label used in timing tables.
    pub fn label(self) -> &'static str {
        match self {
            Preset::Sys1 => "Sys-1",
            Preset::Sys2 => "Sys-2",
            Preset::Sys3 => "Sys-3",
            Preset::Custom => "Custom",
        }
    }

    /// Stage names and output kinds of a preset chain, in order.
    pub fn chain(self) -> Option<Vec<(&'static str, ArtifactKind)>> {
        use ArtifactKind::*;
        let pre: &[(&str, ArtifactKind)] = match self {
            Preset::Sys1 => &[],
            Preset::Sys2 => &[("geometric_correction", GeoCorrected)],
            Preset::Sys3 => &[("geometric_correction", GeoCorrected), ("illumination_correction", IllumCorrected)],
            Preset::Custom => return None,
        };
        let post = [
            ("layout", Layout),
            ("line_detection", Lines),
            ("word_detection", Words),
            ("recognition", Recognized),
            ("reconstruction", Html),
        ];
        Some(pre.iter().copied().chain(post).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub stages: Vec<StageConfig>,
    pub work_dir: PathBuf,
}

impl PipelineConfig {
    /// The preset chain with passthrough stages and built-in reconstruction.
    pub fn from_preset(preset: Preset, work_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let chain = preset
            .chain()
            .ok_or_else(|| PipelineError::Config("the custom preset needs explicit stages".into()))?;
        let mut input = ArtifactKind::RawImage;
        let stages = chain
            .into_iter()
            .map(|(name, output)| {
                let kind = if output == ArtifactKind::Html {
                    StageKind::Reconstruct
                } else {
                    StageKind::Passthrough
                };
                let s = StageConfig::new(name, kind, input, output);
                input = output;
                s
            })
            .collect();
        Ok(Self {
            preset,
            stages,
            work_dir: work_dir.into(),
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::Config("no stages".into()));
        }
        let mut names = HashSet::new();
        for s in &self.stages {
            s.validate()?;
            if !names.insert(s.name.as_str()) {
                return Err(PipelineError::Config(format!("duplicate stage `{}`", s.name)));
            }
        }
        for w in self.stages.windows(2) {
            if w[0].output_kind != w[1].input_kind {
                return Err(PipelineError::Config(format!(
                    "stage `{}` produces {} but `{}` expects {}",
                    w[0].name, w[0].output_kind, w[1].name, w[1].input_kind
                )));
            }
        }
        if let Some(chain) = self.preset.chain() {
            let got: Vec<ArtifactKind> = self.stages.iter().map(|s| s.output_kind).collect();
            let want: Vec<ArtifactKind> = chain.iter().map(|(_, k)| *k).collect();
            if got != want || self.stages[0].input_kind != ArtifactKind::RawImage {
                return Err(PipelineError::Config(format!(
                    "preset {} requires stages producing {:?}",
                    self.preset.as_str(),
                    want.iter().map(|k| k.as_str()).collect::<Vec<_>>()
                )));
            }
        }
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Loads a TOML (by extension) or JSON config file. Relative `work_dir`
    /// values resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let file: ConfigFile = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        } else {
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de)
                .map_err(|e| PipelineError::Config(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let mut config = file.into_config(base)?;
        config.validate()?;
        config.work_dir = base.join(&config.work_dir);
        Ok(config)
    }
}

/// On-disk pipeline config. Either `stages` is given in full, or the preset
/// chain is used and `commands` turns named stages into external commands.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    preset: Preset,
    #[serde(default = "default_work_dir")]
    work_dir: PathBuf,
    #[serde(default)]
    stages: Option<Vec<StageConfig>>,
    #[serde(default)]
    commands: BTreeMap<String, String>,
    #[serde(default)]
    workers: Option<usize>,
    #[serde(default)]
    batch_size: Option<usize>,
    #[serde(default)]
    timeout_secs: Option<u64>,
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("work")
}

impl ConfigFile {
    fn into_config(self, _base: &Path) -> Result<PipelineConfig, PipelineError> {
        let mut config = match self.stages {
            Some(stages) => PipelineConfig {
                preset: self.preset,
                stages,
                work_dir: self.work_dir,
            },
            None => PipelineConfig::from_preset(self.preset, self.work_dir)?,
        };
        for (name, command) in self.commands {
            let stage = config
                .stages
                .iter_mut()
                .find(|s| s.name == name)
                .ok_or_else(|| PipelineError::Config(format!("commands: no stage named `{name}`")))?;
            stage.kind = StageKind::ExternalCommand;
            stage.command = Some(command);
        }
        for s in &mut config.stages {
            if let Some(w) = self.workers {
                s.workers = w;
            }
            if let Some(b) = self.batch_size {
                s.batch_size = b;
            }
            if let Some(t) = self.timeout_secs {
                s.timeout_secs = t;
            }
        }
        Ok(config)
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage `{stage}` on `{document}`: could not start: {message}")]
    StageSpawn {
        stage: String,
        document: String,
        message: String,
    },
    #[error("stage `{stage}` on `{document}`: {message}")]
    StageProtocol {
        stage: String,
        document: String,
        message: String,
    },
    #[error("stage `{stage}` on `{document}`: timed out after {seconds} s")]
    Timeout {
        stage: String,
        document: String,
        seconds: u64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failure reported by a stage adapter; the orchestrator adds stage and
/// document names.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("{0}")]
    Spawn(String),
    #[error("{0}")]
    Failed(String),
    #[error("timed out after {0} s")]
    Timeout(u64),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Worker pools

/// Splits `items` into contiguous batches of `batch_size`; only the last may be
/// shorter.
pub fn batch_items<T: Clone>(items: &[T], batch_size: usize) -> Vec<Vec<T>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    items.chunks(batch_size).map(<[T]>::to_vec).collect()
}

#[derive(Debug)]
pub struct ParallelError<R, E> {
    /// Lowest failing index.
    pub index: usize,
    pub error: E,
    /// Results of the jobs that finished, by input position.
    pub partial: Vec<Option<R>>,
}

fn run_pool<T, R, E, F>(jobs: &[T], workers: usize, cancel_on_error: bool, f: F) -> Vec<Option<Result<R, E>>>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    let n = jobs.len();
    let next = AtomicUsize::new(0);
    let cancelled = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<R, E>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(n.max(1)) {
            scope.spawn(|| loop {
                if cancelled.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i, &jobs[i]);
                if r.is_err() && cancel_on_error {
                    cancelled.store(true, Ordering::SeqCst);
                }
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap()
}

/// Runs `f` over `jobs` with at most `workers` in flight; results keep input
/// order. The first failure stops dispatch of further jobs.
pub fn parallel_map<T, R, E, F>(jobs: &[T], workers: usize, f: F) -> Result<Vec<R>, ParallelError<R, E>>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    let slots = run_pool(jobs, workers, true, f);
    let mut partial = Vec::with_capacity(slots.len());
    let mut first: Option<(usize, E)> = None;
    for (i, slot) in slots.into_iter().enumerate() {
        match slot {
            Some(Ok(r)) => partial.push(Some(r)),
            Some(Err(e)) => {
                if first.is_none() {
                    first = Some((i, e));
                }
                partial.push(None);
            }
            None => partial.push(None),
        }
    }
    match first {
        None => Ok(partial.into_iter().map(|r| r.expect("every job ran")).collect()),
        Some((index, error)) => Err(ParallelError { index, error, partial }),
    }
}

/// Like [`parallel_map`] but every job runs regardless of failures.
pub fn parallel_map_all<T, R, E, F>(jobs: &[T], workers: usize, f: F) -> Vec<Result<R, E>>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    run_pool(jobs, workers, false, f)
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

// ---------------------------------------------------------------------------
// Adapters

/// One call of a stage on one document (or one batch of its words).
#[derive(Debug, Clone)]
pub struct Invocation<'a> {
    pub stage: &'a StageConfig,
    pub document: &'a str,
    pub input: &'a Path,
    pub output: &'a Path,
    pub batch: Option<&'a Path>,
    /// Where the stage's stdout and stderr go.
    pub log: &'a Path,
}

pub trait StageAdapter: Send + Sync {
    fn run(&self, call: &Invocation<'_>) -> Result<(), AdapterError>;

    /// Whether a recognition stage wants word batches.
    fn batched(&self, stage: &StageConfig) -> bool {
        stage.is_batched()
    }
}

pub struct PassthroughAdapter;

impl StageAdapter for PassthroughAdapter {
    fn run(&self, call: &Invocation<'_>) -> Result<(), AdapterError> {
        fs::copy(call.input, call.output)
            .map(|_| ())
            .map_err(|e| AdapterError::Failed(format!("copy {}: {e}", call.input.display())))
    }
}

/// Writes `index.html` and `intermediate.json` next to the output path.
pub struct ReconstructAdapter;

impl StageAdapter for ReconstructAdapter {
    fn run(&self, call: &Invocation<'_>) -> Result<(), AdapterError> {
        let doc = load_document(call.input).map_err(|e| AdapterError::Failed(e.to_string()))?;
        let rd = build_intermediate(&doc);
        let dir = call.output.parent().unwrap_or(Path::new("."));
        emit_html(&rd, dir).map_err(|e| AdapterError::Failed(e.to_string()))?;
        write_intermediate(&rd, dir).map_err(|e| AdapterError::Failed(e.to_string()))?;
        Ok(())
    }
}

pub struct CommandAdapter;

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.to_string_lossy().replace('\'', r"'\''"))
}

/// Fills `{input}`, `{output}` and `{batch}` with shell-quoted paths.
pub fn render_command(template: &str, input: &Path, output: &Path, batch: Option<&Path>) -> String {
    let mut s = template.replace("{input}", &shell_quote(input)).replace("{output}", &shell_quote(output));
    if let Some(b) = batch {
        s = s.replace("{batch}", &shell_quote(b));
    }
    s
}

impl StageAdapter for CommandAdapter {
    fn run(&self, call: &Invocation<'_>) -> Result<(), AdapterError> {
        let template = call.stage.command.as_deref().unwrap_or_default();
        let line = render_command(template, call.input, call.output, call.batch);
        let log = fs::File::create(call.log).map_err(|e| AdapterError::Spawn(format!("{}: {e}", call.log.display())))?;
        let err_log = log.try_clone().map_err(|e| AdapterError::Spawn(e.to_string()))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&line)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(err_log)
            .spawn()
            .map_err(|e| AdapterError::Spawn(format!("{line}: {e}")))?;
        let deadline = Instant::now() + Duration::from_secs(call.stage.timeout_secs);
        loop {
            match child.try_wait() {
                Ok(Some(status)) if status.success() => return Ok(()),
                Ok(Some(status)) => {
                    return Err(AdapterError::Failed(format!(
                        "`{line}` exited with {status}; see {}",
                        call.log.display()
                    )))
                }
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(AdapterError::Timeout(call.stage.timeout_secs));
                }
                Ok(None) => std::thread::sleep(POLL_INTERVAL),
                Err(e) => return Err(AdapterError::Failed(e.to_string())),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Running

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub document: String,
    pub domain: String,
    pub preset: Preset,
    pub stages: Vec<StageTime>,
    /// Wall time of the whole document.
    pub total_seconds: f64,
    /// `total_seconds` minus the stage times: queueing and bookkeeping.
    pub overhead_seconds: f64,
}

#[derive(Debug)]
pub struct DocumentFailure {
    pub document: String,
    pub domain: String,
    pub error: PipelineError,
}

#[derive(Debug, Default)]
pub struct PipelineRun {
    /// Final artifacts of successful documents, in input order.
    pub outputs: Vec<StageArtifact>,
    /// Every artifact produced, per document.
    pub artifacts: BTreeMap<String, Vec<StageArtifact>>,
    pub timings: Vec<StageTimings>,
    pub failures: Vec<DocumentFailure>,
}

pub struct Pipeline {
    config: PipelineConfig,
    adapters: HashMap<String, Arc<dyn StageAdapter>>,
    document_workers: Option<usize>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let adapters = config
            .stages
            .iter()
            .map(|s| {
                let a: Arc<dyn StageAdapter> = match s.kind {
                    StageKind::ExternalCommand => Arc::new(CommandAdapter),
                    StageKind::Passthrough => Arc::new(PassthroughAdapter),
                    StageKind::Reconstruct => Arc::new(ReconstructAdapter),
                };
                (s.name.clone(), a)
            })
            .collect();
        Ok(Self {
            config,
            adapters,
            document_workers: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Replaces the adapter of a stage, e.g. with an in-process mock.
    pub fn with_adapter(mut self, stage: &str, adapter: Arc<dyn StageAdapter>) -> Result<Self, PipelineError> {
        if self.config.stage(stage).is_none() {
            return Err(PipelineError::Config(format!("no stage named `{stage}`")));
        }
        self.adapters.insert(stage.into(), adapter);
        Ok(self)
    }

    pub fn with_document_workers(mut self, n: usize) -> Self {
        self.document_workers = Some(n.max(1));
        self
    }

    /// Documents processed at once: explicit setting, then the environment
    /// variable, then the largest stage worker count.
    pub fn document_workers(&self) -> usize {
        self.document_workers
            .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|n| *n >= 1))
            .unwrap_or_else(|| self.config.stages.iter().map(|s| s.workers).max().unwrap_or(1))
    }

    /// Runs every input through the chain. Document ids are file stems; the
    /// domain is the name of the input's parent directory.
    pub fn run(&self, inputs: &[StageArtifact]) -> Result<PipelineRun, PipelineError> {
        let first = &self.config.stages[0];
        let mut seen = HashSet::new();
        for a in inputs {
            if a.kind != first.input_kind {
                return Err(PipelineError::Config(format!(
                    "{}: input is {} but stage `{}` expects {}",
                    a.path.display(),
                    a.kind,
                    first.name,
                    first.input_kind
                )));
            }
            if !seen.insert(document_id(&a.path)) {
                return Err(PipelineError::Config(format!("duplicate document id `{}`", document_id(&a.path))));
            }
        }
        let semaphores: HashMap<&str, Semaphore> = self
            .config
            .stages
            .iter()
            .map(|s| (s.name.as_str(), Semaphore::new(s.workers)))
            .collect();

        let results = parallel_map_all(inputs, self.document_workers(), |_, input| {
            self.run_document(input, &semaphores)
        });

        let mut run = PipelineRun::default();
        for (input, result) in inputs.iter().zip(results) {
            let document = document_id(&input.path);
            match result {
                Ok((artifacts, timings)) => {
                    run.outputs.push(artifacts.last().cloned().expect("at least one stage"));
                    run.artifacts.insert(document, artifacts);
                    run.timings.push(timings);
                }
                Err(error) => {
                    log::warn!("{error}");
                    run.failures.push(DocumentFailure {
                        document,
                        domain: domain_of(&input.path),
                        error,
                    })
                }
            }
        }
        Ok(run)
    }

    fn run_document(
        &self,
        input: &StageArtifact,
        semaphores: &HashMap<&str, Semaphore>,
    ) -> Result<(Vec<StageArtifact>, StageTimings), PipelineError> {
        let started = Instant::now();
        let document = document_id(&input.path);
        let dir = self.config.work_dir.join(&document);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let mut current = input.clone();
        let mut artifacts = Vec::new();
        let mut times = Vec::new();
        for (i, stage) in self.config.stages.iter().enumerate() {
            let output = output_path(&dir, i, stage, &current.path);
            if let Some(parent) = output.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            let adapter = &self.adapters[&stage.name];
            let sem = &semaphores[stage.name.as_str()];
            let wrap = |e: AdapterError| match e {
                AdapterError::Spawn(message) => PipelineError::StageSpawn {
                    stage: stage.name.clone(),
                    document: document.clone(),
                    message,
                },
                AdapterError::Failed(message) => PipelineError::StageProtocol {
                    stage: stage.name.clone(),
                    document: document.clone(),
                    message,
                },
                AdapterError::Timeout(seconds) => PipelineError::Timeout {
                    stage: stage.name.clone(),
                    document: document.clone(),
                    seconds,
                },
            };
            let log = dir.join(format!("{i:02}-{}.log", stage.name));

            let seconds = if adapter.batched(stage) {
                self.run_batched(stage, adapter.as_ref(), sem, &document, &current.path, &output, &dir, i)?
            } else {
                let _permit = sem.acquire();
                let t = Instant::now();
                adapter
                    .run(&Invocation {
                        stage,
                        document: &document,
                        input: &current.path,
                        output: &output,
                        batch: None,
                        log: &log,
                    })
                    .map_err(wrap)?;
                t.elapsed().as_secs_f64()
            };
            check_output(stage, &document, &output)?;
            times.push(StageTime {
                stage: stage.name.clone(),
                seconds,
            });
            current = StageArtifact {
                kind: stage.output_kind,
                path: output,
                produced_by: stage.name.clone(),
            };
            artifacts.push(current.clone());
        }
        let total = started.elapsed().as_secs_f64();
        let sum: f64 = times.iter().map(|t| t.seconds).sum();
        Ok((
            artifacts,
            StageTimings {
                document,
                domain: domain_of(&input.path),
                preset: self.config.preset,
                stages: times,
                total_seconds: total,
                overhead_seconds: (total - sum).max(0.0),
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_batched(
        &self,
        stage: &StageConfig,
        adapter: &dyn StageAdapter,
        sem: &Semaphore,
        document: &str,
        input: &Path,
        output: &Path,
        dir: &Path,
        index: usize,
    ) -> Result<f64, PipelineError> {
        let protocol = |message: String| PipelineError::StageProtocol {
            stage: stage.name.clone(),
            document: document.to_string(),
            message,
        };
        let doc = load_document(input).map_err(|e| protocol(e.to_string()))?;
        let mut record = doc.to_record();
        let batches = batch_items(&record.words, stage.batch_size);
        let t = Instant::now();
        let texts = parallel_map(&batches, stage.workers, |k, batch| {
            let batch_in = dir.join(format!("{index:02}-{}.batch-{k:04}.json", stage.name));
            let batch_out = dir.join(format!("{index:02}-{}.batch-{k:04}.out.json", stage.name));
            let log = dir.join(format!("{index:02}-{}.batch-{k:04}.log", stage.name));
            fs::write(&batch_in, to_canonical_json(batch)).map_err(io_err(&batch_in))?;
            {
                let _permit = sem.acquire();
                adapter
                    .run(&Invocation {
                        stage,
                        document,
                        input,
                        output: &batch_out,
                        batch: Some(&batch_in),
                        log: &log,
                    })
                    .map_err(|e| match e {
                        AdapterError::Spawn(message) => PipelineError::StageSpawn {
                            stage: stage.name.clone(),
                            document: document.to_string(),
                            message,
                        },
                        AdapterError::Failed(m) => protocol(format!("batch {k}: {m}")),
                        AdapterError::Timeout(seconds) => PipelineError::Timeout {
                            stage: stage.name.clone(),
                            document: document.to_string(),
                            seconds,
                        },
                    })?;
            }
            let text = fs::read_to_string(&batch_out).map_err(|e| protocol(format!("batch {k}: {e}")))?;
            let got: Vec<WordRecord> =
                serde_json::from_str(&text).map_err(|e| protocol(format!("batch {k}: invalid JSON: {e}")))?;
            let want: Vec<&str> = batch.iter().map(|w| w.id.as_str()).collect();
            let have: Vec<&str> = got.iter().map(|w| w.id.as_str()).collect();
            if want != have {
                return Err(protocol(format!("batch {k}: word ids do not match the request")));
            }
            Ok(got.into_iter().map(|w| w.text).collect::<Vec<_>>())
        })
        .map_err(|e| e.error)?;
        let elapsed = t.elapsed().as_secs_f64();
        for (w, text) in record.words.iter_mut().zip(texts.into_iter().flatten()) {
            w.text = nfc(&text);
        }
        write_record(&record, output)?;
        Ok(elapsed)
    }
}

fn write_record(record: &DocumentRecord, path: &Path) -> Result<(), PipelineError> {
    fs::write(path, to_canonical_json(record)).map_err(io_err(path))
}

/// Convenience wrapper: build a [`Pipeline`] from `config` and run it.
pub fn run_pipeline(config: PipelineConfig, inputs: &[StageArtifact]) -> Result<PipelineRun, PipelineError> {
    Pipeline::new(config)?.run(inputs)
}

pub fn document_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn domain_of(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".into())
}

fn output_path(dir: &Path, index: usize, stage: &StageConfig, input: &Path) -> PathBuf {
    let stem = format!("{index:02}-{}", stage.name);
    match stage.output_kind {
        k if k.is_document() => dir.join(format!("{stem}.json")),
        ArtifactKind::Html => dir.join(stem).join("index.html"),
        _ => {
            let ext = input.extension().map(|e| e.to_string_lossy().into_owned());
            match ext {
                Some(e) => dir.join(format!("{stem}.{e}")),
                None => dir.join(stem),
            }
        }
    }
}

fn check_output(stage: &StageConfig, document: &str, output: &Path) -> Result<(), PipelineError> {
    let protocol = |message: String| PipelineError::StageProtocol {
        stage: stage.name.clone(),
        document: document.to_string(),
        message,
    };
    if !output.is_file() {
        return Err(protocol(format!("missing output {}", output.display())));
    }
    if stage.output_kind.is_document() {
        let _: DocumentAnnotation = load_document(output).map_err(|e| protocol(e.to_string()))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Timing report

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub domain: String,
    /// Mean seconds per preset; `None` when the preset has no runs.
    pub cells: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub presets: Vec<Preset>,
    /// Domains in order of first appearance.
    pub rows: Vec<TimingRow>,
}

/// Mean per-document wall seconds per (domain, preset).
pub fn timing_report(timings: &[StageTimings]) -> TimingReport {
    let mut presets: Vec<Preset> = timings.iter().map(|t| t.preset).collect();
    presets.sort();
    presets.dedup();
    let mut domains: Vec<&str> = Vec::new();
    let mut sums: HashMap<(&str, Preset), (f64, usize)> = HashMap::new();
    for t in timings {
        if !domains.contains(&t.domain.as_str()) {
            domains.push(&t.domain);
        }
        let e = sums.entry((&t.domain, t.preset)).or_default();
        e.0 += t.total_seconds;
        e.1 += 1;
    }
    TimingReport {
        rows: domains
            .iter()
            .map(|d| TimingRow {
                domain: d.to_string(),
                cells: presets
                    .iter()
                    .map(|p| sums.get(&(*d, *p)).map(|(s, n)| s / *n as f64))
                    .collect(),
            })
            .collect(),
        presets,
    }
}

impl TimingReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Domain Name |");
        for p in &self.presets {
            out.push_str(&format!(" {} |", p.label()));
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.presets.len()));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("| {} |", row.domain));
            for c in &row.cells {
                match c {
                    Some(v) => out.push_str(&format!(" {v:.2} |")),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}
