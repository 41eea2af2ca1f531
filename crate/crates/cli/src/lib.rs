//! Commands behind the `docrebench` binary.
//!
//! Every command that writes an output directory also writes
//! `run_manifest.json` there: the command line, hashes of inputs and outputs,
//! seeds and the tool version. Outputs are deterministic given the manifest,
//! except timing files from `run`, which are listed but not hashed.

pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use docrebench_core::metrics::{score_document, DocumentScore};
use docrebench_core::model::{load_document, save_document, to_canonical_json, DocumentAnnotation, StageArtifact};
use docrebench_core::pipeline::{parallel_map_all, Pipeline, PipelineConfig};
use docrebench_core::reconstruct::{build_intermediate, emit_html, write_intermediate};
use docrebench_core::synth::{generate_document, perturb, PerturbationSpec, SynthError, SynthSpec};

use crate::report::{aggregate, read_scores, Format, ScoreRow};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Exit codes: 1 for internal failures, 2 for bad input or data.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

fn data(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

fn internal(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Internal(e.into())
}

/// Result of a command that may finish with per-item problems.
#[derive(Debug, Default)]
pub struct Outcome {
    pub diagnostics: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.diagnostics.is_empty() {
            0
        } else {
            2
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    /// Hash of the spec or config file, when the command takes one.
    pub config_sha256: Option<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Outputs whose content varies between runs (wall-clock timings).
    pub unhashed_outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| internal(anyhow::anyhow!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Files under `dir`, recursively, sorted by path.
fn list_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| internal(anyhow::anyhow!("{}: {e}", d.display())))? {
            let p = entry.map_err(internal)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn digests(files: &[PathBuf], base: &Path) -> Result<Vec<FileDigest>, CliError> {
    files
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: relative(p, base),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

struct ManifestBuilder {
    command: &'static str,
    args: BTreeMap<String, String>,
    seeds: Vec<u64>,
    config: Option<PathBuf>,
    inputs: Vec<(PathBuf, PathBuf)>,
    unhashed: Vec<String>,
}

impl ManifestBuilder {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            args: BTreeMap::new(),
            seeds: Vec::new(),
            config: None,
            inputs: Vec::new(),
            unhashed: Vec::new(),
        }
    }

    fn arg(mut self, k: &str, v: impl ToString) -> Self {
        self.args.insert(k.into(), v.to_string());
        self
    }

    /// Records every file under `path` (or the file itself) as an input.
    fn input(mut self, path: &Path) -> Self {
        self.inputs.push((path.to_path_buf(), path.parent().unwrap_or(Path::new("")).to_path_buf()));
        self
    }

    fn write(self, out_dir: &Path) -> Result<RunManifest, CliError> {
        let mut inputs = Vec::new();
        for (p, base) in &self.inputs {
            let files = if p.is_dir() { list_files(p)? } else { vec![p.clone()] };
            inputs.extend(digests(&files, base)?);
        }
        let outputs: Vec<PathBuf> = list_files(out_dir)?
            .into_iter()
            .filter(|p| {
                let rel = relative(p, out_dir);
                rel != MANIFEST_FILE && !self.unhashed.contains(&rel)
            })
            .collect();
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            args: self.args,
            seeds: self.seeds,
            config_sha256: self.config.as_deref().map(sha256_file).transpose()?,
            inputs,
            outputs: digests(&outputs, out_dir)?,
            unhashed_outputs: self.unhashed,
        };
        write_text(&out_dir.join(MANIFEST_FILE), &to_canonical_json(&manifest))?;
        Ok(manifest)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| internal(anyhow::anyhow!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| internal(anyhow::anyhow!("{}: {e}", path.display())))
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(data(format!("{what} {} is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(data(format!("{what} {} is not a file", path.display())))
    }
}

fn create_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| data(format!("cannot create {}: {e}", out.display())))
}

// ---------------------------------------------------------------------------
// evaluate

/// Loads every `*.json` under `dir`, keyed by image id. Problems become
/// diagnostics rather than errors.
fn load_dir(dir: &Path, diagnostics: &mut Vec<String>) -> Result<BTreeMap<String, DocumentAnnotation>, CliError> {
    let mut docs = BTreeMap::new();
    let mut origin: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in list_files(dir)?.into_iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
        if path.file_name().is_some_and(|n| n == MANIFEST_FILE) {
            continue;
        }
        match load_document(&path) {
            Ok(doc) => {
                if let Some(first) = origin.get(&doc.image_id) {
                    diagnostics.push(format!(
                        "{}: duplicate image_id `{}` (first in {})",
                        path.display(),
                        doc.image_id,
                        first.display()
                    ));
                    continue;
                }
                origin.insert(doc.image_id.clone(), path);
                docs.insert(doc.image_id.clone(), doc);
            }
            Err(e) => diagnostics.push(e.to_string()),
        }
    }
    Ok(docs)
}

pub fn scores_to_csv(scores: &[DocumentScore]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "image_id", "domain", "tp", "fp", "fn", "precision", "recall", "f", "cer", "wer",
    ])
    .unwrap();
    for s in scores {
        let (wl, tl) = (&s.word_level, &s.text_level);
        w.write_record([
            s.image_id.clone(),
            s.domain.clone(),
            wl.tp.to_string(),
            wl.fp.to_string(),
            wl.fn_.to_string(),
            wl.precision.to_string(),
            wl.recall.to_string(),
            wl.f.to_string(),
            tl.cer.to_string(),
            tl.wer.to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

fn score_rows(scores: &[DocumentScore]) -> Vec<ScoreRow> {
    scores
        .iter()
        .map(|s| ScoreRow {
            image_id: s.image_id.clone(),
            domain: s.domain.clone(),
            n_images: 1,
            recall: s.word_level.recall,
            precision: s.word_level.precision,
            f: s.word_level.f,
            cer: s.text_level.cer,
            wer: s.text_level.wer,
        })
        .collect()
}

#[derive(Debug)]
pub struct Evaluation {
    pub scores: Vec<DocumentScore>,
    pub outcome: Outcome,
}

/// Scores every prediction against its ground truth (paired by image id) and
/// writes `scores.csv`, `scores.json`, `report.<format>` and `diagnostics.json`.
pub fn cmd_evaluate(gt_dir: &Path, pred_dir: &Path, out: &Path, format: Format, workers: usize) -> Result<Evaluation, CliError> {
    require_dir(gt_dir, "ground-truth directory")?;
    require_dir(pred_dir, "prediction directory")?;
    create_out(out)?;

    let mut diagnostics = Vec::new();
    let gt = load_dir(gt_dir, &mut diagnostics)?;
    let pred = load_dir(pred_dir, &mut diagnostics)?;
    for id in gt.keys().filter(|k| !pred.contains_key(*k)) {
        diagnostics.push(format!("image `{id}`: no prediction"));
    }
    for id in pred.keys().filter(|k| !gt.contains_key(*k)) {
        diagnostics.push(format!("image `{id}`: no ground truth"));
    }
    let pairs: Vec<(&DocumentAnnotation, &DocumentAnnotation)> =
        gt.iter().filter_map(|(id, g)| pred.get(id).map(|p| (g, p))).collect();
    let results = parallel_map_all(&pairs, workers, |_, (g, p)| score_document(g, p));
    let mut scores = Vec::new();
    for r in results {
        match r {
            Ok(s) => scores.push(s),
            Err(e) => diagnostics.push(e.to_string()),
        }
    }
    for d in &diagnostics {
        log::error!("{d}");
    }

    write_text(&out.join("scores.csv"), &scores_to_csv(&scores))?;
    write_text(&out.join("scores.json"), &to_canonical_json(&scores))?;
    write_text(&out.join("diagnostics.json"), &to_canonical_json(&diagnostics))?;
    if !scores.is_empty() {
        let table = aggregate(&score_rows(&scores)).map_err(internal)?;
        write_text(&out.join(format!("report.{}", format.extension())), &table.render(format))?;
    }
    ManifestBuilder::new("evaluate")
        .arg("gt", gt_dir.display())
        .arg("pred", pred_dir.display())
        .arg("format", format.extension())
        .input(gt_dir)
        .input(pred_dir)
        .write(out)?;
    Ok(Evaluation {
        scores,
        outcome: Outcome { diagnostics },
    })
}

// ---------------------------------------------------------------------------
// reconstruct

/// Writes `index.html` and `intermediate.json` for one predicted document.
pub fn cmd_reconstruct(pred: &Path, out: &Path) -> Result<PathBuf, CliError> {
    require_file(pred, "prediction")?;
    let doc = load_document(pred).map_err(|e| data(e.to_string()))?;
    create_out(out)?;
    let rd = build_intermediate(&doc);
    let html = emit_html(&rd, out).map_err(internal)?;
    write_intermediate(&rd, out).map_err(internal)?;
    ManifestBuilder::new("reconstruct")
        .arg("pred", pred.display())
        .input(pred)
        .write(out)?;
    Ok(html)
}

// ---------------------------------------------------------------------------
// synth

/// A batch of fixtures sharing document and perturbation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthBatch {
    pub fixtures: usize,
    pub seed: u64,
    pub id_prefix: String,
    /// Domains assigned to fixtures in rotation; empty keeps `document.domain`.
    pub domains: Vec<String>,
    pub document: SynthSpec,
    pub perturbation: PerturbationSpec,
}

impl Default for SynthBatch {
    fn default() -> Self {
        Self {
            fixtures: 1,
            seed: 0,
            id_prefix: "synth".into(),
            domains: Vec::new(),
            document: SynthSpec::default(),
            perturbation: PerturbationSpec::default(),
        }
    }
}

pub fn parse_synth_batch(text: &str, toml_syntax: bool) -> Result<SynthBatch, String> {
    if toml_syntax {
        toml::from_str(text).map_err(|e| e.to_string())
    } else {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| format!("at `{}`: {}", e.path(), e.inner()))
    }
}

fn synth_error(section: &str, e: SynthError) -> CliError {
    match e {
        SynthError::InvalidSpec { field, message } => data(format!("invalid `{section}.{field}`: {message}")),
        other => data(other.to_string()),
    }
}

/// One generated fixture.
pub struct Fixture {
    pub gt: DocumentAnnotation,
    pub pred: DocumentAnnotation,
    pub expected: docrebench_core::synth::ExpectedOutcome,
}

/// Generates the fixtures of a batch in memory; deterministic in `batch.seed`.
pub fn generate_batch(batch: &SynthBatch) -> Result<Vec<Fixture>, CliError> {
    batch.document.validate().map_err(|e| synth_error("document", e))?;
    batch.perturbation.validate().map_err(|e| synth_error("perturbation", e))?;
    let mut seeds = ChaCha8Rng::seed_from_u64(batch.seed);
    let width = batch.fixtures.saturating_sub(1).to_string().len().max(4);
    (0..batch.fixtures)
        .map(|i| {
            let mut spec = batch.document.clone();
            spec.seed = seeds.next_u64();
            spec.image_id = format!("{}-{i:0width$}", batch.id_prefix);
            if !batch.domains.is_empty() {
                spec.domain = batch.domains[i % batch.domains.len()].clone();
            }
            let p = PerturbationSpec {
                seed: seeds.next_u64(),
                ..batch.perturbation.clone()
            };
            let gt = generate_document(&spec).map_err(|e| synth_error("document", e))?;
            let (pred, expected) = perturb(&gt, &p).map_err(|e| synth_error("perturbation", e))?;
            Ok(Fixture { gt, pred, expected })
        })
        .collect()
}

/// Writes `gt/<id>.json`, `pred/<id>.json` and `expected/<id>.json`.
pub fn cmd_synth(spec_file: &Path, out: &Path, seed: Option<u64>) -> Result<usize, CliError> {
    require_file(spec_file, "spec")?;
    let text = fs::read_to_string(spec_file).map_err(|e| data(format!("{}: {e}", spec_file.display())))?;
    let toml_syntax = spec_file.extension().is_some_and(|e| e == "toml");
    let mut batch = parse_synth_batch(&text, toml_syntax).map_err(|e| data(format!("{}: {e}", spec_file.display())))?;
    if let Some(s) = seed {
        batch.seed = s;
    }
    let fixtures = generate_batch(&batch)?;
    create_out(out)?;
    for sub in ["gt", "pred", "expected"] {
        create_out(&out.join(sub))?;
    }
    for f in &fixtures {
        let id = &f.gt.image_id;
        save_document(&f.gt, out.join("gt").join(format!("{id}.json"))).map_err(internal)?;
        save_document(&f.pred, out.join("pred").join(format!("{id}.json"))).map_err(internal)?;
        write_text(&out.join("expected").join(format!("{id}.json")), &to_canonical_json(&f.expected))?;
    }
    let mut m = ManifestBuilder::new("synth").arg("spec", spec_file.display());
    m.seeds.push(batch.seed);
    m.config = Some(spec_file.to_path_buf());
    m.write(out)?;
    Ok(fixtures.len())
}

// ---------------------------------------------------------------------------
// run

pub const TIMINGS_FILE: &str = "timings.json";
pub const TIMING_REPORT_FILE: &str = "timing_report.md";

/// Runs the configured pipeline over every file under `inputs`. The parent
/// directory name of each input is its domain.
pub fn cmd_run(config: &Path, inputs: &Path, out: &Path, workers: Option<usize>) -> Result<Outcome, CliError> {
    require_file(config, "config")?;
    require_dir(inputs, "input directory")?;
    let mut cfg = PipelineConfig::load(config).map_err(|e| data(e.to_string()))?;
    create_out(out)?;
    cfg.work_dir = out.join("work");
    let first_kind = cfg.stages[0].input_kind;
    let mut pipeline = Pipeline::new(cfg).map_err(|e| data(e.to_string()))?;
    if let Some(w) = workers {
        pipeline = pipeline.with_document_workers(w);
    }
    let artifacts: Vec<StageArtifact> = list_files(inputs)?
        .into_iter()
        .map(|path| StageArtifact {
            kind: first_kind,
            path,
            produced_by: "input".into(),
        })
        .collect();
    let run = pipeline.run(&artifacts).map_err(|e| data(e.to_string()))?;

    let outputs: Vec<String> = run.outputs.iter().map(|a| relative(&a.path, out)).collect();
    let diagnostics: Vec<String> = run.failures.iter().map(|f| format!("{}: {}", f.document, f.error)).collect();
    write_text(&out.join("outputs.json"), &to_canonical_json(&outputs))?;
    write_text(&out.join("diagnostics.json"), &to_canonical_json(&diagnostics))?;
    write_text(&out.join(TIMINGS_FILE), &to_canonical_json(&run.timings))?;
    if !run.timings.is_empty() {
        write_text(
            &out.join(TIMING_REPORT_FILE),
            &docrebench_core::pipeline::timing_report(&run.timings).to_markdown(),
        )?;
    }
    let mut m = ManifestBuilder::new("run")
        .arg("config", config.display())
        .arg("inputs", inputs.display())
        .input(inputs);
    if let Some(w) = workers {
        m = m.arg("workers", w);
    }
    m.config = Some(config.to_path_buf());
    m.unhashed = vec![TIMINGS_FILE.into(), TIMING_REPORT_FILE.into()];
    m.unhashed.extend(
        list_files(&out.join("work"))?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "log"))
            .map(|p| relative(&p, out)),
    );
    m.write(out)?;
    Ok(Outcome { diagnostics })
}

// ---------------------------------------------------------------------------
// report

/// Renders a per-domain table from a scores CSV.
pub fn cmd_report(scores: &Path, format: Format) -> Result<String, CliError> {
    require_file(scores, "scores file")?;
    let file = fs::File::open(scores).map_err(|e| data(format!("{}: {e}", scores.display())))?;
    let rows = read_scores(file).map_err(|e| data(format!("{}: {e}", scores.display())))?;
    let table = aggregate(&rows).map_err(|e| data(format!("{}: {e}", scores.display())))?;
    Ok(table.render(format))
}
