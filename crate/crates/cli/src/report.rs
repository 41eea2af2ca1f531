//! Per-domain score tables.
//!
//! Input rows are per-image scores, or pre-aggregated domain means carrying an
//! `n_images` weight. The summary row "Per Image Average" weights every image
//! equally; "Domain Average" weights every domain equally.

use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PER_IMAGE_AVERAGE: &str = "Per Image Average";
pub const DOMAIN_AVERAGE: &str = "Domain Average";

pub const METHODOLOGY: &str = "R, P and F are word-level recall, precision and F-measure; CER and WER are \
text-level error rates. Domain rows are means over the images of a domain. \"Per Image Average\" weights \
every image equally, so each domain counts in proportion to its image count. \"Domain Average\" is the \
unweighted mean of the domain rows. F is averaged per image and is not recomputed from the averaged P and R.";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("no score rows")]
    Empty,
    #[error("unknown format `{0}` (expected md, csv or json)")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Md,
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Md => "md",
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = ReportError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(Format::Md),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(ReportError::Format(other.into())),
        }
    }
}

/// One input row. Extra columns are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    #[serde(default)]
    pub image_id: String,
    pub domain: String,
    /// Number of images the row stands for; 1 for per-image rows.
    #[serde(default = "one", alias = "weight")]
    pub n_images: u64,
    pub recall: f64,
    pub precision: f64,
    pub f: f64,
    pub cer: f64,
    pub wer: f64,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainReport {
    pub domain: String,
    pub n_images: u64,
    pub recall: f64,
    pub precision: f64,
    pub f: f64,
    pub cer: f64,
    pub wer: f64,
}

impl DomainReport {
    fn values(&self) -> [f64; 5] {
        [self.recall, self.precision, self.f, self.cer, self.wer]
    }

    fn from_values(domain: &str, n_images: u64, v: [f64; 5]) -> Self {
        Self {
            domain: domain.into(),
            n_images,
            recall: v[0],
            precision: v[1],
            f: v[2],
            cer: v[3],
            wer: v[4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportTable {
    /// Domains in order of first appearance.
    pub domains: Vec<DomainReport>,
    pub per_image_average: DomainReport,
    pub domain_average: DomainReport,
    pub methodology: String,
}

fn weighted_mean<'a>(rows: impl Iterator<Item = ([f64; 5], u64)> + 'a) -> ([f64; 5], u64) {
    let mut sum = [0.0; 5];
    let mut n = 0u64;
    for (v, w) in rows {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x * w as f64;
        }
        n += w;
    }
    (sum.map(|s| if n == 0 { 0.0 } else { s / n as f64 }), n)
}

pub fn aggregate(rows: &[ScoreRow]) -> Result<ReportTable, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.domain.as_str()) {
            order.push(&r.domain);
        }
    }
    let values = |r: &ScoreRow| [r.recall, r.precision, r.f, r.cer, r.wer];
    let domains: Vec<DomainReport> = order
        .iter()
        .map(|d| {
            let (v, n) = weighted_mean(rows.iter().filter(|r| r.domain == *d).map(|r| (values(r), r.n_images)));
            DomainReport::from_values(d, n, v)
        })
        .collect();
    let (all, n) = weighted_mean(rows.iter().map(|r| (values(r), r.n_images)));
    let (macro_v, _) = weighted_mean(domains.iter().map(|d| (d.values(), 1)));
    Ok(ReportTable {
        per_image_average: DomainReport::from_values(PER_IMAGE_AVERAGE, n, all),
        domain_average: DomainReport::from_values(DOMAIN_AVERAGE, n, macro_v),
        domains,
        methodology: METHODOLOGY.into(),
    })
}

/// Reads score rows from CSV with a header line. Errors carry the line number.
pub fn read_scores(reader: impl Read) -> Result<Vec<ScoreRow>, ReportError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ScoreRow>() {
        let row = rec.map_err(|e| ReportError::Row {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rows.len() as u64 + 2;
        let v = [row.recall, row.precision, row.f, row.cer, row.wer];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ReportError::Row {
                line,
                message: "scores must be finite and non-negative".into(),
            });
        }
        if row.n_images == 0 {
            return Err(ReportError::Row {
                line,
                message: "n_images must be positive".into(),
            });
        }
        if row.domain.is_empty() {
            return Err(ReportError::Row {
                line,
                message: "empty domain".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

fn round2(x: f64) -> f64 {
    fmt2(x).parse().unwrap()
}

impl ReportTable {
    fn all_rows(&self) -> impl Iterator<Item = &DomainReport> {
        self.domains
            .iter()
            .chain([&self.per_image_average, &self.domain_average])
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Md => self.to_markdown(),
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Domain Name | Images | R | P | F | CER | WER |\n|---|---:|---:|---:|---:|---:|---:|\n");
        for r in self.all_rows() {
            let _ = write!(out, "| {} | {} |", r.domain, r.n_images);
            for v in r.values() {
                let _ = write!(out, " {} |", fmt2(v));
            }
            out.push('\n');
        }
        let _ = write!(out, "\n{}\n", self.methodology);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["domain", "n_images", "recall", "precision", "f", "cer", "wer"])
            .unwrap();
        for r in self.all_rows() {
            let mut rec = vec![r.domain.clone(), r.n_images.to_string()];
            rec.extend(r.values().map(fmt2));
            w.write_record(&rec).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn to_json(&self) -> String {
        let round = |r: &DomainReport| DomainReport::from_values(&r.domain, r.n_images, r.values().map(round2));
        let rounded = ReportTable {
            domains: self.domains.iter().map(round).collect(),
            per_image_average: round(&self.per_image_average),
            domain_average: round(&self.domain_average),
            methodology: self.methodology.clone(),
        };
        docrebench_core::model::to_canonical_json(&rounded)
    }
}
