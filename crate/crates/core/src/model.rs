//! Document annotation model and its JSON wire format.
//!
//! One schema serves ground truth and predictions alike. Stages that have not
//! run yet simply leave their lists empty (no lines, no words) or leave word
//! text empty before recognition.
//!
//! On disk a document is a single JSON object:
//!
//! ```json
//! {"domain":"Magazine","height":1000,"image_id":"p1","lines":[...],
//!  "regions":[{"class":"paragraph","id":"r1","polygon":[x0,y0,x1,y1,...]}],
//!  "schema_version":1,"width":800,"words":[...]}
//! ```
//!
//! [`save_document`] writes keys in sorted order with shortest round-trip float
//! formatting, so saving the same document twice yields identical bytes.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::geometry::{BBox, GeometryError, Polygon};

pub const SCHEMA_VERSION: u32 = 1;

/// The nine domains of the Bengali complete-document evaluation set. Other
/// tags are accepted.
pub const KNOWN_DOMAINS: [&str; 9] = [
    "Magazine",
    "Single Column Book",
    "Multi Column Book",
    "Government Document",
    "Two Page Book",
    "Old Newspaper",
    "New Newspaper",
    "Property Document",
    "Book Cover",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionClass {
    Paragraph,
    TextBox,
    Image,
    Table,
}

impl RegionClass {
    /// Paragraphs and text boxes carry text; images and tables do not.
    pub fn is_text(self) -> bool {
        matches!(self, RegionClass::Paragraph | RegionClass::TextBox)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegionClass::Paragraph => "paragraph",
            RegionClass::TextBox => "text_box",
            RegionClass::Image => "image",
            RegionClass::Table => "table",
        }
    }
}

impl fmt::Display for RegionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutRegion {
    pub id: String,
    pub class: RegionClass,
    pub polygon: Polygon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineInstance {
    pub id: String,
    pub region_id: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordInstance {
    pub id: String,
    pub region_id: String,
    pub line_id: Option<String>,
    pub polygon: Polygon,
    /// NFC-normalized; empty when the word was detected but not recognized.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentAnnotation {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub domain: String,
    pub regions: Vec<LayoutRegion>,
    pub lines: Vec<LineInstance>,
    pub words: Vec<WordInstance>,
}

impl DocumentAnnotation {
    pub fn region(&self, id: &str) -> Option<&LayoutRegion> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn text_regions(&self) -> impl Iterator<Item = &LayoutRegion> {
        self.regions.iter().filter(|r| r.class.is_text())
    }

    pub fn words_in_region<'a>(&'a self, region_id: &'a str) -> impl Iterator<Item = &'a WordInstance> {
        self.words.iter().filter(move |w| w.region_id == region_id)
    }

    /// Words whose region is a paragraph or text box.
    pub fn text_words(&self) -> impl Iterator<Item = &WordInstance> {
        let text: HashSet<&str> = self.text_regions().map(|r| r.id.as_str()).collect();
        self.words
            .iter()
            .filter(move |w| text.contains(w.region_id.as_str()))
    }

    pub fn to_record(&self) -> DocumentRecord {
        DocumentRecord {
            schema_version: SCHEMA_VERSION,
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            domain: self.domain.clone(),
            regions: self
                .regions
                .iter()
                .map(|r| RegionRecord {
                    id: r.id.clone(),
                    class: r.class,
                    polygon: r.polygon.to_flat(),
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRecord {
                    id: l.id.clone(),
                    region_id: l.region_id.clone(),
                    bbox: l.bbox.to_array(),
                })
                .collect(),
            words: self
                .words
                .iter()
                .map(|w| WordRecord {
                    id: w.id.clone(),
                    region_id: w.region_id.clone(),
                    line_id: w.line_id.clone(),
                    polygon: w.polygon.to_flat(),
                    text: w.text.clone(),
                })
                .collect(),
        }
    }

    /// Rule violations of this document; empty for a consistent document.
    pub fn validate(&self) -> Vec<Violation> {
        validate_document(&self.to_record())
    }

    /// Canonical JSON text, as written by [`save_document`].
    pub fn to_canonical_json(&self) -> String {
        to_canonical_json(&self.to_record())
    }
}

// ---------------------------------------------------------------------------
// Wire records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub schema_version: u32,
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub domain: String,
    #[serde(default)]
    pub regions: Vec<RegionRecord>,
    #[serde(default)]
    pub lines: Vec<LineRecord>,
    #[serde(default)]
    pub words: Vec<WordRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub id: String,
    pub class: RegionClass,
    pub polygon: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub id: String,
    pub region_id: String,
    /// `[x_min, y_min, x_max, y_max]`
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordRecord {
    pub id: String,
    pub region_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_id: Option<String>,
    pub polygon: Vec<f64>,
    #[serde(default)]
    pub text: String,
}

/// One broken rule, tied to the offending element id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub id: String,
    pub rule: &'static str,
    pub detail: String,
}

impl Violation {
    fn new(id: impl Into<String>, rule: &'static str, detail: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            rule,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]: {}", self.id, self.rule, self.detail)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: schema error at `{json_path}`: {message}")]
    Schema {
        path: PathBuf,
        json_path: String,
        message: String,
    },
    #[error("{path}: {} integrity violation(s), first: {}", violations.len(), violations[0])]
    Integrity {
        path: PathBuf,
        violations: Vec<Violation>,
    },
}

fn clamp_flat(coords: &[f64], width: f64, height: f64) -> (Vec<f64>, bool) {
    let mut changed = false;
    let out = coords
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let hi = if i % 2 == 0 { width } else { height };
            let c = if v.is_finite() { v.clamp(0.0, hi) } else { v };
            changed |= c != v;
            c
        })
        .collect();
    (out, changed)
}

fn check_polygon(
    id: &str,
    coords: &[f64],
    width: f64,
    height: f64,
    out: &mut Vec<Violation>,
) -> Option<Polygon> {
    let (clamped, _) = clamp_flat(coords, width, height);
    match Polygon::from_flat(&clamped) {
        Ok(p) => Some(p),
        Err(e) => {
            out.push(Violation::new(id, e.rule(), e.to_string()));
            None
        }
    }
}

fn check_bbox(id: &str, b: &[f64; 4], width: f64, height: f64, out: &mut Vec<Violation>) -> Option<BBox> {
    match BBox::new(b[0], b[1], b[2], b[3]) {
        Ok(bb) => Some(bb.clamped(width, height)),
        Err(e) => {
            let rule = match e {
                GeometryError::NonFinite => "bbox.finite",
                _ => "bbox.ordered",
            };
            out.push(Violation::new(id, rule, e.to_string()));
            None
        }
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>, out: &mut Vec<Violation>) {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            out.push(Violation::new(id, "id.unique", "duplicate id"));
        }
    }
}

/// Checks every document rule and returns all violations found.
///
/// Polygons and boxes are clamped to the page before geometric checks, the
/// same way [`load_document`] does, so an empty result means the record loads.
pub fn validate_document(doc: &DocumentRecord) -> Vec<Violation> {
    build(doc).err().unwrap_or_default()
}

fn build(doc: &DocumentRecord) -> Result<DocumentAnnotation, Vec<Violation>> {
    let mut v = Vec::new();
    if doc.schema_version != SCHEMA_VERSION {
        v.push(Violation::new(
            &doc.image_id,
            "schema.version",
            format!("expected {SCHEMA_VERSION}, got {}", doc.schema_version),
        ));
    }
    if doc.width == 0 || doc.height == 0 {
        v.push(Violation::new(&doc.image_id, "page.size", "width and height must be positive"));
    }
    let (w, h) = (doc.width as f64, doc.height as f64);

    check_unique(doc.regions.iter().map(|r| r.id.as_str()), &mut v);
    check_unique(doc.lines.iter().map(|l| l.id.as_str()), &mut v);
    check_unique(doc.words.iter().map(|x| x.id.as_str()), &mut v);

    let region_class: HashMap<&str, RegionClass> =
        doc.regions.iter().map(|r| (r.id.as_str(), r.class)).collect();
    let line_region: HashMap<&str, &str> = doc
        .lines
        .iter()
        .map(|l| (l.id.as_str(), l.region_id.as_str()))
        .collect();

    let mut regions = Vec::with_capacity(doc.regions.len());
    for r in &doc.regions {
        if let Some(p) = check_polygon(&r.id, &r.polygon, w, h, &mut v) {
            regions.push(LayoutRegion {
                id: r.id.clone(),
                class: r.class,
                polygon: p,
            });
        }
    }

    let mut lines = Vec::with_capacity(doc.lines.len());
    for l in &doc.lines {
        match region_class.get(l.region_id.as_str()) {
            None => v.push(Violation::new(
                &l.id,
                "line.region_ref",
                format!("unknown region `{}`", l.region_id),
            )),
            Some(c) if !c.is_text() => v.push(Violation::new(
                &l.id,
                "line.region_class",
                format!("region `{}` is a {c} region", l.region_id),
            )),
            Some(_) => {}
        }
        if let Some(b) = check_bbox(&l.id, &l.bbox, w, h, &mut v) {
            lines.push(LineInstance {
                id: l.id.clone(),
                region_id: l.region_id.clone(),
                bbox: b,
            });
        }
    }

    let mut words = Vec::with_capacity(doc.words.len());
    for x in &doc.words {
        if !region_class.contains_key(x.region_id.as_str()) {
            v.push(Violation::new(
                &x.id,
                "word.region_ref",
                format!("unknown region `{}`", x.region_id),
            ));
        }
        if let Some(line_id) = &x.line_id {
            match line_region.get(line_id.as_str()) {
                None => v.push(Violation::new(
                    &x.id,
                    "word.line_ref",
                    format!("unknown line `{line_id}`"),
                )),
                Some(lr) if *lr != x.region_id => v.push(Violation::new(
                    &x.id,
                    "word.line_region",
                    format!("line `{line_id}` belongs to region `{lr}`, word to `{}`", x.region_id),
                )),
                Some(_) => {}
            }
        }
        if let Some(p) = check_polygon(&x.id, &x.polygon, w, h, &mut v) {
            words.push(WordInstance {
                id: x.id.clone(),
                region_id: x.region_id.clone(),
                line_id: x.line_id.clone(),
                polygon: p,
                text: nfc(&x.text),
            });
        }
    }

    if !v.is_empty() {
        return Err(v);
    }
    Ok(DocumentAnnotation {
        image_id: doc.image_id.clone(),
        width: doc.width,
        height: doc.height,
        domain: doc.domain.clone(),
        regions,
        lines,
        words,
    })
}

/// Canonical composition; the single normalization applied to all text.
pub fn nfc(s: &str) -> String {
    s.nfc().collect()
}

impl TryFrom<&DocumentRecord> for DocumentAnnotation {
    type Error = Vec<Violation>;

    fn try_from(doc: &DocumentRecord) -> Result<Self, Self::Error> {
        warn_on_clamping(doc);
        build(doc)
    }
}

fn warn_on_clamping(doc: &DocumentRecord) {
    let (w, h) = (doc.width as f64, doc.height as f64);
    let polys = doc
        .regions
        .iter()
        .map(|r| (&r.id, &r.polygon[..]))
        .chain(doc.words.iter().map(|x| (&x.id, &x.polygon[..])))
        .chain(doc.lines.iter().map(|l| (&l.id, &l.bbox[..])));
    for (id, coords) in polys {
        if clamp_flat(coords, w, h).1 {
            log::warn!("{}: `{id}` extends past the page and was clamped", doc.image_id);
        }
    }
}

/// Parses a document from JSON text. `path` only labels errors.
pub fn parse_document(text: &str, path: &Path) -> Result<DocumentAnnotation, ModelError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|source| ModelError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
    let record: DocumentRecord =
        serde_path_to_error::deserialize(value).map_err(|e| ModelError::Schema {
            path: path.to_path_buf(),
            json_path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    DocumentAnnotation::try_from(&record).map_err(|violations| ModelError::Integrity {
        path: path.to_path_buf(),
        violations,
    })
}

pub fn load_document(path: impl AsRef<Path>) -> Result<DocumentAnnotation, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_document(&text, path)
}

/// Serializes any value with sorted object keys and a trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json::Value keeps object keys in a BTreeMap.
    let v = serde_json::to_value(value).expect("in-memory values always serialize");
    let mut s = serde_json::to_string(&v).expect("Value always serializes");
    s.push('\n');
    s
}

pub fn save_document(doc: &DocumentAnnotation, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let mut record = doc.to_record();
    for w in &mut record.words {
        w.text = nfc(&w.text);
    }
    fs::write(path, to_canonical_json(&record)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Pipeline artifacts

/// Kinds of intermediate artifacts, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    RawImage,
    GeoCorrected,
    IllumCorrected,
    Layout,
    Lines,
    Words,
    Recognized,
    Html,
}

impl ArtifactKind {
    /// Kinds stored as document JSON (as opposed to images or HTML).
    pub fn is_document(self) -> bool {
        matches!(
            self,
            ArtifactKind::Layout | ArtifactKind::Lines | ArtifactKind::Words | ArtifactKind::Recognized
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::RawImage => "raw_image",
            ArtifactKind::GeoCorrected => "geo_corrected",
            ArtifactKind::IllumCorrected => "illum_corrected",
            ArtifactKind::Layout => "layout",
            ArtifactKind::Lines => "lines",
            ArtifactKind::Words => "words",
            ArtifactKind::Recognized => "recognized",
            ArtifactKind::Html => "html",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageArtifact {
    pub kind: ArtifactKind,
    pub path: PathBuf,
    pub produced_by: String,
}
