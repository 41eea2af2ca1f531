//! Synthetic annotated pages and controlled prediction perturbations.
//!
//! [`generate_document`] lays out text regions on a grid with axis-aligned
//! word boxes. [`perturb`] derives a prediction from such a page and records
//! exactly what it did (words dropped, inserted, corrupted; regions split) in
//! an [`ExpectedOutcome`]. The outcome's scores are computed from that
//! bookkeeping alone, so comparing them with a real evaluation run
//! ([`oracle_check`]) tests the whole matching and scoring path.
//!
//! The bookkeeping relies on the generator's list order: lines of a region
//! listed top to bottom and words of a line left to right. Perturbation keeps
//! that order intact (jitter is resampled whenever it would reorder words).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{polygon_iou, BBox, Polygon};
use crate::matching::match_documents;
use crate::metrics::{levenshtein, text_level_details, tokens_of, word_level_scores, WordLevelScore};
use crate::model::{nfc, DocumentAnnotation, LayoutRegion, LineInstance, RegionClass, WordInstance};

const PAGE_MARGIN: f64 = 10.0;
const REGION_GAP: f64 = 8.0;
const REGION_PADDING: f64 = 4.0;
const MIN_LINE_PX: f64 = 6.0;
const MIN_WORD_PX: f64 = 6.0;
const MIN_SPURIOUS_PX: f64 = 3.0;
const JITTER_ATTEMPTS: usize = 32;
const SPLIT_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid `{field}`: {message}")]
    InvalidSpec { field: &'static str, message: String },
    #[error("layout overflow: {0}")]
    LayoutOverflow(String),
}

fn invalid(field: &'static str, message: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub image_id: String,
    pub domain: String,
    pub page_width: u32,
    pub page_height: u32,
    /// Number of text regions (paragraphs and text boxes).
    pub regions: usize,
    pub image_regions: usize,
    pub table_regions: usize,
    /// Inclusive `[min, max]`.
    pub lines_per_region: [usize; 2],
    /// Inclusive `[min, max]`.
    pub words_per_line: [usize; 2],
    /// Token list; `None` uses generated Latin and Bengali gibberish.
    pub vocabulary: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_id: "synth".into(),
            domain: "Synthetic".into(),
            page_width: 1240,
            page_height: 1754,
            regions: 4,
            image_regions: 0,
            table_regions: 0,
            lines_per_region: [2, 6],
            words_per_line: [3, 8],
            vocabulary: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.page_width == 0 || self.page_height == 0 {
            return Err(invalid("page_width", "page size must be positive"));
        }
        if self.regions == 0 {
            return Err(invalid("regions", "at least one text region is required"));
        }
        for (field, [lo, hi]) in [
            ("lines_per_region", self.lines_per_region),
            ("words_per_line", self.words_per_line),
        ] {
            if lo == 0 || lo > hi {
                return Err(invalid(field, format!("need 1 <= min <= max, got [{lo}, {hi}]")));
            }
        }
        if let Some(v) = &self.vocabulary {
            if v.is_empty() {
                return Err(invalid("vocabulary", "must not be empty"));
            }
            if let Some(bad) = v.iter().find(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
                return Err(invalid("vocabulary", format!("token {bad:?} is empty or contains whitespace")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Probability that a ground-truth word is missing from the prediction.
    pub p_drop: f64,
    /// Expected number of spurious words per text region (Poisson mean).
    pub p_spurious: f64,
    /// Per-character substitution probability.
    pub p_char_sub: f64,
    /// Maximum word box offset as a fraction of the box size.
    pub box_jitter: f64,
    /// Probability that a text region is predicted as two overlapping parts.
    pub region_split_prob: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            p_drop: 0.0,
            p_spurious: 0.0,
            p_char_sub: 0.0,
            box_jitter: 0.0,
            region_split_prob: 0.0,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (field, v) in [
            ("p_drop", self.p_drop),
            ("p_char_sub", self.p_char_sub),
            ("region_split_prob", self.region_split_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(field, format!("{v} is not a probability")));
            }
        }
        if !(self.p_spurious >= 0.0 && self.p_spurious.is_finite()) {
            return Err(invalid("p_spurious", "must be a finite non-negative rate"));
        }
        if !(0.0..0.5).contains(&self.box_jitter) {
            return Err(invalid("box_jitter", "must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Bengali consonants with assigned code points in U+0995..=U+09B9.
fn bengali_consonants() -> Vec<char> {
    ('\u{0995}'..='\u{09B9}')
        .filter(|c| !matches!(*c, '\u{09A9}' | '\u{09B1}' | '\u{09B3}' | '\u{09B4}' | '\u{09B5}'))
        .collect()
}

/// Vowel signs, including two decomposed sequences that NFC composes into
/// U+09CB and U+09CC.
const BENGALI_VOWEL_SIGNS: [&str; 9] = [
    "\u{09BE}",
    "\u{09BF}",
    "\u{09C0}",
    "\u{09C1}",
    "\u{09C2}",
    "\u{09C7}",
    "\u{09C8}",
    "\u{09C7}\u{09BE}",
    "\u{09C7}\u{09D7}",
];

fn gibberish_token(rng: &mut ChaCha8Rng, consonants: &[char]) -> String {
    if rng.gen_bool(0.5) {
        let n = rng.gen_range(2..=7);
        (0..n).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
    } else {
        let mut s = String::new();
        for _ in 0..rng.gen_range(1..=3) {
            s.push(*consonants.choose(rng).unwrap());
            if rng.gen_bool(0.2) {
                s.push('\u{09CD}');
                s.push(*consonants.choose(rng).unwrap());
            }
            if rng.gen_bool(0.6) {
                s.push_str(BENGALI_VOWEL_SIGNS.choose(rng).unwrap());
            }
        }
        s
    }
}

/// Characters used for substitutions. Base letters only, so a substitution
/// never composes with its neighbours under NFC.
fn substitution_alphabet() -> Vec<char> {
    let mut v: Vec<char> = ('a'..='z').collect();
    v.extend(bengali_consonants());
    v
}

// ---------------------------------------------------------------------------
// Generation

struct Grid {
    cell_w: f64,
    cell_h: f64,
    cols: usize,
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
    Polygon::rect(x0, y0, x1, y1).expect("synthetic boxes are checked against minimum sizes")
}

/// Geometry shared by every text region of a generated page.
struct TextLayout {
    line_pitch: f64,
    line_height: f64,
    slot_width: f64,
}

impl TextLayout {
    fn new(spec: &SynthSpec, region_w: f64, region_h: f64) -> Result<Self, SynthError> {
        let lines_max = spec.lines_per_region[1] as f64;
        let words_max = spec.words_per_line[1] as f64;
        // One extra pitch at the bottom is reserved for spurious words.
        let line_pitch = (region_h - 2.0 * REGION_PADDING) / (lines_max + 1.0);
        let line_height = 0.7 * line_pitch;
        let slot_width = (region_w - 2.0 * REGION_PADDING) / words_max;
        if line_height < MIN_LINE_PX {
            return Err(SynthError::LayoutOverflow(format!(
                "{} lines need {:.1} px lines in a {region_h:.1} px region",
                spec.lines_per_region[1], line_height
            )));
        }
        if 0.6 * slot_width < MIN_WORD_PX {
            return Err(SynthError::LayoutOverflow(format!(
                "{} words per line do not fit a {region_w:.1} px region",
                spec.words_per_line[1]
            )));
        }
        Ok(Self {
            line_pitch,
            line_height,
            slot_width,
        })
    }
}

/// Generates a page that passes validation; deterministic in `spec.seed`.
pub fn generate_document(spec: &SynthSpec) -> Result<DocumentAnnotation, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (pw, ph) = (spec.page_width as f64, spec.page_height as f64);

    let cells = spec.regions + spec.image_regions + spec.table_regions;
    let cols = (cells as f64).sqrt().ceil() as usize;
    let rows = cells.div_ceil(cols);
    let grid = Grid {
        cell_w: (pw - 2.0 * PAGE_MARGIN) / cols as f64,
        cell_h: (ph - 2.0 * PAGE_MARGIN) / rows as f64,
        cols,
    };
    let region_w = grid.cell_w - 2.0 * REGION_GAP;
    let region_h = grid.cell_h - 2.0 * REGION_GAP;
    if region_w < 2.0 * MIN_WORD_PX || region_h < 2.0 * MIN_LINE_PX {
        return Err(SynthError::LayoutOverflow(format!(
            "{cells} regions do not fit a {}x{} page",
            spec.page_width, spec.page_height
        )));
    }
    let layout = TextLayout::new(spec, region_w, region_h)?;

    let mut kinds: Vec<Option<RegionClass>> = std::iter::repeat_n(None, spec.regions)
        .chain(std::iter::repeat_n(Some(RegionClass::Image), spec.image_regions))
        .chain(std::iter::repeat_n(Some(RegionClass::Table), spec.table_regions))
        .collect();
    kinds.shuffle(&mut rng);

    let consonants = bengali_consonants();
    let mut doc = DocumentAnnotation {
        image_id: spec.image_id.clone(),
        width: spec.page_width,
        height: spec.page_height,
        domain: spec.domain.clone(),
        regions: Vec::new(),
        lines: Vec::new(),
        words: Vec::new(),
    };

    for (cell, kind) in kinds.into_iter().enumerate() {
        let (row, col) = (cell / grid.cols, cell % grid.cols);
        let x0 = PAGE_MARGIN + col as f64 * grid.cell_w + REGION_GAP;
        let y0 = PAGE_MARGIN + row as f64 * grid.cell_h + REGION_GAP;
        let region_id = format!("r{cell}");
        let class = kind.unwrap_or_else(|| {
            if rng.gen_bool(0.5) {
                RegionClass::Paragraph
            } else {
                RegionClass::TextBox
            }
        });
        doc.regions.push(LayoutRegion {
            id: region_id.clone(),
            class,
            polygon: rect(x0, y0, x0 + region_w, y0 + region_h),
        });
        if !class.is_text() {
            continue;
        }

        let n_lines = rng.gen_range(spec.lines_per_region[0]..=spec.lines_per_region[1]);
        for li in 0..n_lines {
            let line_id = format!("{region_id}-l{li}");
            let ly = y0 + REGION_PADDING + li as f64 * layout.line_pitch;
            let n_words = rng.gen_range(spec.words_per_line[0]..=spec.words_per_line[1]);
            let mut line_x1 = x0 + REGION_PADDING;
            for wi in 0..n_words {
                let wx = x0 + REGION_PADDING + wi as f64 * layout.slot_width;
                let ww = layout.slot_width * rng.gen_range(0.6..0.9);
                let text = match &spec.vocabulary {
                    Some(v) => v.choose(&mut rng).unwrap().clone(),
                    None => gibberish_token(&mut rng, &consonants),
                };
                doc.words.push(WordInstance {
                    id: format!("{line_id}-w{wi}"),
                    region_id: region_id.clone(),
                    line_id: Some(line_id.clone()),
                    polygon: rect(wx, ly, wx + ww, ly + layout.line_height),
                    text: nfc(&text),
                });
                line_x1 = wx + ww;
            }
            doc.lines.push(LineInstance {
                id: line_id,
                region_id: region_id.clone(),
                bbox: BBox::new(x0 + REGION_PADDING, ly, line_x1, ly + layout.line_height)
                    .expect("line box is ordered"),
            });
        }
    }
    debug_assert!(doc.validate().is_empty());
    Ok(doc)
}

// ---------------------------------------------------------------------------
// Perturbation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub gt_region_id: String,
    pub parts: Vec<String>,
    /// IOU of each part with the ground-truth region, verified at construction.
    pub ious: Vec<f64>,
    /// Whether each part is expected to map to the ground-truth region.
    pub matched: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionExpectation {
    pub gt_region_id: String,
    pub matched: bool,
    pub gt_text: String,
    pub pred_text: String,
}

/// Realized perturbation counts and the scores they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    pub image_id: String,
    pub gt_words: usize,
    pub pred_words: usize,
    pub dropped: usize,
    pub spurious: usize,
    /// Kept words whose text was changed by character substitution.
    pub substituted: usize,
    pub jittered: usize,
    pub splits: Vec<SplitRecord>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub regions: Vec<RegionExpectation>,
    pub cer: f64,
    pub wer: f64,
}

impl ExpectedOutcome {
    pub fn word_level(&self) -> WordLevelScore {
        WordLevelScore::from_counts(self.tp, self.fp, self.fn_)
    }

    fn finish(&mut self) {
        self.tp = self.gt_words - self.dropped - self.substituted;
        self.fp = self.spurious + self.substituted;
        self.fn_ = self.dropped + self.substituted;
        let (mut ce, mut cw, mut te, mut tw) = (0usize, 0usize, 0usize, 0usize);
        for r in &self.regions {
            let (g, p): (Vec<char>, Vec<char>) = (r.gt_text.chars().collect(), r.pred_text.chars().collect());
            ce += levenshtein(&g, &p);
            cw += g.len().max(1);
            let (gt, pt) = (tokens_of(&r.gt_text), tokens_of(&r.pred_text));
            te += levenshtein(&gt, &pt);
            tw += gt.len().max(1);
        }
        self.cer = ce as f64 / cw.max(1) as f64;
        self.wer = te as f64 / tw.max(1) as f64;
    }
}

fn substitute(text: &str, p: f64, alphabet: &[char], rng: &mut ChaCha8Rng) -> String {
    if p == 0.0 {
        return text.to_string();
    }
    let out: String = text
        .chars()
        .map(|c| {
            if rng.gen_bool(p) {
                loop {
                    let r = *alphabet.choose(rng).unwrap();
                    if r != c {
                        break r;
                    }
                }
            } else {
                c
            }
        })
        .collect();
    nfc(&out)
}

/// Offsets `word` by up to `jitter` of its size, keeping IOU with the original
/// strictly above 0.5, the box on the page and `x_min` beyond `min_x`.
/// Falls back to the original box after repeated failures.
fn jitter_box(
    word: &Polygon,
    jitter: f64,
    min_x: f64,
    page: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Polygon {
    let b = word.bbox();
    if jitter == 0.0 {
        return word.clone();
    }
    for _ in 0..JITTER_ATTEMPTS {
        let dx = rng.gen_range(-jitter..=jitter) * b.width();
        let dy = rng.gen_range(-jitter..=jitter) * b.height();
        let moved = BBox {
            x_min: b.x_min + dx,
            y_min: b.y_min + dy,
            x_max: b.x_max + dx,
            y_max: b.y_max + dy,
        };
        if moved.x_min <= min_x || moved.x_min < 0.0 || moved.y_min < 0.0 || moved.x_max > page.0 || moved.y_max > page.1 {
            continue;
        }
        let Ok(p) = Polygon::from_bbox(&moved) else { continue };
        if polygon_iou(word, &p) > 0.5 {
            return p;
        }
    }
    word.clone()
}

fn join_lines(lines: &[Vec<String>]) -> String {
    lines
        .iter()
        .filter(|l| !l.is_empty())
        .map(|l| l.join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Builds the two overlapping parts of a split region. Part `a` spans from the
/// top down through line `k - 1`, part `b` from line `k` to the bottom, and each
/// covers more than half of the region so both map to it.
fn split_parts(
    region: &Polygon,
    lines: &[&LineInstance],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(Polygon, Polygon)> {
    let rb = region.bbox();
    let h = rb.height();
    let need_a = (lines[k - 1].bbox.y_max - rb.y_min) / h;
    let need_b = (rb.y_max - lines[k].bbox.y_min) / h;
    let lo_a = need_a.clamp(0.55, 1.0);
    let lo_b = need_b.clamp(0.55, 1.0);
    let fa = rng.gen_range(lo_a..=1.0f64.max(lo_a));
    let fb = rng.gen_range(lo_b..=1.0f64.max(lo_b));
    let a = Polygon::rect(rb.x_min, rb.y_min, rb.x_max, rb.y_min + fa * h).ok()?;
    let b = Polygon::rect(rb.x_min, rb.y_max - fb * h, rb.x_max, rb.y_max).ok()?;
    Some((a, b))
}

/// Derives a prediction from `gt` and the exact outcome it should score.
///
/// `gt` must come from [`generate_document`] (see the module docs).
pub fn perturb(
    gt: &DocumentAnnotation,
    spec: &PerturbationSpec,
) -> Result<(DocumentAnnotation, ExpectedOutcome), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let alphabet = substitution_alphabet();
    let page = (gt.width as f64, gt.height as f64);
    let spurious_dist = if spec.p_spurious > 0.0 {
        Some(Poisson::new(spec.p_spurious).map_err(|e| invalid("p_spurious", e.to_string()))?)
    } else {
        None
    };

    let mut pred = DocumentAnnotation {
        image_id: gt.image_id.clone(),
        width: gt.width,
        height: gt.height,
        domain: gt.domain.clone(),
        regions: Vec::new(),
        lines: Vec::new(),
        words: Vec::new(),
    };
    let mut out = ExpectedOutcome {
        image_id: gt.image_id.clone(),
        gt_words: gt.text_words().count(),
        pred_words: 0,
        dropped: 0,
        spurious: 0,
        substituted: 0,
        jittered: 0,
        splits: Vec::new(),
        tp: 0,
        fp: 0,
        fn_: 0,
        regions: Vec::new(),
        cer: 0.0,
        wer: 0.0,
    };
    let gt_text_regions: Vec<&LayoutRegion> = gt.text_regions().collect();

    for region in &gt.regions {
        if !region.class.is_text() {
            pred.regions.push(region.clone());
            continue;
        }
        let lines: Vec<&LineInstance> = gt.lines.iter().filter(|l| l.region_id == region.id).collect();

        // Region split, verified against every ground-truth text region.
        let mut part_of_line: Vec<&str> = vec![region.id.as_str(); lines.len()];
        let mut part_ids = vec![region.id.clone()];
        let mut parts = vec![region.polygon.clone()];
        let (split_id_a, split_id_b) = (format!("{}a", region.id), format!("{}b", region.id));
        if lines.len() >= 2 && spec.region_split_prob > 0.0 && rng.gen_bool(spec.region_split_prob) {
            let k = rng.gen_range(1..lines.len());
            for _ in 0..SPLIT_ATTEMPTS {
                let Some((a, b)) = split_parts(&region.polygon, &lines, k, &mut rng) else { continue };
                let ious = [polygon_iou(&a, &region.polygon), polygon_iou(&b, &region.polygon)];
                let best_elsewhere = |p: &Polygon| {
                    gt_text_regions
                        .iter()
                        .filter(|g| g.id != region.id)
                        .map(|g| polygon_iou(&g.polygon, p))
                        .fold(0.0, f64::max)
                };
                let matched: Vec<bool> = [&a, &b]
                    .iter()
                    .zip(ious)
                    .map(|(p, iou)| iou > 0.5 && iou > best_elsewhere(p))
                    .collect();
                if matched.iter().all(|m| *m) {
                    out.splits.push(SplitRecord {
                        gt_region_id: region.id.clone(),
                        parts: vec![split_id_a.clone(), split_id_b.clone()],
                        ious: ious.to_vec(),
                        matched,
                    });
                    for (i, slot) in part_of_line.iter_mut().enumerate() {
                        *slot = if i < k { &split_id_a } else { &split_id_b };
                    }
                    part_ids = vec![split_id_a.clone(), split_id_b.clone()];
                    parts = vec![a, b];
                    break;
                }
            }
        }
        for (id, polygon) in part_ids.iter().zip(parts) {
            pred.regions.push(LayoutRegion {
                id: id.clone(),
                class: region.class,
                polygon,
            });
        }
        let last_part = part_ids.last().unwrap().clone();

        let mut gt_rows: Vec<Vec<String>> = Vec::new();
        let mut pred_rows: Vec<Vec<String>> = Vec::new();
        for (li, line) in lines.iter().enumerate() {
            let part = part_of_line[li].to_string();
            pred.lines.push(LineInstance {
                id: line.id.clone(),
                region_id: part.clone(),
                bbox: line.bbox,
            });
            let mut gt_row = Vec::new();
            let mut pred_row = Vec::new();
            let mut min_x = f64::NEG_INFINITY;
            for w in gt.words.iter().filter(|w| w.line_id.as_deref() == Some(line.id.as_str())) {
                gt_row.push(w.text.clone());
                if spec.p_drop > 0.0 && rng.gen_bool(spec.p_drop) {
                    out.dropped += 1;
                    continue;
                }
                let text = substitute(&w.text, spec.p_char_sub, &alphabet, &mut rng);
                if text != w.text {
                    out.substituted += 1;
                }
                let polygon = jitter_box(&w.polygon, spec.box_jitter, min_x, page, &mut rng);
                if polygon != w.polygon {
                    out.jittered += 1;
                }
                min_x = polygon.bbox().x_min;
                pred_row.push(text.clone());
                pred.words.push(WordInstance {
                    id: w.id.clone(),
                    region_id: part.clone(),
                    line_id: Some(line.id.clone()),
                    polygon,
                    text,
                });
            }
            gt_rows.push(gt_row);
            pred_rows.push(pred_row);
        }

        // Spurious words go in the reserved band under the last line, with no
        // line assignment, left to right in creation order.
        if let Some(dist) = &spurious_dist {
            let rb = region.polygon.bbox();
            let band_top = lines.last().map_or(rb.y_min, |l| l.bbox.y_max) + 1.0;
            let band_bottom = rb.y_max - 1.0;
            let band_w = rb.width() - 2.0 * REGION_PADDING;
            let cap = (band_w / (2.0 * MIN_SPURIOUS_PX)).floor() as usize;
            let n = (dist.sample(&mut rng) as usize).min(cap);
            if n > 0 && band_bottom - band_top >= MIN_SPURIOUS_PX {
                let slot = band_w / n as f64;
                let mut row = Vec::new();
                for s in 0..n {
                    let x = rb.x_min + REGION_PADDING + s as f64 * slot;
                    let text = nfc(&gibberish_token(&mut rng, &alphabet_consonants(&alphabet)));
                    row.push(text.clone());
                    pred.words.push(WordInstance {
                        id: format!("{}-s{s}", region.id),
                        region_id: last_part.clone(),
                        line_id: None,
                        polygon: rect(x, band_top, x + 0.5 * slot, band_bottom),
                        text,
                    });
                }
                out.spurious += n;
                pred_rows.push(row);
            }
        }

        out.regions.push(RegionExpectation {
            gt_region_id: region.id.clone(),
            matched: true,
            gt_text: join_lines(&gt_rows),
            pred_text: join_lines(&pred_rows),
        });
    }

    out.pred_words = pred.text_words().count();
    out.finish();
    debug_assert!(pred.validate().is_empty(), "{:?}", pred.validate());
    Ok((pred, out))
}

fn alphabet_consonants(alphabet: &[char]) -> Vec<char> {
    alphabet.iter().copied().filter(|c| !c.is_ascii()).collect()
}

/// One quantity where the evaluation disagrees with the bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub quantity: String,
    pub expected: String,
    pub actual: String,
}

/// Tolerance for CER/WER comparisons against the bookkeeping.
pub const SCORE_TOLERANCE: f64 = 1e-12;

/// Scores `pred` against `gt` and lists every disagreement with `expected`.
pub fn oracle_check(
    gt: &DocumentAnnotation,
    pred: &DocumentAnnotation,
    expected: &ExpectedOutcome,
) -> Vec<Discrepancy> {
    let mut out = Vec::new();
    let mut check = |quantity: String, e: String, a: String| {
        if e != a {
            out.push(Discrepancy {
                quantity,
                expected: e,
                actual: a,
            });
        }
    };
    let m = match_documents(gt, pred);
    let wl = word_level_scores(&m, gt, pred);
    check("tp".into(), expected.tp.to_string(), wl.tp.to_string());
    check("fp".into(), expected.fp.to_string(), wl.fp.to_string());
    check("fn".into(), expected.fn_.to_string(), wl.fn_.to_string());
    check("gt_words".into(), expected.gt_words.to_string(), (wl.tp + wl.fn_).to_string());
    check("pred_words".into(), expected.pred_words.to_string(), (wl.tp + wl.fp).to_string());

    for split in &expected.splits {
        let mapped = m.region_mapping.entries.get(&split.gt_region_id);
        for (part, want) in split.parts.iter().zip(&split.matched) {
            let got = mapped.is_some_and(|v| v.contains(part));
            check(format!("split.{part}.matched"), want.to_string(), got.to_string());
        }
    }

    match text_level_details(&m, gt, pred) {
        Ok(details) => {
            check(
                "regions".into(),
                expected.regions.len().to_string(),
                details.len().to_string(),
            );
            for (e, a) in expected.regions.iter().zip(&details) {
                let id = &e.gt_region_id;
                check(format!("region.{id}.id"), id.clone(), a.gt_region_id.clone());
                check(format!("region.{id}.matched"), e.matched.to_string(), a.matched.to_string());
                check(format!("region.{id}.gt_text"), e.gt_text.clone(), a.gt_text.clone());
                check(format!("region.{id}.pred_text"), e.pred_text.clone(), a.pred_text.clone());
            }
            let tl = crate::metrics::TextLevelScore::from_regions(&details);
            for (name, e, a) in [("cer", expected.cer, tl.cer), ("wer", expected.wer, tl.wer)] {
                if (e - a).abs() > SCORE_TOLERANCE {
                    check(name.into(), format!("{e:?}"), format!("{a:?}"));
                }
            }
        }
        Err(e) => check("text_level".into(), "scores".into(), e.to_string()),
    }
    out
}
