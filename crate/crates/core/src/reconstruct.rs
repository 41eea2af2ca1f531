//! Rule-based page reconstruction: reading order, an intermediate component
//! list and a positioned `index.html`.
//!
//! Inside a text region, lines are read top to bottom and words left to right.
//! Regions themselves are ordered by the top-left corner of their bounding box,
//! which is adequate for single-column pages and knowingly naive for
//! multi-column ones. Tables are dropped.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::model::{to_canonical_json, DocumentAnnotation, LineInstance, RegionClass, WordInstance};

/// Font size used when there is nothing to fit.
pub const DEFAULT_FONT_PX: u32 = 16;
pub const MIN_FONT_PX: u32 = 6;
pub const MAX_FONT_PX: u32 = 72;
/// Average glyph advance as a fraction of the font size.
pub const CHAR_WIDTH_RATIO: f64 = 0.55;
pub const LINE_HEIGHT_RATIO: f64 = 1.25;

#[derive(Debug, Error)]
pub enum ReconstructError {
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn cmp_pos(ax: f64, ay: f64, bx: f64, by: f64) -> Ordering {
    ay.total_cmp(&by).then(ax.total_cmp(&bx))
}

/// Lines by `(y_min, x_min)`; the sort is stable.
pub fn order_lines<'a>(lines: &[&'a LineInstance]) -> Vec<&'a LineInstance> {
    let mut out = lines.to_vec();
    out.sort_by(|a, b| a.bbox.y_min.total_cmp(&b.bbox.y_min).then(a.bbox.x_min.total_cmp(&b.bbox.x_min)));
    out
}

/// Words by the `(x_min, y_min)` of their polygon's bounding box; stable.
pub fn order_words<'a>(words: &[&'a WordInstance]) -> Vec<&'a WordInstance> {
    let mut keyed: Vec<(BBox, &WordInstance)> = words.iter().map(|w| (w.polygon.bbox(), *w)).collect();
    keyed.sort_by(|(a, _), (b, _)| a.x_min.total_cmp(&b.x_min).then(a.y_min.total_cmp(&b.y_min)));
    keyed.into_iter().map(|(_, w)| w).collect()
}

/// Joins `words` in reading order: grouped by line, lines ordered with
/// [`order_lines`], words with [`order_words`]. Words with no (known) line form
/// one trailing line. Words are separated by a space and lines by `\n`; lines
/// without words are skipped.
pub fn words_text(lines: &[LineInstance], words: &[&WordInstance]) -> String {
    let line_by_id: HashMap<&str, &LineInstance> = lines.iter().map(|l| (l.id.as_str(), l)).collect();
    let mut grouped: HashMap<&str, Vec<&WordInstance>> = HashMap::new();
    let mut loose: Vec<&WordInstance> = Vec::new();
    for w in words {
        match w.line_id.as_deref().filter(|id| line_by_id.contains_key(id)) {
            Some(id) => grouped.entry(id).or_default().push(w),
            None => loose.push(w),
        }
    }
    let used: Vec<&LineInstance> = lines
        .iter()
        .filter(|l| grouped.contains_key(l.id.as_str()))
        .collect();
    let mut rows: Vec<String> = order_lines(&used)
        .into_iter()
        .map(|l| join_words(&grouped[l.id.as_str()]))
        .collect();
    if !loose.is_empty() {
        rows.push(join_words(&loose));
    }
    rows.join("\n")
}

fn join_words(words: &[&WordInstance]) -> String {
    order_words(words)
        .iter()
        .map(|w| w.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Reading-ordered text of one region of `doc`.
pub fn region_text(doc: &DocumentAnnotation, region_id: &str) -> Result<String, ReconstructError> {
    if doc.region(region_id).is_none() {
        return Err(ReconstructError::UnknownRegion(region_id.to_string()));
    }
    let words: Vec<&WordInstance> = doc.words_in_region(region_id).collect();
    Ok(words_text(&doc.lines, &words))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FontFit {
    pub size: u32,
    /// True when even the minimum size does not fit the box.
    pub overflow: bool,
}

/// Number of wrapped lines for `text` at `chars_per_line` columns, greedy
/// word wrap with hard breaks at `\n`. Words longer than a line are split.
fn wrapped_line_count(text: &str, chars_per_line: usize) -> usize {
    let mut total = 0;
    for hard in text.split('\n') {
        let mut lines = 1;
        let mut cur = 0usize;
        for word in hard.split_whitespace() {
            let len = word.chars().count();
            if cur > 0 && cur + 1 + len <= chars_per_line {
                cur += 1 + len;
                continue;
            }
            if cur > 0 {
                lines += 1;
            }
            let extra = (len.max(1) - 1) / chars_per_line;
            lines += extra;
            cur = len - extra * chars_per_line;
        }
        total += lines;
    }
    total
}

fn fits(text: &str, b: &BBox, size: u32) -> bool {
    let s = size as f64;
    let cpl = (b.width() / (CHAR_WIDTH_RATIO * s)).floor();
    if cpl < 1.0 {
        return false;
    }
    let lines = wrapped_line_count(text, cpl as usize);
    lines as f64 * LINE_HEIGHT_RATIO * s <= b.height()
}

/// Largest font size in `[6, 72]` px at which `text` fits `b` under the
/// fixed-advance wrap model. Empty text gets the 16 px default.
pub fn fit_font_size(text: &str, b: &BBox) -> FontFit {
    if text.trim().is_empty() {
        return FontFit {
            size: DEFAULT_FONT_PX,
            overflow: false,
        };
    }
    (MIN_FONT_PX..=MAX_FONT_PX)
        .rev()
        .find(|&s| fits(text, b, s))
        .map(|size| FontFit { size, overflow: false })
        .unwrap_or(FontFit {
            size: MIN_FONT_PX,
            overflow: true,
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateComponent {
    pub region_id: String,
    pub class: RegionClass,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub font: Option<FontFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedDocument {
    pub image_id: String,
    pub page_width: u32,
    pub page_height: u32,
    /// Reading order.
    pub components: Vec<IntermediateComponent>,
}

/// Relative path an image region's crop is expected at.
pub fn image_src_for(region_id: &str) -> String {
    format!("images/{region_id}.png")
}

pub fn build_intermediate(doc: &DocumentAnnotation) -> ReconstructedDocument {
    let (w, h) = (doc.width as f64, doc.height as f64);
    let mut regions: Vec<_> = doc
        .regions
        .iter()
        .filter(|r| r.class != RegionClass::Table)
        .map(|r| (r.polygon.bbox().clamped(w, h), r))
        .collect();
    regions.sort_by(|(a, _), (b, _)| cmp_pos(a.x_min, a.y_min, b.x_min, b.y_min));

    let components = regions
        .into_iter()
        .map(|(bbox, r)| {
            if r.class.is_text() {
                let words: Vec<&WordInstance> = doc.words_in_region(&r.id).collect();
                let text = words_text(&doc.lines, &words);
                IntermediateComponent {
                    region_id: r.id.clone(),
                    class: r.class,
                    bbox,
                    font: Some(fit_font_size(&text, &bbox)),
                    text: Some(text),
                    image_src: None,
                }
            } else {
                IntermediateComponent {
                    region_id: r.id.clone(),
                    class: r.class,
                    bbox,
                    text: None,
                    image_src: Some(image_src_for(&r.id)),
                    font: None,
                }
            }
        })
        .collect();
    ReconstructedDocument {
        image_id: doc.image_id.clone(),
        page_width: doc.width,
        page_height: doc.height,
        components,
    }
}

/// Escapes `&`, `<`, `>` and `"` so the result is safe in text and
/// double-quoted attributes.
pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

fn box_style(b: &BBox) -> String {
    format!(
        "left:{}px;top:{}px;width:{}px;height:{}px",
        b.x_min,
        b.y_min,
        b.width(),
        b.height()
    )
}

const STYLE: &str = "\
body{margin:0;background:#ddd}
.page{position:relative;margin:0 auto;background:#fff;overflow:hidden}
.region{position:absolute;margin:0;overflow:hidden;box-sizing:border-box}
.text{white-space:pre-wrap;line-height:1.25;font-family:sans-serif}";

/// Renders the page as HTML. The output depends only on `rd`.
pub fn render_html(rd: &ReconstructedDocument) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\" />\n");
    let _ = writeln!(out, "<title>{}</title>", escape_html(&rd.image_id));
    let _ = writeln!(out, "<style>\n{STYLE}\n</style>\n</head>\n<body>");
    let _ = writeln!(
        out,
        "<div class=\"page\" style=\"width:{}px;height:{}px\">",
        rd.page_width, rd.page_height
    );
    for c in &rd.components {
        let id = escape_html(&c.region_id);
        let style = box_style(&c.bbox);
        match (&c.text, &c.image_src) {
            (Some(text), _) => {
                let size = c.font.map_or(DEFAULT_FONT_PX, |f| f.size);
                let _ = writeln!(
                    out,
                    "<div class=\"region text {}\" data-region=\"{id}\" style=\"{style};font-size:{size}px\">{}</div>",
                    c.class,
                    escape_html(text)
                );
            }
            (None, Some(src)) => {
                let _ = writeln!(
                    out,
                    "<img class=\"region {}\" data-region=\"{id}\" src=\"{}\" alt=\"\" style=\"{style}\" />",
                    c.class,
                    escape_html(src)
                );
            }
            (None, None) => {
                let _ = writeln!(out, "<div class=\"region {}\" data-region=\"{id}\" style=\"{style}\"></div>", c.class);
            }
        }
    }
    out.push_str("</div>\n</body>\n</html>\n");
    out
}

/// Writes `index.html` into `out_dir` and returns its path.
pub fn emit_html(rd: &ReconstructedDocument, out_dir: impl AsRef<Path>) -> Result<PathBuf, ReconstructError> {
    let out_dir = out_dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReconstructError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let path = out_dir.join("index.html");
    fs::write(&path, render_html(rd)).map_err(io(&path))?;
    Ok(path)
}

/// Writes the `intermediate.json` sidecar next to `index.html`.
pub fn write_intermediate(rd: &ReconstructedDocument, out_dir: impl AsRef<Path>) -> Result<PathBuf, ReconstructError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|source| ReconstructError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let path = out_dir.join("intermediate.json");
    fs::write(&path, to_canonical_json(rd)).map_err(|source| ReconstructError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
