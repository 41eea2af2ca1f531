//! Edit-distance string metrics and the word-level / text-level system scores.
//!
//! Word level: a true positive is an aligned word pair whose NFC texts are
//! identical. Every other predicted word in a text region is a false positive
//! and every other ground-truth word a false negative.
//!
//! Text level: each ground-truth text region is compared with the reading-order
//! text of its pooled predicted words. A region with no matched prediction is
//! compared with the empty string. Document CER is total character edits over
//! total ground-truth characters, which is the length-weighted mean of the
//! per-region CERs; WER likewise with whitespace tokens.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matching::{pool_predicted_words, MatchResult};
use crate::model::DocumentAnnotation;
use crate::reconstruct::{region_text, words_text};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("document `{0}` has no ground-truth text region")]
    EmptyDocument(String),
}

/// The character unit for CER: Unicode scalar values of NFC text.
pub fn chars_of(s: &str) -> Vec<char> {
    s.chars().collect()
}

/// The token unit for WER: maximal non-whitespace runs.
pub fn tokens_of(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Unit-cost Levenshtein distance over arbitrary symbols, two-row DP.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn edit_distance(a: &str, b: &str) -> usize {
    levenshtein(&chars_of(a), &chars_of(b))
}

/// Character error rate; not clipped, so it exceeds 1 for long insertions.
pub fn cer(gt: &str, pred: &str) -> f64 {
    let g = chars_of(gt);
    levenshtein(&g, &chars_of(pred)) as f64 / g.len().max(1) as f64
}

/// Word error rate over whitespace tokens; not clipped.
pub fn wer(gt: &str, pred: &str) -> f64 {
    let g = tokens_of(gt);
    levenshtein(&g, &tokens_of(pred)) as f64 / g.len().max(1) as f64
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordLevelScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl WordLevelScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f: f_measure(precision, recall),
        }
    }
}

pub fn word_level_scores(
    m: &MatchResult,
    gt: &DocumentAnnotation,
    pred: &DocumentAnnotation,
) -> WordLevelScore {
    let gt_text: HashSet<&str> = gt.text_words().map(|w| w.id.as_str()).collect();
    let pred_text: HashSet<&str> = pred.text_words().map(|w| w.id.as_str()).collect();
    let gt_words: std::collections::HashMap<&str, &str> =
        gt.words.iter().map(|w| (w.id.as_str(), w.text.as_str())).collect();
    let pred_words: std::collections::HashMap<&str, &str> =
        pred.words.iter().map(|w| (w.id.as_str(), w.text.as_str())).collect();

    let tp = m
        .per_region_alignments
        .values()
        .flat_map(|a| &a.pairs)
        .filter(|p| gt_words.get(p.gt_word_id.as_str()) == pred_words.get(p.pred_word_id.as_str()))
        .count();
    WordLevelScore::from_counts(tp, pred_text.len() - tp, gt_text.len() - tp)
}

/// Comparison detail for one ground-truth text region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTextScore {
    pub gt_region_id: String,
    pub matched: bool,
    pub gt_text: String,
    pub pred_text: String,
    pub char_edits: usize,
    pub gt_chars: usize,
    pub token_edits: usize,
    pub gt_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextLevelScore {
    pub cer: f64,
    pub wer: f64,
    pub char_weight: usize,
    pub word_weight: usize,
}

impl TextLevelScore {
    /// Length-weighted aggregate of per-region comparisons. Regions with an
    /// empty ground truth weigh 1, matching the per-region denominator.
    pub fn from_regions(regions: &[RegionTextScore]) -> Self {
        let char_edits: usize = regions.iter().map(|r| r.char_edits).sum();
        let token_edits: usize = regions.iter().map(|r| r.token_edits).sum();
        let char_weight: usize = regions.iter().map(|r| r.gt_chars.max(1)).sum();
        let word_weight: usize = regions.iter().map(|r| r.gt_tokens.max(1)).sum();
        Self {
            cer: char_edits as f64 / char_weight as f64,
            wer: token_edits as f64 / word_weight as f64,
            char_weight,
            word_weight,
        }
    }
}

impl RegionTextScore {
    pub fn compare(gt_region_id: &str, matched: bool, gt_text: String, pred_text: String) -> Self {
        let (gc, pc) = (chars_of(&gt_text), chars_of(&pred_text));
        let (gtok, ptok) = (tokens_of(&gt_text), tokens_of(&pred_text));
        Self {
            gt_region_id: gt_region_id.to_string(),
            matched,
            char_edits: levenshtein(&gc, &pc),
            gt_chars: gc.len(),
            token_edits: levenshtein(&gtok, &ptok),
            gt_tokens: gtok.len(),
            gt_text,
            pred_text,
        }
    }

    pub fn cer(&self) -> f64 {
        self.char_edits as f64 / self.gt_chars.max(1) as f64
    }

    pub fn wer(&self) -> f64 {
        self.token_edits as f64 / self.gt_tokens.max(1) as f64
    }
}

/// Per-region text comparisons in ground-truth region order.
pub fn text_level_details(
    m: &MatchResult,
    gt: &DocumentAnnotation,
    pred: &DocumentAnnotation,
) -> Result<Vec<RegionTextScore>, MetricsError> {
    let pools = pool_predicted_words(&m.region_mapping, pred);
    let details: Vec<RegionTextScore> = gt
        .text_regions()
        .map(|r| {
            let gt_text = region_text(gt, &r.id).expect("region comes from the document");
            match pools.get(&r.id) {
                Some(pool) => RegionTextScore::compare(&r.id, true, gt_text, words_text(&pred.lines, pool)),
                None => RegionTextScore::compare(&r.id, false, gt_text, String::new()),
            }
        })
        .collect();
    if details.is_empty() {
        return Err(MetricsError::EmptyDocument(gt.image_id.clone()));
    }
    Ok(details)
}

pub fn text_level_scores(
    m: &MatchResult,
    gt: &DocumentAnnotation,
    pred: &DocumentAnnotation,
) -> Result<TextLevelScore, MetricsError> {
    Ok(TextLevelScore::from_regions(&text_level_details(m, gt, pred)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentScore {
    pub image_id: String,
    pub domain: String,
    pub word_level: WordLevelScore,
    pub text_level: TextLevelScore,
}

/// Matches `pred` against `gt` and computes both score families.
pub fn score_document(
    gt: &DocumentAnnotation,
    pred: &DocumentAnnotation,
) -> Result<DocumentScore, MetricsError> {
    let m = crate::matching::match_documents(gt, pred);
    Ok(DocumentScore {
        image_id: gt.image_id.clone(),
        domain: gt.domain.clone(),
        word_level: word_level_scores(&m, gt, pred),
        text_level: text_level_scores(&m, gt, pred)?,
    })
}
