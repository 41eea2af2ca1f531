//! Region mapping, word pooling and word alignment between a ground-truth
//! document and a prediction.
//!
//! Every predicted text region is mapped to the ground-truth text region it
//! overlaps most, provided that IOU is strictly above 0.5. All predicted regions
//! mapped to one ground-truth region contribute their words to a single pool,
//! and the pool is aligned one-to-one with the ground-truth words of that
//! region by greedy maximum IOU.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::geometry::polygon_iou;
use crate::model::{DocumentAnnotation, LayoutRegion, WordInstance};

/// Both regions and words must overlap strictly more than this to match.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RegionMapping {
    /// Ground-truth region id → predicted region ids, in prediction order.
    pub entries: BTreeMap<String, Vec<String>>,
    pub unmatched_gt: Vec<String>,
    pub unmatched_pred: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordPair {
    pub gt_word_id: String,
    pub pred_word_id: String,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WordAlignment {
    pub pairs: Vec<WordPair>,
    pub unmatched_gt_words: Vec<String>,
    pub unmatched_pred_words: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MatchResult {
    pub region_mapping: RegionMapping,
    pub per_region_alignments: BTreeMap<String, WordAlignment>,
}

/// Maps each predicted region to its maximum-IOU ground-truth region when that
/// IOU exceeds [`IOU_THRESHOLD`]. Ties go to the earlier ground-truth region.
///
/// Callers pass text regions only; class labels are otherwise ignored.
pub fn match_regions(gt: &[LayoutRegion], pred: &[LayoutRegion]) -> RegionMapping {
    let gt_boxes: Vec<_> = gt.iter().map(|g| g.polygon.bbox()).collect();
    let mut mapping = RegionMapping::default();
    for p in pred {
        let pb = p.polygon.bbox();
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if !pb.overlaps(&gt_boxes[gi]) {
                continue;
            }
            let iou = polygon_iou(&g.polygon, &p.polygon);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou > IOU_THRESHOLD => mapping
                .entries
                .entry(gt[gi].id.clone())
                .or_default()
                .push(p.id.clone()),
            _ => mapping.unmatched_pred.push(p.id.clone()),
        }
    }
    mapping.unmatched_gt = gt
        .iter()
        .filter(|g| !mapping.entries.contains_key(&g.id))
        .map(|g| g.id.clone())
        .collect();
    mapping
}

/// Pools the words of all predicted regions mapped to each ground-truth region.
///
/// Within a pool, words follow the order of the mapping entry (predicted region
/// order) and then their order in `pred_doc.words`.
pub fn pool_predicted_words<'a>(
    mapping: &RegionMapping,
    pred_doc: &'a DocumentAnnotation,
) -> BTreeMap<String, Vec<&'a WordInstance>> {
    let mut by_region: HashMap<&str, Vec<&WordInstance>> = HashMap::new();
    for w in &pred_doc.words {
        by_region.entry(w.region_id.as_str()).or_default().push(w);
    }
    mapping
        .entries
        .iter()
        .map(|(gt_id, preds)| {
            let pool = preds
                .iter()
                .flat_map(|pid| by_region.get(pid.as_str()).into_iter().flatten().copied())
                .collect();
            (gt_id.clone(), pool)
        })
        .collect()
}

/// Greedy one-to-one alignment: candidate pairs with IOU above the threshold
/// are taken in descending IOU order (ties by ground-truth index, then pool
/// index) whenever both words are still free.
pub fn align_words(gt_words: &[&WordInstance], pool: &[&WordInstance]) -> WordAlignment {
    let pool_boxes: Vec<_> = pool.iter().map(|w| w.polygon.bbox()).collect();
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (gi, g) in gt_words.iter().enumerate() {
        let gb = g.polygon.bbox();
        for (pi, p) in pool.iter().enumerate() {
            if !gb.overlaps(&pool_boxes[pi]) {
                continue;
            }
            let iou = polygon_iou(&g.polygon, &p.polygon);
            if iou > IOU_THRESHOLD {
                candidates.push((gi, pi, iou));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut gt_taken = vec![false; gt_words.len()];
    let mut pred_taken = vec![false; pool.len()];
    let mut pairs = Vec::new();
    for (gi, pi, iou) in candidates {
        if gt_taken[gi] || pred_taken[pi] {
            continue;
        }
        gt_taken[gi] = true;
        pred_taken[pi] = true;
        pairs.push(WordPair {
            gt_word_id: gt_words[gi].id.clone(),
            pred_word_id: pool[pi].id.clone(),
            iou,
        });
    }
    WordAlignment {
        pairs,
        unmatched_gt_words: gt_words
            .iter()
            .zip(&gt_taken)
            .filter(|(_, t)| !**t)
            .map(|(w, _)| w.id.clone())
            .collect(),
        unmatched_pred_words: pool
            .iter()
            .zip(&pred_taken)
            .filter(|(_, t)| !**t)
            .map(|(w, _)| w.id.clone())
            .collect(),
    }
}

/// Runs the full protocol on text regions of both documents.
pub fn match_documents(gt: &DocumentAnnotation, pred: &DocumentAnnotation) -> MatchResult {
    let gt_text: Vec<LayoutRegion> = gt.text_regions().cloned().collect();
    let pred_text: Vec<LayoutRegion> = pred.text_regions().cloned().collect();
    let region_mapping = match_regions(&gt_text, &pred_text);
    let pools = pool_predicted_words(&region_mapping, pred);
    let per_region_alignments = pools
        .iter()
        .map(|(gt_id, pool)| {
            let gt_words: Vec<&WordInstance> = gt.words_in_region(gt_id).collect();
            (gt_id.clone(), align_words(&gt_words, pool))
        })
        .collect();
    MatchResult {
        region_mapping,
        per_region_alignments,
    }
}
