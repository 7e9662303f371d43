//! Detection quality: AP at IoU 0.5 with 101-point interpolation, per
//! base/novel/all category filters.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxCxcywh};
use crate::error::{Error, Result};
use crate::scene::Scene;

/// One scored prediction for a scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxCxcywh,
    pub category: usize,
    pub score: f64,
}

/// Category filter for metric aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFilter {
    Base,
    Novel,
    All,
}

impl SplitFilter {
    pub fn admits(self, is_novel: bool) -> bool {
        match self {
            SplitFilter::Base => !is_novel,
            SplitFilter::Novel => is_novel,
            SplitFilter::All => true,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(SplitFilter::Base),
            "novel" => Ok(SplitFilter::Novel),
            "all" => Ok(SplitFilter::All),
            other => Err(Error::Parameter(format!(
                "unknown split {other:?} (expected base|novel|all)"
            ))),
        }
    }
}

const IOU_THRESHOLD: f64 = 0.5;
const RECALL_POINTS: usize = 101;

/// Per-category average precision entry in the eval report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: usize,
    pub is_novel: bool,
    pub ap50: f64,
    pub num_gt: usize,
}

/// 101-point interpolated average precision at IoU ≥ 0.5, averaged over the
/// categories admitted by `filter`. Categories with zero ground truth are
/// excluded; a filter with no ground truth at all is an undefined metric.
pub fn ap50(
    predictions: &[Vec<Detection>],
    scenes: &[Scene],
    filter: SplitFilter,
) -> Result<f64> {
    let per_cat = per_category_ap(predictions, scenes)?;
    mean_over_filter(&per_cat, filter)
}

pub(crate) fn mean_over_filter(per_cat: &[CategoryAp], filter: SplitFilter) -> Result<f64> {
    let selected: Vec<&CategoryAp> =
        per_cat.iter().filter(|c| filter.admits(c.is_novel)).collect();
    if selected.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "no ground truth for filter {filter:?}"
        )));
    }
    Ok(selected.iter().map(|c| c.ap50).sum::<f64>() / selected.len() as f64)
}

/// AP per category that has at least one ground-truth object.
pub fn per_category_ap(
    predictions: &[Vec<Detection>],
    scenes: &[Scene],
) -> Result<Vec<CategoryAp>> {
    if predictions.len() != scenes.len() {
        return Err(Error::Contract(format!(
            "{} prediction lists for {} scenes",
            predictions.len(),
            scenes.len()
        )));
    }
    for preds in predictions {
        if let Some(p) = preds.iter().find(|p| !(0.0..=1.0).contains(&p.score)) {
            return Err(Error::Contract(format!(
                "prediction score {} outside [0, 1]",
                p.score
            )));
        }
    }

    // Category census over ground truth.
    let mut categories: Vec<(usize, bool)> = Vec::new();
    for scene in scenes {
        for ann in &scene.ground_truth {
            if !categories.iter().any(|(c, _)| *c == ann.category) {
                categories.push((ann.category, ann.is_novel));
            }
        }
    }
    categories.sort_by_key(|(c, _)| *c);

    let mut out = Vec::with_capacity(categories.len());
    for (category, is_novel) in categories {
        let num_gt: usize = scenes
            .iter()
            .map(|s| s.ground_truth.iter().filter(|a| a.category == category).count())
            .sum();
        let ap50 = single_category_ap(predictions, scenes, category, num_gt)?;
        out.push(CategoryAp { category, is_novel, ap50, num_gt });
    }
    Ok(out)
}

fn single_category_ap(
    predictions: &[Vec<Detection>],
    scenes: &[Scene],
    category: usize,
    num_gt: usize,
) -> Result<f64> {
    // Flatten this category's predictions, keeping scene identity; sort by
    // descending score with a deterministic (scene, index) tie-break.
    let mut flat: Vec<(usize, usize, f64)> = Vec::new();
    for (si, preds) in predictions.iter().enumerate() {
        for (pi, p) in preds.iter().enumerate() {
            if p.category == category {
                flat.push((si, pi, p.score));
            }
        }
    }
    flat.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    if flat.is_empty() || num_gt == 0 {
        return Ok(0.0);
    }

    let mut matched: Vec<Vec<bool>> =
        scenes.iter().map(|s| vec![false; s.ground_truth.len()]).collect();
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(flat.len()); // (recall, precision)
    for (rank, &(si, pi, _)) in flat.iter().enumerate() {
        let pred = &predictions[si][pi];
        // Best unmatched ground truth of this category at IoU >= threshold.
        let mut best: Option<(usize, f64)> = None;
        for (gi, ann) in scenes[si].ground_truth.iter().enumerate() {
            if ann.category != category || matched[si][gi] {
                continue;
            }
            let v = iou(&pred.bbox.to_xyxy(), &ann.bbox.to_xyxy())?;
            if v >= IOU_THRESHOLD && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            matched[si][gi] = true;
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / num_gt as f64;
        points.push((recall, precision));
    }

    // 101-point interpolation: mean over r of max precision at recall >= r.
    let mut ap = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        ap += p;
    }
    Ok(ap / RECALL_POINTS as f64)
}

/// The eval report emitted by `evaluate` and the `eval` CLI command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50_base: Option<f64>,
    pub ap50_novel: Option<f64>,
    pub ap50_all: f64,
    pub per_category: Vec<CategoryAp>,
    pub wall_clock_per_scene_ms: f64,
    pub num_scenes: usize,
}

/// Builds the report from precomputed predictions. Base/novel filters with no
/// ground truth report as absent; a dataset with no ground truth at all is an
/// error.
pub fn evaluate_predictions(
    predictions: &[Vec<Detection>],
    scenes: &[Scene],
    wall_clock_per_scene_ms: f64,
) -> Result<EvalReport> {
    let per_category = per_category_ap(predictions, scenes)?;
    let ap50_all = mean_over_filter(&per_category, SplitFilter::All)?;
    let optional = |filter| match mean_over_filter(&per_category, filter) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(EvalReport {
        ap50_base: optional(SplitFilter::Base)?,
        ap50_novel: optional(SplitFilter::Novel)?,
        ap50_all,
        per_category,
        wall_clock_per_scene_ms,
        num_scenes: scenes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BoxAnnotation, SplitContext};
    use approx::assert_abs_diff_eq;

    fn ann(bbox: [f64; 4], category: usize, is_novel: bool) -> BoxAnnotation {
        BoxAnnotation {
            bbox: bbox.into(),
            category,
            is_novel,
            region_embedding: vec![1.0, 0.0],
        }
    }

    fn det(bbox: [f64; 4], category: usize, score: f64) -> Detection {
        Detection { bbox: bbox.into(), category, score }
    }

    fn scene(anns: Vec<BoxAnnotation>) -> Scene {
        Scene { tokens: vec![], ground_truth: anns, split: SplitContext::Eval }
    }

    #[test]
    fn exact_predictions_score_one() {
        let scenes = vec![scene(vec![
            ann([0.3, 0.3, 0.2, 0.2], 0, false),
            ann([0.7, 0.7, 0.2, 0.2], 1, true),
        ])];
        let preds = vec![vec![
            det([0.3, 0.3, 0.2, 0.2], 0, 1.0),
            det([0.7, 0.7, 0.2, 0.2], 1, 1.0),
        ]];
        assert_abs_diff_eq!(ap50(&preds, &scenes, SplitFilter::All).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ap50(&preds, &scenes, SplitFilter::Base).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ap50(&preds, &scenes, SplitFilter::Novel).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_predictions_score_zero() {
        let scenes = vec![scene(vec![ann([0.3, 0.3, 0.2, 0.2], 0, false)])];
        let preds = vec![vec![]];
        assert_abs_diff_eq!(ap50(&preds, &scenes, SplitFilter::All).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn hand_built_pr_curve() {
        // 2 GT of one category; 3 predictions ranked by score:
        //   rank 1 hits, rank 2 misses, rank 3 hits.
        // PR points: (0.5, 1.0), (0.5, 0.5), (1.0, 2/3).
        // 101-pt AP: recalls <= 0.5 take precision 1.0 (51 points),
        // recalls > 0.5 take 2/3 (50 points).
        let scenes = vec![scene(vec![
            ann([0.2, 0.2, 0.2, 0.2], 0, false),
            ann([0.8, 0.8, 0.2, 0.2], 0, false),
        ])];
        let preds = vec![vec![
            det([0.2, 0.2, 0.2, 0.2], 0, 0.9),
            det([0.5, 0.5, 0.1, 0.1], 0, 0.8),
            det([0.8, 0.8, 0.2, 0.2], 0, 0.7),
        ]];
        let expect = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert_abs_diff_eq!(ap50(&preds, &scenes, SplitFilter::All).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn novel_filter_without_novel_gt_is_undefined() {
        let scenes = vec![scene(vec![ann([0.3, 0.3, 0.2, 0.2], 0, false)])];
        let preds = vec![vec![]];
        assert!(matches!(
            ap50(&preds, &scenes, SplitFilter::Novel),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_is_rank_invariant() {
        let scenes = vec![scene(vec![
            ann([0.2, 0.2, 0.2, 0.2], 0, false),
            ann([0.8, 0.8, 0.2, 0.2], 0, false),
        ])];
        let base = vec![vec![
            det([0.21, 0.2, 0.2, 0.2], 0, 0.8),
            det([0.5, 0.5, 0.15, 0.15], 0, 0.5),
            det([0.8, 0.79, 0.2, 0.2], 0, 0.3),
        ]];
        // A strictly monotone transform of the scores preserves ranks.
        let transformed: Vec<Vec<Detection>> = base
            .iter()
            .map(|p| {
                p.iter()
                    .map(|d| Detection { score: (d.score * 0.5).powi(3), ..d.clone() })
                    .collect()
            })
            .collect();
        assert_abs_diff_eq!(
            ap50(&base, &scenes, SplitFilter::All).unwrap(),
            ap50(&transformed, &scenes, SplitFilter::All).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn each_gt_matches_at_most_once() {
        // Two predictions on the same GT: the second is a false positive.
        let scenes = vec![scene(vec![ann([0.3, 0.3, 0.2, 0.2], 0, false)])];
        let preds = vec![vec![
            det([0.3, 0.3, 0.2, 0.2], 0, 0.9),
            det([0.3, 0.3, 0.2, 0.2], 0, 0.8),
        ]];
        // AP still 1.0: full recall reached at rank 1 with precision 1.
        assert_abs_diff_eq!(ap50(&preds, &scenes, SplitFilter::All).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn report_mean_lies_between_category_extremes() {
        let scenes = vec![scene(vec![
            ann([0.2, 0.2, 0.2, 0.2], 0, false),
            ann([0.8, 0.8, 0.2, 0.2], 1, true),
        ])];
        let preds = vec![vec![det([0.2, 0.2, 0.2, 0.2], 0, 0.9)]];
        let report = evaluate_predictions(&preds, &scenes, 0.1).unwrap();
        let aps: Vec<f64> = report.per_category.iter().map(|c| c.ap50).collect();
        let lo = aps.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = aps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(report.ap50_all >= lo - 1e-12 && report.ap50_all <= hi + 1e-12);
        assert_eq!(report.num_scenes, 1);
    }

    #[test]
    fn scores_outside_unit_interval_are_rejected() {
        let scenes = vec![scene(vec![ann([0.3, 0.3, 0.2, 0.2], 0, false)])];
        let preds = vec![vec![det([0.3, 0.3, 0.2, 0.2], 0, 1.5)]];
        assert!(matches!(
            ap50(&preds, &scenes, SplitFilter::All),
            Err(Error::Contract(_))
        ));
    }
}
