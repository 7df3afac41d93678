//! Detection AP with 40 recall points and learning-curve summaries.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, Box3D, ScoredBox};

pub const RECALL_POINTS: usize = 40;

/// A ground-truth box for evaluation. Ignored boxes neither count toward
/// recall nor turn their matches into false positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalGt {
    pub bbox: Box3D,
    pub category: u32,
    pub ignore: bool,
}

/// A detection for evaluation. `ignore_unmatched` detections are dropped
/// when they match no ground truth instead of counting as false positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalDet {
    pub det: ScoredBox,
    pub ignore_unmatched: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Confidence of the detection that produced this point.
    pub threshold: f64,
}

/// Precision/recall sweep over all detections, sorted by descending
/// confidence. Each detection is greedily matched to the unmatched
/// same-category ground truth with the highest IoU at or above
/// `iou_thresh`. Returns `None` when there is no counted ground truth.
pub fn pr_curve(dets: &[Vec<EvalDet>], gts: &[Vec<EvalGt>], iou_thresh: f64) -> Result<Option<Vec<PrPoint>>> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::usage(format!("IoU threshold must lie in (0, 1], got {iou_thresh}")));
    }
    if dets.len() != gts.len() {
        return Err(Error::usage(format!(
            "{} detection lists for {} ground-truth lists",
            dets.len(),
            gts.len()
        )));
    }
    let n_gt: usize = gts.iter().flatten().filter(|g| !g.ignore).count();
    if n_gt == 0 {
        return Ok(None);
    }
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(s, d)| (0..d.len()).map(move |i| (s, i)))
        .collect();
    order.sort_by(|&(sa, ia), &(sb, ib)| {
        dets[sb][ib]
            .det
            .score
            .partial_cmp(&dets[sa][ia].det.score)
            .unwrap_or(Ordering::Equal)
            .then((sa, ia).cmp(&(sb, ib)))
    });

    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    for (s, i) in order {
        let d = &dets[s][i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[s].iter().enumerate() {
            if used[s][j] || g.category != d.det.category {
                continue;
            }
            let iou = bev_iou(&g.bbox, &d.det.bbox);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                used[s][j] = true;
                if gts[s][j].ignore {
                    continue;
                }
                tp += 1;
            }
            None if d.ignore_unmatched => continue,
            None => fp += 1,
        }
        curve.push(PrPoint {
            recall: tp as f64 / n_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
            threshold: d.det.score,
        });
    }
    Ok(Some(curve))
}

/// Mean interpolated precision at recall levels `1/40, ..., 40/40`, where the
/// interpolated precision at `r` is the best precision at any recall ≥ `r`.
pub fn ap_from_curve(curve: &[PrPoint]) -> f64 {
    let mut envelope = vec![0.0; curve.len()];
    let mut running = 0.0f64;
    for (k, p) in curve.iter().enumerate().rev() {
        running = running.max(p.precision);
        envelope[k] = running;
    }
    let mut total = 0.0;
    let mut k = 0;
    for step in 1..=RECALL_POINTS {
        let r = step as f64 / RECALL_POINTS as f64;
        while k < curve.len() && curve[k].recall < r - 1e-12 {
            k += 1;
        }
        if k < curve.len() {
            total += envelope[k];
        }
    }
    total / RECALL_POINTS as f64
}

pub fn ap40_with_ignores(dets: &[Vec<EvalDet>], gts: &[Vec<EvalGt>], iou_thresh: f64) -> Result<Option<f64>> {
    Ok(pr_curve(dets, gts, iou_thresh)?.map(|c| ap_from_curve(&c)))
}

/// AP40 with every detection and ground truth counted. `None` when there is
/// no ground truth.
pub fn ap40(dets: &[Vec<ScoredBox>], gts: &[Vec<ScoredBox>], iou_thresh: f64) -> Result<Option<f64>> {
    let d: Vec<Vec<EvalDet>> = dets
        .iter()
        .map(|v| {
            v.iter()
                .map(|&det| EvalDet {
                    det,
                    ignore_unmatched: false,
                })
                .collect()
        })
        .collect();
    let g: Vec<Vec<EvalGt>> = gts
        .iter()
        .map(|v| {
            v.iter()
                .map(|b| EvalGt {
                    bbox: b.bbox,
                    category: b.category,
                    ignore: false,
                })
                .collect()
        })
        .collect();
    ap40_with_ignores(&d, &g, iou_thresh)
}

/// Difficulty bucket by BEV distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// closer than 20 m
    Easy,
    /// 20 m to 40 m
    Moderate,
    /// 40 m and beyond
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn of_distance(d: f64) -> Self {
        if d < 20.0 {
            Difficulty::Easy
        } else if d < 40.0 {
            Difficulty::Moderate
        } else {
            Difficulty::Hard
        }
    }

    pub fn contains(&self, b: &Box3D) -> bool {
        Self::of_distance(b.bev_distance()) == *self
    }
}

/// AP40 restricted to one distance band: ground truth outside the band is
/// ignored, and unmatched detections outside the band are dropped.
pub fn ap40_band(
    dets: &[Vec<ScoredBox>],
    gts: &[Vec<ScoredBox>],
    iou_thresh: f64,
    band: Difficulty,
) -> Result<Option<f64>> {
    let d: Vec<Vec<EvalDet>> = dets
        .iter()
        .map(|v| {
            v.iter()
                .map(|&det| EvalDet {
                    det,
                    ignore_unmatched: !band.contains(&det.bbox),
                })
                .collect()
        })
        .collect();
    let g: Vec<Vec<EvalGt>> = gts
        .iter()
        .map(|v| {
            v.iter()
                .map(|b| EvalGt {
                    bbox: b.bbox,
                    category: b.category,
                    ignore: !band.contains(&b.bbox),
                })
                .collect()
        })
        .collect();
    ap40_with_ignores(&d, &g, iou_thresh)
}

/// AP per distance band; `None` entries mark bands without ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandAp {
    pub easy: Option<f64>,
    pub moderate: Option<f64>,
    pub hard: Option<f64>,
}

impl BandAp {
    pub fn get(&self, d: Difficulty) -> Option<f64> {
        match d {
            Difficulty::Easy => self.easy,
            Difficulty::Moderate => self.moderate,
            Difficulty::Hard => self.hard,
        }
    }
}

pub fn band_ap(dets: &[Vec<ScoredBox>], gts: &[Vec<ScoredBox>], iou_thresh: f64) -> Result<BandAp> {
    Ok(BandAp {
        easy: ap40_band(dets, gts, iou_thresh, Difficulty::Easy)?,
        moderate: ap40_band(dets, gts, iou_thresh, Difficulty::Moderate)?,
        hard: ap40_band(dets, gts, iou_thresh, Difficulty::Hard)?,
    })
}

/// Labeled fraction at which a curve first reaches `target`, interpolating
/// linearly between cycle points. Points must be sorted by fraction.
pub fn fraction_reaching(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    let first = curve.first()?;
    if first.1 >= target {
        return Some(first.0);
    }
    curve.windows(2).find_map(|w| {
        let ((f0, a0), (f1, a1)) = (w[0], w[1]);
        (a0 < target && a1 >= target).then(|| f0 + (target - a0) / (a1 - a0) * (f1 - f0))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSavings {
    /// Fraction at which curve `a` reaches the target.
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b - a`: labeled fraction `a` saves over `b`. `None` when either curve
    /// never reaches the target.
    pub savings: Option<f64>,
}

/// Labeled-data saving of curve `a` over curve `b` at AP `target`.
pub fn data_savings(curve_a: &[(f64, f64)], curve_b: &[(f64, f64)], target: f64) -> DataSavings {
    let a = fraction_reaching(curve_a, target);
    let b = fraction_reaching(curve_b, target);
    DataSavings {
        a,
        b,
        savings: a.zip(b).map(|(a, b)| b - a),
    }
}
