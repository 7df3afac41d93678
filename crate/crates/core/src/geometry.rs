//! Oriented boxes in bird's-eye view: footprint IoU, per-category NMS and
//! greedy one-to-one matching between two detection sets.
//!
//! Coordinates follow the camera convention: `x` right, `y` down, `z`
//! forward. The BEV footprint lives in the x-z plane. At `yaw = 0` the width
//! runs along `x` and the length along `z`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Footprints with less area than this are treated as empty.
const MIN_AREA: f64 = 1e-12;

/// Wrap an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if r >= PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// 7-parameter oriented 3D box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub h: f64,
    pub l: f64,
    pub yaw: f64,
}

pub const N_BOX_PARAMS: usize = 7;

/// Index of the yaw parameter in [`Box3D::params`].
pub const YAW_INDEX: usize = 6;

impl Box3D {
    pub fn new(cx: f64, cy: f64, cz: f64, w: f64, h: f64, l: f64, yaw: f64) -> Result<Self> {
        let params = [cx, cy, cz, w, h, l, yaw];
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::usage(format!("non-finite box parameter in {params:?}")));
        }
        if w <= 0.0 || h <= 0.0 || l <= 0.0 {
            return Err(Error::usage(format!(
                "box dimensions must be positive, got w={w} h={h} l={l}"
            )));
        }
        Ok(Box3D {
            cx,
            cy,
            cz,
            w,
            h,
            l,
            yaw: wrap_angle(yaw),
        })
    }

    /// Build from a parameter vector, clamping dimensions to a small positive
    /// floor. Used when decoding network outputs, which may wander below zero.
    pub fn from_params_clamped(p: &[f64; N_BOX_PARAMS]) -> Self {
        const DIM_FLOOR: f64 = 1e-3;
        Box3D {
            cx: p[0],
            cy: p[1],
            cz: p[2],
            w: p[3].max(DIM_FLOOR),
            h: p[4].max(DIM_FLOOR),
            l: p[5].max(DIM_FLOOR),
            yaw: wrap_angle(p[6]),
        }
    }

    pub fn params(&self) -> [f64; N_BOX_PARAMS] {
        [self.cx, self.cy, self.cz, self.w, self.h, self.l, self.yaw]
    }

    /// Horizontal distance from the sensor origin.
    pub fn bev_distance(&self) -> f64 {
        self.cx.hypot(self.cz)
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    /// Footprint corners, counter-clockwise in the (x, z) plane.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let hw = self.w / 2.0;
        let hl = self.l / 2.0;
        let local = [(-hw, -hl), (hw, -hl), (hw, hl), (-hw, hl)];
        let mut out = [(0.0, 0.0); 4];
        for (o, &(u, v)) in out.iter_mut().zip(local.iter()) {
            *o = (self.cx + u * c + v * s, self.cz - u * s + v * c);
        }
        if signed_area(&out) < 0.0 {
            out.reverse();
        }
        out
    }

    fn same_footprint(&self, other: &Box3D) -> bool {
        self.cx == other.cx
            && self.cz == other.cz
            && self.w == other.w
            && self.l == other.l
            && self.yaw == other.yaw
    }
}

/// Difference between two parameter vectors with the yaw slot wrapped.
pub fn param_diff(a: &[f64; N_BOX_PARAMS], b: &[f64; N_BOX_PARAMS]) -> [f64; N_BOX_PARAMS] {
    let mut d = [0.0; N_BOX_PARAMS];
    for i in 0..N_BOX_PARAMS {
        d[i] = a[i] - b[i];
    }
    d[YAW_INDEX] = wrap_angle(d[YAW_INDEX]);
    d
}

fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn line_intersection(p: (f64, f64), q: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    // Intersection of segment p-q with the infinite line through a-b.
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Sutherland-Hodgman clip of `subject` against the convex CCW polygon `clip`.
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output: Vec<(f64, f64)> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Area of the intersection of two BEV footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    if a.bev_area() < MIN_AREA || b.bev_area() < MIN_AREA {
        return 0.0;
    }
    // Cheap rejection by circumscribed circles.
    let ra = 0.5 * a.w.hypot(a.l);
    let rb = 0.5 * b.w.hypot(b.l);
    if (a.cx - b.cx).hypot(a.cz - b.cz) > ra + rb {
        return 0.0;
    }
    let pa = a.bev_corners();
    let pb = b.bev_corners();
    signed_area(&clip_convex(&pa, &pb)).max(0.0)
}

/// Bird's-eye-view IoU of two oriented boxes; vertical extent is ignored.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let area_a = a.bev_area();
    let area_b = b.bev_area();
    if area_a < MIN_AREA || area_b < MIN_AREA {
        return 0.0;
    }
    if a.same_footprint(b) {
        return 1.0;
    }
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A box with a confidence and a category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub score: f64,
    pub category: u32,
}

impl ScoredBox {
    pub fn new(bbox: Box3D, score: f64, category: u32) -> Self {
        ScoredBox {
            bbox,
            score,
            category,
        }
    }
}

fn check_threshold(iou_thresh: f64) -> Result<()> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::usage(format!(
            "IoU threshold must lie in (0, 1], got {iou_thresh}"
        )));
    }
    Ok(())
}

/// Indices of NMS survivors in descending-score order. Suppression is
/// per-category; equal scores are resolved in favour of the lower index.
pub fn nms_indices(dets: &[ScoredBox], iou_thresh: f64) -> Result<Vec<usize>> {
    check_threshold(iou_thresh)?;
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].category == dets[i].category && bev_iou(&dets[k].bbox, &dets[i].bbox) >= iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

pub fn nms(dets: &[ScoredBox], iou_thresh: f64) -> Result<Vec<ScoredBox>> {
    Ok(nms_indices(dets, iou_thresh)?
        .into_iter()
        .map(|i| dets[i])
        .collect())
}

/// One-to-one assignment between two box sets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(reference index, candidate index, iou)`
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_reference: Vec<usize>,
    pub unmatched_candidate: Vec<usize>,
}

/// Greedy same-category matching in descending IoU order. Pairs below
/// `iou_thresh` are never formed.
pub fn match_sets(reference: &[ScoredBox], candidate: &[ScoredBox], iou_thresh: f64) -> Result<MatchResult> {
    check_threshold(iou_thresh)?;
    let mut edges = Vec::new();
    for (ri, r) in reference.iter().enumerate() {
        for (ci, c) in candidate.iter().enumerate() {
            if r.category != c.category {
                continue;
            }
            let iou = bev_iou(&r.bbox, &c.bbox);
            if iou >= iou_thresh {
                edges.push((ri, ci, iou));
            }
        }
    }
    edges.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut ref_used = vec![false; reference.len()];
    let mut cand_used = vec![false; candidate.len()];
    let mut pairs = Vec::new();
    for (ri, ci, iou) in edges {
        if ref_used[ri] || cand_used[ci] {
            continue;
        }
        ref_used[ri] = true;
        cand_used[ci] = true;
        pairs.push((ri, ci, iou));
    }
    Ok(MatchResult {
        pairs,
        unmatched_reference: (0..reference.len()).filter(|&i| !ref_used[i]).collect(),
        unmatched_candidate: (0..candidate.len()).filter(|&i| !cand_used[i]).collect(),
    })
}
