//! Independent oracles shared by the integration tests. None of them call
//! into the library routine they check.

#![allow(dead_code)]

pub mod grad;

use monolig::geometry::{Box3D, ScoredBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(r: &mut impl Rng, spread: f64) -> Box3D {
    Box3D::new(
        r.random_range(-spread..spread),
        r.random_range(0.5..2.0),
        r.random_range(-spread..spread),
        r.random_range(0.5..3.0),
        r.random_range(1.0..2.0),
        r.random_range(0.5..5.0),
        r.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}

fn inside(b: &Box3D, x: f64, z: f64) -> bool {
    // length runs along (sin yaw, cos yaw) in the (x, z) plane
    let (s, c) = b.yaw.sin_cos();
    let (dx, dz) = (x - b.cx, z - b.cz);
    let along = dx * s + dz * c;
    let across = dx * c - dz * s;
    along.abs() <= b.l / 2.0 && across.abs() <= b.w / 2.0
}

/// BEV IoU by midpoint sampling on a square grid of side `cell`.
pub fn raster_iou(a: &Box3D, b: &Box3D, cell: f64) -> f64 {
    let reach = |bx: &Box3D| 0.5 * (bx.w * bx.w + bx.l * bx.l).sqrt();
    let (ra, rb) = (reach(a), reach(b));
    let x0 = (a.cx - ra).min(b.cx - rb);
    let x1 = (a.cx + ra).max(b.cx + rb);
    let z0 = (a.cz - ra).min(b.cz - rb);
    let z1 = (a.cz + ra).max(b.cz + rb);
    let nx = ((x1 - x0) / cell).ceil() as usize;
    let nz = ((z1 - z0) / cell).ceil() as usize;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..nx {
        let x = x0 + (i as f64 + 0.5) * cell;
        for j in 0..nz {
            let z = z0 + (j as f64 + 0.5) * cell;
            let (ia, ib) = (inside(a, x, z), inside(b, x, z));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// NMS survivors as the unique subset `S` of a set ranked by score (ties by
/// index) such that no member of `S` is hit by a better-ranked member of
/// `S`, and every box outside `S` is hit by a better-ranked member of `S`.
/// Found by enumerating all subsets. `hit[i][j]` says whether `j` would
/// suppress `i`.
pub fn brute_nms(scores: &[f64], hit: &[Vec<bool>]) -> Vec<usize> {
    let n = scores.len();
    assert!(n <= 16);
    let better = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut found = None;
    for mask in 0u32..(1 << n) {
        let ok = (0..n).all(|i| {
            let covered = (0..n).any(|j| j != i && mask & (1 << j) != 0 && better(j, i) && hit[i][j]);
            if mask & (1 << i) != 0 {
                !covered
            } else {
                covered
            }
        });
        if ok {
            assert!(found.is_none(), "suppression fixed point is not unique");
            found = Some(mask);
        }
    }
    let mask = found.expect("a fixed point exists");
    let mut s: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
    s.sort_by(|&i, &j| if better(i, j) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    s
}

/// Greedy one-to-one matching: repeatedly take the best remaining pair.
pub fn brute_greedy_match(iou: &[Vec<f64>], thresh: f64) -> Vec<(usize, usize)> {
    let (nr, nc) = (iou.len(), iou.first().map_or(0, |r| r.len()));
    let mut ru = vec![false; nr];
    let mut cu = vec![false; nc];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for r in 0..nr {
            for c in 0..nc {
                if ru[r] || cu[c] || iou[r][c] < thresh {
                    continue;
                }
                if best.is_none_or(|(_, _, v)| iou[r][c] > v) {
                    best = Some((r, c, iou[r][c]));
                }
            }
        }
        match best {
            Some((r, c, _)) => {
                ru[r] = true;
                cu[c] = true;
                out.push((r, c));
            }
            None => return out,
        }
    }
}

/// AP over 40 recall points by enumerating every confidence threshold.
/// At each threshold the kept detections are matched from scratch, highest
/// confidence first, each to the best unmatched same-category ground truth.
/// Recall levels are compared in integers. Scores must be distinct.
pub fn brute_ap40(dets: &[Vec<ScoredBox>], gts: &[Vec<ScoredBox>], thresh: f64, iou: impl Fn(&Box3D, &Box3D) -> f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(|g| g.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut points = Vec::new();
    for &t in &thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (ds, gs) in dets.iter().zip(gts) {
            let mut kept: Vec<&ScoredBox> = ds.iter().filter(|d| d.score >= t).collect();
            kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let mut used = vec![false; gs.len()];
            for d in kept {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gs.iter().enumerate() {
                    let v = iou(&g.bbox, &d.bbox);
                    if !used[j] && g.category == d.category && v >= thresh && best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                match best {
                    Some((j, _)) => {
                        used[j] = true;
                        tp += 1;
                    }
                    None => fp += 1,
                }
            }
        }
        points.push((tp, fp));
    }
    let mut total = 0.0;
    for step in 1..=40usize {
        let best = points
            .iter()
            .filter(|&&(tp, _)| tp * 40 >= step * n_gt)
            .map(|&(tp, fp)| tp as f64 / (tp + fp) as f64)
            .fold(0.0, f64::max);
        total += best;
    }
    Some(total / 40.0)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with a unit floor on the denominator, so entries near
/// zero are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share their mean rank
        let mean = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}
