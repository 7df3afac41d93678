//! Selection scores for unlabeled scenes.
//!
//! Per object: the total variance of the matched ensemble boxes (`u_tv`),
//! the squared distance between the ensemble mean and the teacher box
//! (`i_ts`) and the teacher's aleatoric box score (`u_al_t`), combined as
//! `(u_tv + i_ts) * u_al_t`. A scene scores the maximum over its objects.

mod acquisition;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{aleatoric_box_score, Detection, StudentEnsemble, TeacherModel, UncertaintyMode};
use crate::error::{Error, Result};
use crate::geometry::{match_sets, param_diff, wrap_angle, Box3D, ScoredBox, N_BOX_PARAMS, YAW_INDEX};
use crate::synthworld::Scene;

pub use acquisition::{build, registry, Acquisition, AcquisitionContext, Component};

/// Number of leading box parameters that enter `u_tv` and `i_ts`.
fn n_params(location_only: bool) -> usize {
    if location_only {
        3
    } else {
        N_BOX_PARAMS
    }
}

/// Per-parameter ensemble mean, computed as the first member plus the mean
/// (wrapped, for yaw) difference from it. Exact when all members agree.
pub fn ensemble_mean(members: &[[f64; N_BOX_PARAMS]]) -> Result<[f64; N_BOX_PARAMS]> {
    let Some(anchor) = members.first() else {
        return Err(Error::usage("ensemble mean of zero members"));
    };
    let m = members.len() as f64;
    let mut mean = *anchor;
    for (i, slot) in mean.iter_mut().enumerate() {
        *slot += members.iter().map(|p| param_diff(p, anchor)[i]).sum::<f64>() / m;
    }
    mean[YAW_INDEX] = wrap_angle(mean[YAW_INDEX]);
    Ok(mean)
}

/// Sum over parameters of the population variance across members, with yaw
/// deviations wrapped about the mean yaw. Needs at least two members.
pub fn total_variance(members: &[[f64; N_BOX_PARAMS]], location_only: bool) -> Result<f64> {
    if members.len() < 2 {
        return Err(Error::usage(format!(
            "total variance needs at least 2 members, got {}",
            members.len()
        )));
    }
    let mean = ensemble_mean(members)?;
    let k = n_params(location_only);
    let m = members.len() as f64;
    Ok(members
        .iter()
        .map(|p| param_diff(p, &mean)[..k].iter().map(|d| d * d).sum::<f64>())
        .sum::<f64>()
        / m)
}

/// Squared distance between the ensemble mean and the teacher box, yaw wrapped.
pub fn ts_inconsistency(mean: &[f64; N_BOX_PARAMS], teacher: &[f64; N_BOX_PARAMS], location_only: bool) -> f64 {
    param_diff(mean, teacher)[..n_params(location_only)]
        .iter()
        .map(|d| d * d)
        .sum()
}

/// `(u_tv + i_ts) * u_al_t`
pub fn monolig_score(u_tv: f64, i_ts: f64, u_al_t: f64) -> f64 {
    (u_tv + i_ts) * u_al_t
}

/// Terms of the ensemble decomposition for one scalar parameter:
/// `mean_k (f_k - h)^2 = mean_k (f_k - mu)^2 + (mu - h)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleDecomposition {
    pub mean_sq_error: f64,
    pub variance: f64,
    pub bias_sq: f64,
}

pub fn ensemble_decomposition(members: &[f64], h: f64) -> Result<EnsembleDecomposition> {
    if members.is_empty() {
        return Err(Error::usage("ensemble decomposition of zero members"));
    }
    let m = members.len() as f64;
    let mu = members.iter().sum::<f64>() / m;
    Ok(EnsembleDecomposition {
        mean_sq_error: members.iter().map(|f| (f - h) * (f - h)).sum::<f64>() / m,
        variance: members.iter().map(|f| (f - mu) * (f - mu)).sum::<f64>() / m,
        bias_sq: (mu - h) * (mu - h),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub u_tv: f64,
    pub i_ts: f64,
    pub u_al_t: f64,
    pub combined: f64,
    /// Ensemble members with a detection in this object's cluster.
    pub members: usize,
    pub teacher_matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub scene_id: u64,
    pub objects: Vec<ObjectScore>,
    /// Maximum combined object score; 0 for scenes without objects.
    pub sample_score: f64,
}

impl ScoreBreakdown {
    /// The object that attains the sample score (first on ties).
    pub fn top_object(&self) -> Option<&ObjectScore> {
        self.objects
            .iter()
            .fold(None, |best: Option<&ObjectScore>, o| match best {
                Some(b) if b.combined >= o.combined => Some(b),
                _ => Some(o),
            })
    }
}

/// Detections of one scene from the teacher and every ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub scene_id: u64,
    pub teacher: Vec<Detection>,
    pub members: Vec<Vec<Detection>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    /// BEV IoU for matching across members and to the teacher.
    #[serde(default = "default_tau_match")]
    pub tau_match: f64,
    /// Restrict `u_tv` and `i_ts` to the three location parameters.
    #[serde(default)]
    pub location_only: bool,
    /// `i_ts` assigned to teacher objects no member detects. `None` uses the
    /// 99th percentile of matched `i_ts` over the scored pool.
    #[serde(default)]
    pub unmatched_i_ts: Option<f64>,
    #[serde(default)]
    pub uncertainty: UncertaintyMode,
}

fn default_tau_match() -> f64 {
    0.5
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            tau_match: default_tau_match(),
            location_only: false,
            unmatched_i_ts: None,
            uncertainty: UncertaintyMode::StdSum,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_match > 0.0 && self.tau_match <= 1.0) {
            return Err(Error::usage(format!("tau_match must lie in (0, 1], got {}", self.tau_match)));
        }
        if let Some(c) = self.unmatched_i_ts {
            if !(c >= 0.0) {
                return Err(Error::usage("unmatched_i_ts must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Object record before the unmatched-teacher ceiling is known.
struct RawObject {
    u_tv: f64,
    i_ts: Option<f64>,
    u_al_t: f64,
    members: usize,
    teacher_matched: bool,
}

/// Group member detections into per-object clusters. Member 0 seeds the
/// clusters; every later member is matched against the founding boxes and
/// its unmatched detections found new clusters.
fn cluster_members(members: &[Vec<Detection>], tau: f64) -> Result<Vec<Vec<&Detection>>> {
    let mut clusters: Vec<Vec<&Detection>> = Vec::new();
    for dets in members {
        let founders: Vec<ScoredBox> = clusters.iter().map(|c| c[0].scored_box()).collect();
        let cand: Vec<ScoredBox> = dets.iter().map(Detection::scored_box).collect();
        let m = match_sets(&founders, &cand, tau)?;
        for &(ci, di, _) in &m.pairs {
            clusters[ci].push(&dets[di]);
        }
        for &di in &m.unmatched_candidate {
            clusters.push(vec![&dets[di]]);
        }
    }
    Ok(clusters)
}

fn score_frame_raw(frame: &FrameDetections, cfg: &ScoringConfig) -> Result<Vec<RawObject>> {
    let clusters = cluster_members(&frame.members, cfg.tau_match)?;
    let mut means = Vec::with_capacity(clusters.len());
    let mut u_tvs = Vec::with_capacity(clusters.len());
    let mut mean_boxes = Vec::with_capacity(clusters.len());
    for c in &clusters {
        let params: Vec<[f64; N_BOX_PARAMS]> = c.iter().map(|d| d.bbox.params()).collect();
        let mean = ensemble_mean(&params)?;
        u_tvs.push(if params.len() >= 2 {
            total_variance(&params, cfg.location_only)?
        } else {
            0.0
        });
        let p = c.iter().map(|d| d.p).sum::<f64>() / c.len() as f64;
        mean_boxes.push(ScoredBox::new(Box3D::from_params_clamped(&mean), p, c[0].category));
        means.push(mean);
    }
    let teacher: Vec<ScoredBox> = frame.teacher.iter().map(Detection::scored_box).collect();
    let m = match_sets(&teacher, &mean_boxes, cfg.tau_match)?;

    let mut objects = Vec::new();
    for &(ti, ci, _) in &m.pairs {
        let t = &frame.teacher[ti];
        objects.push(RawObject {
            u_tv: u_tvs[ci],
            i_ts: Some(ts_inconsistency(&means[ci], &t.bbox.params(), cfg.location_only)),
            u_al_t: aleatoric_box_score(t, cfg.uncertainty)?,
            members: clusters[ci].len(),
            teacher_matched: true,
        });
    }
    for &ti in &m.unmatched_reference {
        objects.push(RawObject {
            u_tv: 0.0,
            i_ts: None,
            u_al_t: aleatoric_box_score(&frame.teacher[ti], cfg.uncertainty)?,
            members: 0,
            teacher_matched: true,
        });
    }
    // Without a teacher box there is no aleatoric evidence: u_al_t = 0.
    for &ci in &m.unmatched_candidate {
        objects.push(RawObject {
            u_tv: u_tvs[ci],
            i_ts: Some(0.0),
            u_al_t: 0.0,
            members: clusters[ci].len(),
            teacher_matched: false,
        });
    }
    Ok(objects)
}

/// Linear-interpolation percentile of a non-empty sample, `q` in [0, 1].
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Score a set of frames. The unmatched-teacher ceiling is computed over all
/// frames passed in together.
pub fn score_detections(frames: &[FrameDetections], cfg: &ScoringConfig) -> Result<Vec<ScoreBreakdown>> {
    cfg.validate()?;
    let raw: Vec<Vec<RawObject>> = frames
        .par_iter()
        .map(|f| score_frame_raw(f, cfg))
        .collect::<Result<_>>()?;
    let ceiling = match cfg.unmatched_i_ts {
        Some(c) => c,
        None => {
            let mut matched: Vec<f64> = raw
                .iter()
                .flatten()
                .filter(|o| o.teacher_matched && o.members > 0)
                .filter_map(|o| o.i_ts)
                .collect();
            if matched.is_empty() {
                0.0
            } else {
                percentile(&mut matched, 0.99)
            }
        }
    };
    Ok(frames
        .iter()
        .zip(raw)
        .map(|(f, objs)| {
            let objects: Vec<ObjectScore> = objs
                .into_iter()
                .map(|o| {
                    let i_ts = o.i_ts.unwrap_or(ceiling);
                    ObjectScore {
                        u_tv: o.u_tv,
                        i_ts,
                        u_al_t: o.u_al_t,
                        combined: monolig_score(o.u_tv, i_ts, o.u_al_t),
                        members: o.members,
                        teacher_matched: o.teacher_matched,
                    }
                })
                .collect();
            let sample_score = objects.iter().map(|o| o.combined).fold(0.0, f64::max);
            ScoreBreakdown {
                scene_id: f.scene_id,
                objects,
                sample_score,
            }
        })
        .collect())
}

/// Run the teacher and every ensemble member over the scenes.
pub fn infer_frames(ensemble: &StudentEnsemble, teacher: &TeacherModel, scenes: &[&Scene]) -> Result<Vec<FrameDetections>> {
    scenes
        .par_iter()
        .map(|s| {
            Ok(FrameDetections {
                scene_id: s.id,
                teacher: teacher.infer(s)?,
                members: ensemble.infer(s)?,
            })
        })
        .collect()
}

/// Score every unlabeled scene with frozen models.
pub fn score_pool(
    ensemble: &StudentEnsemble,
    teacher: &TeacherModel,
    unlabeled: &[&Scene],
    cfg: &ScoringConfig,
) -> Result<Vec<ScoreBreakdown>> {
    if ensemble.len() < 2 {
        return Err(Error::usage("pool scoring needs an ensemble of at least 2 members"));
    }
    score_detections(&infer_frames(ensemble, teacher, unlabeled)?, cfg)
}

/// Order by descending score, ties by ascending scene id.
pub fn rank(breakdowns: &[ScoreBreakdown]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..breakdowns.len()).collect();
    order.sort_by(|&a, &b| {
        breakdowns[b]
            .sample_score
            .total_cmp(&breakdowns[a].sample_score)
            .then(breakdowns[a].scene_id.cmp(&breakdowns[b].scene_id))
    });
    order
}

/// Ranked CSV with the components of each scene's top object.
pub fn write_ranked_csv<W: Write>(out: W, breakdowns: &[ScoreBreakdown]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scene_id", "u_tv", "i_ts", "u_al_t", "combined", "rank"])?;
    for (r, &i) in rank(breakdowns).iter().enumerate() {
        let b = &breakdowns[i];
        let (u_tv, i_ts, u_al_t) = b.top_object().map_or((0.0, 0.0, 0.0), |o| (o.u_tv, o.i_ts, o.u_al_t));
        w.write_record([
            b.scene_id.to_string(),
            u_tv.to_string(),
            i_ts.to_string(),
            u_al_t.to_string(),
            b.sample_score.to_string(),
            (r + 1).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}
