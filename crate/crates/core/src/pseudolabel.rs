//! Pseudo-labels for the unlabeled pool, produced from teacher detections.
//!
//! Strategies decide the confidence each teacher detection carries into the
//! student's loss, or drop it:
//!
//! * `aleatoric`: `c = clamp(1 - u_al_t, 0, 1) * p`, never drops.
//! * `uniform`: every detection at `c = 1`.
//! * `hard_threshold` (param `tau`, default 0.7): keep `p >= tau` at `c = 1`.

use serde::{Deserialize, Serialize};

use crate::detectors::{aleatoric_box_score, Detection, TeacherModel, UncertaintyMode};
use crate::error::Result;
use crate::geometry::Box3D;
use crate::registry::{Registry, StrategySpec};
use crate::synthworld::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub scene_id: u64,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub category: u32,
    pub confidence: f64,
    /// Proposal the teacher detection came from.
    pub proposal: usize,
}

/// Pseudo-labels of one scene plus the proposals whose teacher detections
/// were filtered out (they carry no loss at all).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePseudoLabels {
    pub scene_id: u64,
    pub labels: Vec<PseudoLabel>,
    pub ignored: Vec<usize>,
}

/// `clamp(1 - u_al_t, 0, 1) * p`
pub fn confidence_from(u_al_t: f64, p: f64) -> f64 {
    (1.0 - u_al_t).clamp(0.0, 1.0) * p
}

/// Confidence of a teacher detection under the aleatoric weighting.
pub fn confidence(det: &Detection, mode: UncertaintyMode) -> Result<f64> {
    Ok(confidence_from(aleatoric_box_score(det, mode)?, det.p))
}

pub trait PseudoLabelStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Loss weight for a teacher detection; `None` drops it.
    fn weigh(&self, det: &Detection, mode: UncertaintyMode) -> Result<Option<f64>>;
}

pub struct AleatoricWeighting;

impl PseudoLabelStrategy for AleatoricWeighting {
    fn name(&self) -> &'static str {
        "aleatoric"
    }

    fn weigh(&self, det: &Detection, mode: UncertaintyMode) -> Result<Option<f64>> {
        confidence(det, mode).map(Some)
    }
}

pub struct UniformConfidence;

impl PseudoLabelStrategy for UniformConfidence {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn weigh(&self, _: &Detection, _: UncertaintyMode) -> Result<Option<f64>> {
        Ok(Some(1.0))
    }
}

/// Classification-confidence filter in the style of FixMatch.
pub struct HardThreshold {
    pub tau: f64,
}

impl PseudoLabelStrategy for HardThreshold {
    fn name(&self) -> &'static str {
        "hard_threshold"
    }

    fn weigh(&self, det: &Detection, _: UncertaintyMode) -> Result<Option<f64>> {
        Ok((det.p >= self.tau).then_some(1.0))
    }
}

pub const DEFAULT_TAU: f64 = 0.7;

pub fn registry() -> Registry<dyn PseudoLabelStrategy> {
    let mut r: Registry<dyn PseudoLabelStrategy> = Registry::new("pseudo-label strategy");
    r.register("aleatoric", |s| {
        s.expect_keys(&[])?;
        Ok(Box::new(AleatoricWeighting))
    })
    .register("uniform", |s| {
        s.expect_keys(&[])?;
        Ok(Box::new(UniformConfidence))
    })
    .register("hard_threshold", |s| {
        s.expect_keys(&["tau"])?;
        Ok(Box::new(HardThreshold {
            tau: s.f64_or("tau", DEFAULT_TAU)?,
        }))
    });
    r
}

pub fn build(spec: &StrategySpec) -> Result<Box<dyn PseudoLabelStrategy>> {
    registry().build(spec)
}

/// Pseudo-labels for one scene from already computed teacher detections.
pub fn label_scene(
    scene_id: u64,
    detections: &[Detection],
    strategy: &dyn PseudoLabelStrategy,
    mode: UncertaintyMode,
) -> Result<ScenePseudoLabels> {
    let mut labels = Vec::new();
    let mut ignored = Vec::new();
    for det in detections {
        let proposal = det.proposal.unwrap_or(usize::MAX);
        match strategy.weigh(det, mode)? {
            Some(c) => labels.push(PseudoLabel {
                scene_id,
                bbox: det.bbox,
                category: det.category,
                confidence: c,
                proposal,
            }),
            None => ignored.push(proposal),
        }
    }
    Ok(ScenePseudoLabels {
        scene_id,
        labels,
        ignored,
    })
}

/// Run the teacher over the unlabeled scenes and label them.
pub fn generate(
    teacher: &TeacherModel,
    unlabeled: &[&Scene],
    strategy: &dyn PseudoLabelStrategy,
) -> Result<Vec<ScenePseudoLabels>> {
    unlabeled
        .iter()
        .map(|s| label_scene(s.id, &teacher.infer(s)?, strategy, teacher.config.uncertainty))
        .collect()
}
