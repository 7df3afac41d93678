use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{Mlp, MlpCheckpoint};
use crate::pseudolabel::ScenePseudoLabels;
use crate::rng;
use crate::synthworld::Scene;

use super::{decode_output, detect, fit, init_net, supervised_targets, Detection, DetectorConfig, HeadLayout, RawPrediction, TrainSample, TrainTarget};

/// Camera-surrogate detector.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub net: Mlp,
    pub layout: HeadLayout,
    pub config: DetectorConfig,
}

#[derive(Serialize, Deserialize)]
struct StudentCheckpoint {
    net: MlpCheckpoint,
    layout: HeadLayout,
    config: DetectorConfig,
}

/// Training samples for the joint objective: labeled proposals at weight 1,
/// pseudo-labeled proposals at `lambda_u * c`, and the remaining proposals
/// of pseudo-labeled scenes as background at `lambda_u`. Proposals listed as
/// ignored contribute nothing. Pseudo weights are further scaled by
/// `n_labeled / n_pseudo`, so the weighted sum is `n_labeled` times
/// [`joint_loss`](super::joint_loss)'s mean-per-set objective.
fn joint_samples<'a>(
    labeled: &[&'a Scene],
    pseudo: &[(&'a Scene, &ScenePseudoLabels)],
    lambda_u: f64,
    cfg: &DetectorConfig,
) -> Result<Vec<TrainSample<'a>>> {
    let mut samples = Vec::new();
    for s in labeled {
        for (p, target) in s.proposals.iter().zip(supervised_targets(s, &cfg.codec)) {
            samples.push(TrainSample {
                features: &p.student_features,
                target,
                weight: 1.0,
            });
        }
    }
    if lambda_u == 0.0 {
        return Ok(samples);
    }
    let n_labeled = samples.len();
    for (scene, labels) in pseudo {
        if labels.scene_id != scene.id {
            return Err(Error::usage(format!(
                "pseudo-labels of scene {} paired with scene {}",
                labels.scene_id, scene.id
            )));
        }
        let mut assigned: Vec<Option<(TrainTarget, f64)>> = vec![Some((TrainTarget::Background, 1.0)); scene.proposals.len()];
        for &i in &labels.ignored {
            if let Some(slot) = assigned.get_mut(i) {
                *slot = None;
            }
        }
        for pl in &labels.labels {
            let slot = assigned
                .get_mut(pl.proposal)
                .ok_or_else(|| Error::usage(format!("pseudo-label proposal {} out of range", pl.proposal)))?;
            *slot = Some((
                TrainTarget::Object {
                    params: cfg.codec.encode(&pl.bbox),
                    category: pl.category,
                },
                pl.confidence,
            ));
        }
        for (p, a) in scene.proposals.iter().zip(assigned) {
            if let Some((target, c)) = a {
                samples.push(TrainSample {
                    features: &p.student_features,
                    target,
                    weight: lambda_u * c,
                });
            }
        }
    }
    let n_pseudo = samples.len() - n_labeled;
    if n_pseudo > 0 {
        let scale = n_labeled as f64 / n_pseudo as f64;
        samples[n_labeled..].iter_mut().for_each(|s| s.weight *= scale);
    }
    Ok(samples)
}

/// Train one student on the joint objective.
pub fn train_student(
    labeled: &[&Scene],
    pseudo: &[(&Scene, &ScenePseudoLabels)],
    lambda_u: f64,
    cfg: &DetectorConfig,
    n_categories: usize,
    seed: u64,
) -> Result<StudentModel> {
    cfg.validate()?;
    if !(lambda_u >= 0.0) {
        return Err(Error::usage(format!("lambda_u must be non-negative, got {lambda_u}")));
    }
    let input = labeled
        .iter()
        .flat_map(|s| s.proposals.first())
        .map(|p| p.student_features.len())
        .next()
        .ok_or_else(|| Error::usage("student needs a non-empty labeled set"))?;
    let layout = HeadLayout::configured(false, n_categories, cfg);
    let samples = joint_samples(labeled, pseudo, lambda_u, cfg)?;
    let mut net = init_net(input, &layout, cfg, seed)?;
    let mut shuffle = rng::stream(seed, &[rng::tag("shuffle")]);
    fit(&mut net, &layout, &samples, cfg, &mut shuffle)?;
    Ok(StudentModel {
        net,
        layout,
        config: cfg.clone(),
    })
}

impl StudentModel {
    pub fn infer(&self, scene: &Scene) -> Result<Vec<Detection>> {
        detect(
            &self.net,
            &self.layout,
            &self.config,
            scene.proposals.iter().enumerate().map(|(i, p)| (i, p.student_features.clone())),
        )
    }

    pub fn predict(&self, features: &[f64]) -> Result<RawPrediction> {
        Ok(decode_output(&self.net.forward(features)?, &self.layout, &self.config.codec))
    }

    /// Last-hidden-layer embedding of one proposal.
    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.net.embed(features)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&StudentCheckpoint {
            net: self.net.to_checkpoint(),
            layout: self.layout,
            config: self.config.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: StudentCheckpoint = serde_json::from_str(text)?;
        Ok(StudentModel {
            net: Mlp::from_checkpoint(&ck.net)?,
            layout: ck.layout,
            config: ck.config,
        })
    }
}

/// Students that share architecture and data but differ in init and
/// shuffle seeds. Member 0 is the deployed student.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentEnsemble {
    pub members: Vec<StudentModel>,
}

impl StudentEnsemble {
    pub fn member_seed(seed: u64, k: usize) -> u64 {
        rng::derive_seed(seed, &[rng::tag("member"), k as u64])
    }

    /// Train `count` members (any count ≥ 1). Member `k` is identical to
    /// the `k`-th member of any larger ensemble with the same seed.
    pub fn train_members(
        labeled: &[&Scene],
        pseudo: &[(&Scene, &ScenePseudoLabels)],
        lambda_u: f64,
        cfg: &DetectorConfig,
        n_categories: usize,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::usage("an ensemble needs at least one member"));
        }
        let members = (0..count)
            .into_par_iter()
            .map(|k| train_student(labeled, pseudo, lambda_u, cfg, n_categories, Self::member_seed(seed, k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(StudentEnsemble { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn deployed(&self) -> &StudentModel {
        &self.members[0]
    }

    /// Detections of every member on one scene.
    pub fn infer(&self, scene: &Scene) -> Result<Vec<Vec<Detection>>> {
        self.members.iter().map(|m| m.infer(scene)).collect()
    }
}

/// Train an ensemble of `m ≥ 2` students; variance across members is
/// undefined below two.
pub fn train_ensemble(
    labeled: &[&Scene],
    pseudo: &[(&Scene, &ScenePseudoLabels)],
    lambda_u: f64,
    cfg: &DetectorConfig,
    n_categories: usize,
    m: usize,
    seed: u64,
) -> Result<StudentEnsemble> {
    if m < 2 {
        return Err(Error::usage(format!("ensemble size must be at least 2, got {m}")));
    }
    StudentEnsemble::train_members(labeled, pseudo, lambda_u, cfg, n_categories, m, seed)
}
