use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{Mlp, MlpCheckpoint};
use crate::rng;
use crate::synthworld::Scene;

use super::{decode_output, detect, fit, init_net, supervised_targets, Detection, DetectorConfig, HeadLayout, RawPrediction, TrainSample};

/// LiDAR-surrogate detector, optionally with a Gaussian location head.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    pub net: Mlp,
    pub layout: HeadLayout,
    pub config: DetectorConfig,
}

#[derive(Serialize, Deserialize)]
struct TeacherCheckpoint {
    net: MlpCheckpoint,
    layout: HeadLayout,
    config: DetectorConfig,
}

/// Train on every proposal of the labeled scenes: NLL on the location
/// parameters when the head is enabled, squared error on the rest, and
/// cross-entropy on the class.
pub fn train_teacher(scenes: &[&Scene], cfg: &DetectorConfig, n_categories: usize, seed: u64) -> Result<TeacherModel> {
    cfg.validate()?;
    let input = scenes
        .iter()
        .flat_map(|s| s.proposals.first())
        .map(|p| p.teacher_features.len())
        .next()
        .ok_or_else(|| Error::usage("teacher training set is empty"))?;
    let layout = HeadLayout::configured(cfg.aleatoric_head, n_categories, cfg);
    let targets: Vec<_> = scenes.iter().map(|s| supervised_targets(s, &cfg.codec)).collect();
    let samples: Vec<TrainSample> = scenes
        .iter()
        .zip(&targets)
        .flat_map(|(s, t)| {
            s.proposals.iter().zip(t).map(|(p, &target)| TrainSample {
                features: &p.teacher_features,
                target,
                weight: 1.0,
            })
        })
        .collect();
    let mut net = init_net(input, &layout, cfg, seed)?;
    let mut shuffle = rng::stream(seed, &[rng::tag("shuffle")]);
    fit(&mut net, &layout, &samples, cfg, &mut shuffle)?;
    Ok(TeacherModel {
        net,
        layout,
        config: cfg.clone(),
    })
}

impl TeacherModel {
    /// Detections above the detection threshold, after NMS. Sigmas are
    /// standard deviations in meters.
    pub fn infer(&self, scene: &Scene) -> Result<Vec<Detection>> {
        detect(
            &self.net,
            &self.layout,
            &self.config,
            scene.proposals.iter().enumerate().map(|(i, p)| (i, p.teacher_features.clone())),
        )
    }

    /// Decoded output for one feature vector, without thresholding.
    pub fn predict(&self, features: &[f64]) -> Result<RawPrediction> {
        Ok(decode_output(&self.net.forward(features)?, &self.layout, &self.config.codec))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TeacherCheckpoint {
            net: self.net.to_checkpoint(),
            layout: self.layout,
            config: self.config.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: TeacherCheckpoint = serde_json::from_str(text)?;
        Ok(TeacherModel {
            net: Mlp::from_checkpoint(&ck.net)?,
            layout: ck.layout,
            config: ck.config,
        })
    }
}

/// Free-function form of [`TeacherModel::infer`].
pub fn teacher_infer(model: &TeacherModel, scene: &Scene) -> Result<Vec<Detection>> {
    model.infer(scene)
}
