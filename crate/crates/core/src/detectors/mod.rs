//! Teacher (LiDAR surrogate) and student (camera surrogate) detectors.
//!
//! Both are per-proposal MLPs: each proposal's features are regressed to
//! seven box parameters and classified into object categories plus
//! background. The teacher can additionally carry a Gaussian head that
//! predicts log-variances for the three location parameters.

pub mod loss;
mod student;
mod teacher;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms_indices, Box3D, ScoredBox, N_BOX_PARAMS};
use crate::nnet::{Activation, AdamConfig, AdamState, Gradients, Mlp};
use crate::rng::{self, Rng};
use crate::synthworld::Scene;

pub use loss::{gaussian_nll, joint_loss, proposal_loss, weighted_student_loss, SquaredLossDecomposition, TrainTarget};
pub use student::{train_ensemble, train_student, StudentEnsemble, StudentModel};
pub use teacher::{teacher_infer, train_teacher, TeacherModel};

/// Largest probability a detector reports.
const MAX_PROB: f64 = 1.0 - f64::EPSILON;

/// A detected object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub category: u32,
    /// Probability of `category`.
    pub p: f64,
    /// Aleatoric standard deviations (meters) of `cx, cy, cz`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_xyz: Option<[f64; 3]>,
    /// Index of the proposal the detection was regressed from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<usize>,
    /// Full class distribution, background last.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_probs: Vec<f64>,
}

impl Detection {
    pub fn scored_box(&self) -> ScoredBox {
        ScoredBox::new(self.bbox, self.p, self.category)
    }
}

/// How the three location uncertainties fold into one box score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    /// `sigma_x + sigma_y + sigma_z`
    #[default]
    StdSum,
    /// `sigma_x^2 + sigma_y^2 + sigma_z^2`
    VarSum,
}

/// Aleatoric uncertainty of a box, `u_al_t`.
pub fn aleatoric_box_score(det: &Detection, mode: UncertaintyMode) -> Result<f64> {
    let s = det
        .sigma_xyz
        .ok_or_else(|| Error::usage("detection carries no aleatoric sigmas"))?;
    Ok(match mode {
        UncertaintyMode::StdSum => s.iter().sum(),
        UncertaintyMode::VarSum => s.iter().map(|v| v * v).sum(),
    })
}

/// Normalization between box parameters and regression targets: affine
/// per parameter, except that depth may be regressed as
/// `ln(cz / center) / scale` and the lateral offset as the bearing
/// `cx / cz`, the way image-based detectors regress a projected center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxCodec {
    pub center: [f64; N_BOX_PARAMS],
    pub scale: [f64; N_BOX_PARAMS],
    pub log_depth: bool,
    pub bearing_x: bool,
}

impl Default for BoxCodec {
    fn default() -> Self {
        BoxCodec {
            center: [0.0, 0.9, 30.0, 1.6, 1.5, 3.9, 0.0],
            scale: [10.0, 0.3, 15.0, 0.3, 0.3, 0.6, 1.0],
            log_depth: false,
            bearing_x: false,
        }
    }
}

const LATERAL: usize = 0;
const DEPTH: usize = 2;

impl BoxCodec {
    /// Image-plane parameterization: bearing and log-depth.
    pub fn camera() -> Self {
        let mut c = BoxCodec::default();
        c.center[LATERAL] = 0.0;
        c.scale[LATERAL] = 0.5;
        c.bearing_x = true;
        c.center[DEPTH] = 20.0;
        c.scale[DEPTH] = 0.5;
        c.log_depth = true;
        c
    }

    pub fn encode(&self, b: &Box3D) -> [f64; N_BOX_PARAMS] {
        let mut p = b.params();
        let cz = p[DEPTH].max(1e-6);
        if self.bearing_x {
            p[LATERAL] /= cz;
        }
        if self.log_depth {
            p[DEPTH] = (cz / self.center[DEPTH]).ln() + self.center[DEPTH];
        }
        let mut t = [0.0; N_BOX_PARAMS];
        for i in 0..N_BOX_PARAMS {
            t[i] = (p[i] - self.center[i]) / self.scale[i];
        }
        t
    }

    pub fn decode(&self, t: &[f64]) -> Box3D {
        let mut p = [0.0; N_BOX_PARAMS];
        for i in 0..N_BOX_PARAMS {
            p[i] = t[i] * self.scale[i] + self.center[i];
        }
        if self.log_depth {
            // Clamp the exponent so wild outputs stay finite.
            p[DEPTH] = self.center[DEPTH] * (p[DEPTH] - self.center[DEPTH]).clamp(-20.0, 20.0).exp();
        }
        if self.bearing_x {
            p[LATERAL] *= p[DEPTH];
        }
        Box3D::from_params_clamped(&p)
    }

    /// Metric std of parameter `i` for a target-space std `s`, to first
    /// order around the decoded box and ignoring cross terms.
    pub fn metric_std(&self, i: usize, s: f64, b: &Box3D) -> f64 {
        let nonlinear = (i == DEPTH && self.log_depth) || (i == LATERAL && self.bearing_x);
        if nonlinear {
            s * self.scale[i] * b.cz
        } else {
            s * self.scale[i]
        }
    }
}

/// Output slot layout: box means, optional log-variances, class logits with
/// background last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub aleatoric: bool,
    pub n_categories: usize,
    pub class_weight: f64,
    /// Weight of the squared-error box terms.
    #[serde(default = "default_box_weight")]
    pub box_weight: f64,
    /// Switch the box terms from squared to linear error beyond this
    /// target-space distance.
    #[serde(default)]
    pub huber_delta: Option<f64>,
}

impl HeadLayout {
    pub fn new(aleatoric: bool, n_categories: usize) -> Self {
        HeadLayout {
            aleatoric,
            n_categories,
            class_weight: 1.0,
            box_weight: 1.0,
            huber_delta: None,
        }
    }

    pub(crate) fn configured(aleatoric: bool, n_categories: usize, cfg: &DetectorConfig) -> Self {
        HeadLayout {
            class_weight: cfg.class_weight,
            box_weight: cfg.box_weight,
            huber_delta: cfg.huber_delta,
            ..HeadLayout::new(aleatoric, n_categories)
        }
    }

    pub fn logvar_offset(&self) -> usize {
        N_BOX_PARAMS
    }

    pub fn logit_offset(&self) -> usize {
        N_BOX_PARAMS + if self.aleatoric { loss::N_LOCATION } else { 0 }
    }

    pub fn background_class(&self) -> usize {
        self.n_categories
    }

    pub fn output_dim(&self) -> usize {
        self.logit_offset() + self.n_categories + 1
    }
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_epochs() -> usize {
    60
}
fn default_batch() -> usize {
    32
}
fn default_det_threshold() -> f64 {
    0.3
}
fn default_nms_iou() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_class_weight() -> f64 {
    1.0
}
fn default_box_weight() -> f64 {
    1.0
}
fn default_config_box_weight() -> f64 {
    10.0
}
fn default_min_steps() -> usize {
    2000
}
fn default_adam() -> AdamConfig {
    AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    }
}

/// Architecture, optimization and post-processing settings of a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Lower bound on optimizer steps; small training sets get extra epochs.
    #[serde(default = "default_min_steps")]
    pub min_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_adam")]
    pub adam: AdamConfig,
    /// Learning rate reached at the end of training by cosine decay from
    /// `adam.lr`. Equal to `adam.lr` for a constant rate.
    #[serde(default = "default_lr_final")]
    pub lr_final: f64,
    /// Minimum class probability for a proposal to become a detection.
    #[serde(default = "default_det_threshold")]
    pub det_threshold: f64,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
    /// Teacher only: train a Gaussian head on the location parameters.
    #[serde(default = "default_true")]
    pub aleatoric_head: bool,
    #[serde(default)]
    pub uncertainty: UncertaintyMode,
    #[serde(default = "default_class_weight")]
    pub class_weight: f64,
    #[serde(default = "default_config_box_weight")]
    pub box_weight: f64,
    /// Robust box regression: squared error up to this target-space
    /// distance, linear beyond. `None` keeps plain squared error.
    #[serde(default)]
    pub huber_delta: Option<f64>,
    #[serde(default)]
    pub codec: BoxCodec,
}

fn default_lr_final() -> f64 {
    1e-5
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            hidden: default_hidden(),
            activation: default_activation(),
            epochs: default_epochs(),
            min_steps: default_min_steps(),
            batch_size: default_batch(),
            adam: default_adam(),
            lr_final: default_lr_final(),
            det_threshold: default_det_threshold(),
            nms_iou: default_nms_iou(),
            aleatoric_head: true,
            uncertainty: UncertaintyMode::StdSum,
            class_weight: 1.0,
            box_weight: default_config_box_weight(),
            huber_delta: None,
            codec: BoxCodec::default(),
        }
    }
}

impl DetectorConfig {
    /// Student defaults: a camera-view box encoding, ReLU units and robust
    /// regression, which tolerates the outliers among pseudo-labels.
    pub fn student() -> Self {
        DetectorConfig {
            activation: Activation::Relu,
            huber_delta: Some(0.1),
            codec: BoxCodec::camera(),
            ..DetectorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::usage("detector batch_size and hidden sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.det_threshold) {
            return Err(Error::usage("detector det_threshold must lie in [0, 1]"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::usage("detector nms_iou must lie in (0, 1]"));
        }
        if self.huber_delta.is_some_and(|d| !(d > 0.0)) {
            return Err(Error::usage("detector huber_delta must be positive"));
        }
        if !(self.adam.lr > 0.0) || !(self.lr_final > 0.0 && self.lr_final <= self.adam.lr) {
            return Err(Error::usage("detector learning rates must satisfy 0 < lr_final <= adam.lr"));
        }
        Ok(())
    }

    pub(crate) fn layer_dims(&self, input: usize, layout: &HeadLayout) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(layout.output_dim());
        dims
    }
}

/// One weighted training example.
#[derive(Debug, Clone)]
pub struct TrainSample<'a> {
    pub features: &'a [f64],
    pub target: TrainTarget,
    pub weight: f64,
}

/// Mini-batch Adam on a weighted sum of per-proposal losses. Sample order is
/// reshuffled every epoch from `shuffle_rng`.
pub(crate) fn fit(
    net: &mut Mlp,
    layout: &HeadLayout,
    samples: &[TrainSample<'_>],
    cfg: &DetectorConfig,
    shuffle_rng: &mut Rng,
) -> Result<()> {
    let mut order: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].weight > 0.0).collect();
    if order.is_empty() {
        return Ok(());
    }
    let mut adam = AdamState::new(net, cfg.adam);
    let mut grads = Gradients::zeros_like(net);
    let per_epoch = order.len().div_ceil(cfg.batch_size);
    let epochs = cfg.epochs.max(cfg.min_steps.div_ceil(per_epoch));
    let total = (epochs * per_epoch).max(1) as f64;
    let mut t = 0.0;
    for _ in 0..epochs {
        order.shuffle(shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * t / total).cos());
            adam.config.lr = cfg.lr_final + (cfg.adam.lr - cfg.lr_final) * cos;
            t += 1.0;
            grads.0.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let s = &samples[i];
                let trace = net.forward_trace(s.features)?;
                let (_, mut g) = proposal_loss(trace.output(), &s.target, layout);
                g.iter_mut().for_each(|v| *v *= s.weight);
                net.backward_into(&trace, &g, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(net, &grads)?;
        }
    }
    Ok(())
}

/// Raw per-proposal head output decoded into box, class distribution and
/// optional location sigmas (meters).
#[derive(Debug, Clone)]
pub struct RawPrediction {
    pub bbox: Box3D,
    pub class_probs: Vec<f64>,
    pub sigma_xyz: Option<[f64; 3]>,
}

pub(crate) fn decode_output(out: &[f64], layout: &HeadLayout, codec: &BoxCodec) -> RawPrediction {
    let bbox = codec.decode(&out[..N_BOX_PARAMS]);
    let sigma_xyz = layout.aleatoric.then(|| {
        let mut s = [0.0; 3];
        for (i, si) in s.iter_mut().enumerate() {
            let lv = out[layout.logvar_offset() + i].clamp(loss::LOGVAR_MIN, loss::LOGVAR_MAX);
            *si = codec.metric_std(i, (0.5 * lv).exp(), &bbox);
        }
        s
    });
    let class_probs = loss::softmax(&out[layout.logit_offset()..]);
    RawPrediction {
        bbox,
        class_probs,
        sigma_xyz,
    }
}

/// Threshold on the best object-class probability, then NMS.
pub(crate) fn detect(
    net: &Mlp,
    layout: &HeadLayout,
    cfg: &DetectorConfig,
    features: impl Iterator<Item = (usize, Vec<f64>)>,
) -> Result<Vec<Detection>> {
    let mut cands = Vec::new();
    for (idx, f) in features {
        let out = net.forward(&f)?;
        let raw = decode_output(&out, layout, &cfg.codec);
        let (category, p) = raw.class_probs[..layout.n_categories]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
        let p = p.min(MAX_PROB);
        if p > cfg.det_threshold {
            cands.push(Detection {
                bbox: raw.bbox,
                category: category as u32,
                p,
                sigma_xyz: raw.sigma_xyz,
                proposal: Some(idx),
                class_probs: raw.class_probs,
            });
        }
    }
    let boxes: Vec<ScoredBox> = cands.iter().map(Detection::scored_box).collect();
    let keep = nms_indices(&boxes, cfg.nms_iou)?;
    Ok(keep.into_iter().map(|i| cands[i].clone()).collect())
}

pub(crate) fn init_net(input: usize, layout: &HeadLayout, cfg: &DetectorConfig, seed: u64) -> Result<Mlp> {
    let mut r = rng::stream(seed, &[rng::tag("init")]);
    Mlp::new(&cfg.layer_dims(input, layout), cfg.activation, &mut r)
}

/// Supervised targets for every proposal of a labeled scene.
pub fn supervised_targets(scene: &Scene, codec: &BoxCodec) -> Vec<TrainTarget> {
    scene
        .proposals
        .iter()
        .map(|p| match &p.gt {
            Some(t) => TrainTarget::Object {
                params: codec.encode(&t.bbox),
                category: t.category,
            },
            None => TrainTarget::Background,
        })
        .collect()
}
