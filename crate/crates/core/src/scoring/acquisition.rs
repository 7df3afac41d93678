use rand::seq::SliceRandom;

use crate::detectors::{proposal_loss, supervised_targets, StudentEnsemble, StudentModel, TeacherModel};
use crate::error::{Error, Result};
use crate::registry::{Registry, StrategySpec};
use crate::rng;
use crate::synthworld::Scene;

use super::{score_pool, ScoreBreakdown, ScoringConfig};

/// Everything a selection strategy may look at.
pub struct AcquisitionContext<'a> {
    pub teacher: &'a TeacherModel,
    /// Trained students; strategies without `needs_ensemble` only use
    /// member 0.
    pub ensemble: &'a StudentEnsemble,
    pub labeled: &'a [&'a Scene],
    pub unlabeled: &'a [&'a Scene],
    pub scoring: ScoringConfig,
    pub seed: u64,
    /// Whether stored annotations of unlabeled scenes may be read. Only
    /// the loss oracle uses them.
    pub ground_truth_access: bool,
}

pub trait Acquisition: Send + Sync {
    fn name(&self) -> &'static str;

    fn needs_ensemble(&self) -> bool {
        false
    }

    /// Ids of the scenes to label next, in selection order.
    fn select(&self, ctx: &AcquisitionContext<'_>, budget: usize) -> Result<Vec<u64>>;
}

fn check_budget(ctx: &AcquisitionContext<'_>, budget: usize) -> Result<()> {
    if budget > ctx.unlabeled.len() {
        return Err(Error::usage(format!(
            "budget {budget} exceeds the {} unlabeled scenes",
            ctx.unlabeled.len()
        )));
    }
    Ok(())
}

/// Top-`budget` scenes by descending score. Equal scores are ordered by a
/// per-scene key drawn from the seed.
pub fn select_top(unlabeled: &[&Scene], scores: &[f64], budget: usize, seed: u64) -> Vec<u64> {
    let key = |id: u64| rng::derive_seed(seed, &[rng::tag("tie"), id]);
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(key(unlabeled[a].id).cmp(&key(unlabeled[b].id)))
    });
    order.into_iter().take(budget).map(|i| unlabeled[i].id).collect()
}

pub struct RandomSelection;

impl Acquisition for RandomSelection {
    fn name(&self) -> &'static str {
        "random"
    }

    fn select(&self, ctx: &AcquisitionContext<'_>, budget: usize) -> Result<Vec<u64>> {
        check_budget(ctx, budget)?;
        let mut ids: Vec<u64> = ctx.unlabeled.iter().map(|s| s.id).collect();
        ids.shuffle(&mut rng::stream(ctx.seed, &[rng::tag("random-selection")]));
        ids.truncate(budget);
        Ok(ids)
    }
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

pub struct EntropySelection;

impl Acquisition for EntropySelection {
    fn name(&self) -> &'static str {
        "entropy"
    }

    fn select(&self, ctx: &AcquisitionContext<'_>, budget: usize) -> Result<Vec<u64>> {
        check_budget(ctx, budget)?;
        let student = ctx.ensemble.deployed();
        let scores = ctx
            .unlabeled
            .iter()
            .map(|s| {
                Ok(student
                    .infer(s)?
                    .iter()
                    .map(|d| entropy(&d.class_probs))
                    .fold(0.0, f64::max))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(select_top(ctx.unlabeled, &scores, budget, ctx.seed))
    }
}

/// Greedy k-center: repeatedly pick the point farthest (Euclidean) from its
/// nearest center. With no centers the first point starts the set.
pub fn k_center_greedy(points: &[Vec<f64>], centers: &[Vec<f64>], budget: usize) -> Vec<usize> {
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| centers.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut chosen = Vec::with_capacity(budget);
    for _ in 0..budget.min(points.len()) {
        let next = (0..points.len())
            .filter(|i| !chosen.contains(i))
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if nearest[b] >= nearest[i] => Some(b),
                _ => Some(i),
            })
            .expect("budget bounded by point count");
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(p, &points[next]));
        }
    }
    chosen
}

/// Mean of the student's last hidden layer over the scene's proposals.
fn scene_embedding(student: &StudentModel, scene: &Scene) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for p in &scene.proposals {
        let e = student.embed(&p.student_features)?;
        match &mut acc {
            Some(a) => a.iter_mut().zip(&e).for_each(|(x, y)| *x += y),
            None => acc = Some(e),
        }
    }
    let n = scene.proposals.len().max(1) as f64;
    let dim = student.net.layer_dims()[student.net.layer_dims().len() - 2];
    Ok(acc.map_or_else(|| vec![0.0; dim], |a| a.into_iter().map(|x| x / n).collect()))
}

pub struct CoresetSelection;

impl Acquisition for CoresetSelection {
    fn name(&self) -> &'static str {
        "coreset"
    }

    fn select(&self, ctx: &AcquisitionContext<'_>, budget: usize) -> Result<Vec<u64>> {
        check_budget(ctx, budget)?;
        let student = ctx.ensemble.deployed();
        let embed = |scenes: &[&Scene]| -> Result<Vec<Vec<f64>>> { scenes.iter().map(|s| scene_embedding(student, s)).collect() };
        let points = embed(ctx.unlabeled)?;
        let centers = embed(ctx.labeled)?;
        Ok(k_center_greedy(&points, &centers, budget)
            .into_iter()
            .map(|i| ctx.unlabeled[i].id)
            .collect())
    }
}

/// Simulation-only oracle: the deployed student's true loss on each scene.
pub struct LossOracle;

impl Acquisition for LossOracle {
    fn name(&self) -> &'static str {
        "loss_oracle"
    }

    fn select(&self, ctx: &AcquisitionContext<'_>, budget: usize) -> Result<Vec<u64>> {
        check_budget(ctx, budget)?;
        if !ctx.ground_truth_access {
            return Err(Error::usage(
                "loss_oracle reads annotations of unlabeled scenes; enable ground-truth access to use it",
            ));
        }
        let student = ctx.ensemble.deployed();
        let scores = ctx
            .unlabeled
            .iter()
            .map(|s| {
                let targets = supervised_targets(s, &student.config.codec);
                s.proposals.iter().zip(&targets).try_fold(0.0, |acc, (p, t)| {
                    let out = student.net.forward(&p.student_features)?;
                    Ok(acc + proposal_loss(&out, t, &student.layout).0)
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(select_top(ctx.unlabeled, &scores, budget, ctx.seed))
    }
}

/// Which part of the object score ranks scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    /// `(u_tv + i_ts) * u_al_t`
    Combined,
    TotalVariance,
    Inconsistency,
    Aleatoric,
    /// `u_tv + i_ts`
    Epistemic,
}

impl Component {
    pub fn sample_score(&self, b: &ScoreBreakdown) -> f64 {
        b.objects
            .iter()
            .map(|o| match self {
                Component::Combined => o.combined,
                Component::TotalVariance => o.u_tv,
                Component::Inconsistency => o.i_ts,
                Component::Aleatoric => o.u_al_t,
                Component::Epistemic => o.u_tv + o.i_ts,
            })
            .fold(0.0, f64::max)
    }
}

pub struct MonoligSelection {
    pub name: &'static str,
    pub component: Component,
}

impl Acquisition for MonoligSelection {
    fn name(&self) -> &'static str {
        self.name
    }

    fn needs_ensemble(&self) -> bool {
        true
    }

    fn select(&self, ctx: &AcquisitionContext<'_>, budget: usize) -> Result<Vec<u64>> {
        check_budget(ctx, budget)?;
        let breakdowns = score_pool(ctx.ensemble, ctx.teacher, ctx.unlabeled, &ctx.scoring)?;
        let scores: Vec<f64> = breakdowns.iter().map(|b| self.component.sample_score(b)).collect();
        Ok(select_top(ctx.unlabeled, &scores, budget, ctx.seed))
    }
}

pub fn registry() -> Registry<dyn Acquisition> {
    fn plain<A: Acquisition + 'static>(s: &StrategySpec, a: A) -> Result<Box<dyn Acquisition>> {
        s.expect_keys(&[])?;
        Ok(Box::new(a))
    }
    fn monolig(s: &StrategySpec, name: &'static str, component: Component) -> Result<Box<dyn Acquisition>> {
        plain(s, MonoligSelection { name, component })
    }
    let mut r: Registry<dyn Acquisition> = Registry::new("selection method");
    r.register("random", |s| plain(s, RandomSelection))
        .register("entropy", |s| plain(s, EntropySelection))
        .register("coreset", |s| plain(s, CoresetSelection))
        .register("loss_oracle", |s| plain(s, LossOracle))
        .register("monolig", |s| monolig(s, "monolig", Component::Combined))
        .register("u_tv", |s| monolig(s, "u_tv", Component::TotalVariance))
        .register("i_ts", |s| monolig(s, "i_ts", Component::Inconsistency))
        .register("u_al", |s| monolig(s, "u_al", Component::Aleatoric))
        .register("tv_ts", |s| monolig(s, "tv_ts", Component::Epistemic));
    r
}

pub fn build(spec: &StrategySpec) -> Result<Box<dyn Acquisition>> {
    registry().build(spec)
}
