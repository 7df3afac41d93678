//! The active-learning cycle: train the teacher on the labeled pool,
//! pseudo-label the unlabeled pool, train the students on both, evaluate,
//! then move the top-scored unlabeled scenes into the labeled pool.
//!
//! Models are retrained from scratch every cycle with seeds derived from the
//! trial seed and the cycle index, so a cycle is reproducible from its
//! [`PoolState`] alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{train_teacher, DetectorConfig, StudentEnsemble, TeacherModel};
use crate::error::{Error, Result};
use crate::eval::{band_ap, data_savings, BandAp, DataSavings, Difficulty};
use crate::geometry::ScoredBox;
use crate::pseudolabel;
use crate::registry::StrategySpec;
use crate::rng;
use crate::scoring::{self, Acquisition, AcquisitionContext, ScoringConfig};
use crate::synthworld::Scene;

/// Labeled and unlabeled scene ids at the start of a cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolState {
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
    pub cycle: usize,
}

impl PoolState {
    /// Ids sorted and unique within each pool, pools disjoint, labeled
    /// pool non-empty.
    pub fn validate(&self) -> Result<()> {
        let sorted = |v: &[u64]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.labeled) || !sorted(&self.unlabeled) {
            return Err(Error::schema("pool ids must be sorted and unique"));
        }
        let lab: BTreeSet<u64> = self.labeled.iter().copied().collect();
        if let Some(id) = self.unlabeled.iter().find(|id| lab.contains(id)) {
            return Err(Error::schema(format!("scene {id} is in both pools")));
        }
        if self.labeled.is_empty() {
            return Err(Error::schema("labeled pool is empty"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn labeled_fraction(&self) -> f64 {
        self.labeled.len() as f64 / self.total() as f64
    }

    /// Move `selected` from the unlabeled to the labeled pool and advance
    /// the cycle.
    pub fn advance(&self, selected: &[u64]) -> Result<PoolState> {
        let chosen: BTreeSet<u64> = selected.iter().copied().collect();
        if chosen.len() != selected.len() {
            return Err(Error::usage("selection contains duplicate scenes"));
        }
        let unl: BTreeSet<u64> = self.unlabeled.iter().copied().collect();
        if let Some(id) = chosen.iter().find(|id| !unl.contains(id)) {
            return Err(Error::usage(format!("selected scene {id} is not unlabeled")));
        }
        let mut labeled = self.labeled.clone();
        labeled.extend(&chosen);
        labeled.sort_unstable();
        Ok(PoolState {
            labeled,
            unlabeled: self.unlabeled.iter().copied().filter(|id| !chosen.contains(id)).collect(),
            cycle: self.cycle + 1,
        })
    }
}

fn floor_count(fraction: f64, n: usize) -> usize {
    // Tolerate representation error such as 0.3 * 100 = 30.000000000000004.
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Seeded uniform split with `floor(initial_fraction * n)` labeled scenes.
pub fn init_pools(scene_ids: &[u64], initial_fraction: f64, seed: u64) -> Result<PoolState> {
    if !(initial_fraction > 0.0 && initial_fraction < 1.0) {
        return Err(Error::usage(format!(
            "initial_fraction must lie in (0, 1), got {initial_fraction}"
        )));
    }
    let n_lab = floor_count(initial_fraction, scene_ids.len());
    if n_lab == 0 || n_lab == scene_ids.len() {
        return Err(Error::usage(format!(
            "initial_fraction {initial_fraction} of {} scenes leaves a pool empty",
            scene_ids.len()
        )));
    }
    let mut ids = scene_ids.to_vec();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::usage("scene ids must be unique"));
    }
    ids.shuffle(&mut rng::stream(seed, &[rng::tag("init-pools")]));
    let mut labeled = ids[..n_lab].to_vec();
    let mut unlabeled = ids[n_lab..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(PoolState {
        labeled,
        unlabeled,
        cycle: 0,
    })
}

/// Scenes labeled per cycle: `floor(fraction * n_total)`, at least 1.
pub fn budget_size(n_total: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::usage(format!("budget fraction must lie in (0, 1], got {fraction}")));
    }
    Ok(floor_count(fraction, n_total).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Convergence {
    /// Number of most recent cycle-to-cycle changes considered.
    pub window: usize,
    /// Stop once the headline AP spans less than this over the window.
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopCondition {
    /// Maximum number of evaluated cycles, the initial one included.
    #[serde(default)]
    pub max_cycles: Option<usize>,
    /// Stop once the headline AP reaches this value.
    #[serde(default)]
    pub target_ap: Option<f64>,
    #[serde(default)]
    pub convergence: Option<Convergence>,
}

impl Default for StopCondition {
    fn default() -> Self {
        StopCondition {
            max_cycles: Some(7),
            target_ap: None,
            convergence: None,
        }
    }
}

impl StopCondition {
    pub fn validate(&self) -> Result<()> {
        if self.max_cycles.is_none() && self.target_ap.is_none() && self.convergence.is_none() {
            return Err(Error::usage("stop condition needs max_cycles, target_ap or convergence"));
        }
        if self.max_cycles == Some(0) {
            return Err(Error::usage("stop.max_cycles must be positive"));
        }
        if let Some(c) = self.convergence {
            if c.window == 0 || !(c.epsilon >= 0.0) {
                return Err(Error::usage("stop.convergence needs window > 0 and epsilon >= 0"));
            }
        }
        Ok(())
    }

    /// Whether the trial ends after the cycles evaluated so far.
    pub fn reached(&self, headline: &[Option<f64>]) -> bool {
        if self.max_cycles.is_some_and(|m| headline.len() >= m) {
            return true;
        }
        if let (Some(t), Some(Some(last))) = (self.target_ap, headline.last()) {
            if *last >= t {
                return true;
            }
        }
        if let Some(c) = self.convergence {
            if headline.len() > c.window {
                let recent: Option<Vec<f64>> = headline[headline.len() - c.window - 1..].iter().copied().collect();
                if let Some(r) = recent {
                    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    return hi - lo < c.epsilon;
                }
            }
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Held-out scenes, generated apart from the pools.
    #[serde(default = "default_eval_scenes")]
    pub n_scenes: usize,
    #[serde(default = "default_iou")]
    pub iou_thresh: f64,
    /// Band used for stopping, learning curves and data savings.
    #[serde(default = "default_headline")]
    pub headline: Difficulty,
    /// Fraction of the fully-trained headline AP used for data savings.
    #[serde(default = "default_savings_target")]
    pub savings_target: f64,
}

fn default_eval_scenes() -> usize {
    500
}
fn default_iou() -> f64 {
    0.7
}
fn default_headline() -> Difficulty {
    Difficulty::Moderate
}
fn default_savings_target() -> f64 {
    0.8
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_scenes: default_eval_scenes(),
            iou_thresh: default_iou(),
            headline: default_headline(),
            savings_target: default_savings_target(),
        }
    }
}

/// Everything about the models trained inside a cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    #[serde(default)]
    pub teacher: DetectorConfig,
    /// Fields left out keep [`DetectorConfig::student`]'s values.
    #[serde(default = "DetectorConfig::student", deserialize_with = "student_config")]
    pub student: DetectorConfig,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    /// Weight of the pseudo-labeled loss; 0 trains on labeled scenes only.
    #[serde(default = "default_lambda_u")]
    pub lambda_u: f64,
    #[serde(default = "default_pseudo_label")]
    pub pseudo_label: StrategySpec,
    #[serde(default)]
    pub scoring: ScoringConfig,
}

/// Overlay the given fields on the student defaults.
fn student_config<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<DetectorConfig, D::Error> {
    use serde::de::Error as _;
    fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
        match (base, over) {
            (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
                for (k, v) in o {
                    match b.get_mut(&k) {
                        Some(slot) => merge(slot, v),
                        None => {
                            b.insert(k, v);
                        }
                    }
                }
            }
            (slot, v) => *slot = v,
        }
    }
    let mut base = serde_json::to_value(DetectorConfig::student()).map_err(D::Error::custom)?;
    merge(&mut base, serde_json::Value::deserialize(d)?);
    serde_json::from_value(base).map_err(D::Error::custom)
}

fn default_ensemble_size() -> usize {
    5
}
fn default_lambda_u() -> f64 {
    0.5
}
fn default_pseudo_label() -> StrategySpec {
    StrategySpec::named("aleatoric")
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            teacher: DetectorConfig::default(),
            student: DetectorConfig::student(),
            ensemble_size: default_ensemble_size(),
            lambda_u: default_lambda_u(),
            pseudo_label: default_pseudo_label(),
            scoring: ScoringConfig::default(),
        }
    }
}

impl ModelsConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.scoring.validate()?;
        pseudolabel::build(&self.pseudo_label)?;
        if !(self.lambda_u >= 0.0) {
            return Err(Error::usage(format!("lambda_u must be non-negative, got {}", self.lambda_u)));
        }
        if self.ensemble_size == 0 {
            return Err(Error::usage("ensemble_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    #[serde(default = "default_initial_fraction")]
    pub initial_fraction: f64,
    /// Scenes labeled per cycle as a fraction of the whole pool.
    #[serde(default = "default_budget_fraction")]
    pub budget_fraction: f64,
    #[serde(default)]
    pub stop: StopCondition,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Allow strategies to read annotations of unlabeled scenes.
    #[serde(default)]
    pub ground_truth_access: bool,
    /// Record wall-clock time per cycle; when off, `wall_ms` is 0 and the
    /// outputs are a pure function of the config.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

fn default_initial_fraction() -> f64 {
    0.3
}
fn default_budget_fraction() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            initial_fraction: default_initial_fraction(),
            budget_fraction: default_budget_fraction(),
            stop: StopCondition::default(),
            eval: EvalSettings::default(),
            ground_truth_access: false,
            record_wall_time: true,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        self.stop.validate()?;
        if !(self.initial_fraction > 0.0 && self.initial_fraction < 1.0) {
            return Err(Error::usage("initial_fraction must lie in (0, 1)"));
        }
        budget_size(1, self.budget_fraction)?;
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return Err(Error::usage("eval.iou_thresh must lie in (0, 1]"));
        }
        if self.eval.n_scenes == 0 {
            return Err(Error::usage("eval.n_scenes must be positive"));
        }
        if !(self.eval.savings_target > 0.0 && self.eval.savings_target <= 1.0) {
            return Err(Error::usage("eval.savings_target must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// One evaluated cycle of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub seed: u64,
    pub cycle: usize,
    pub labeled_fraction: f64,
    pub method: String,
    /// Deployed student on the held-out scenes.
    pub ap: BandAp,
    pub teacher_ap: BandAp,
    pub wall_ms: u64,
}

/// The scene pool with id lookup.
pub struct Pool<'a> {
    scenes: &'a [Scene],
    index: HashMap<u64, usize>,
    pub n_categories: usize,
}

impl<'a> Pool<'a> {
    pub fn new(scenes: &'a [Scene], n_categories: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(scenes.len());
        for (i, s) in scenes.iter().enumerate() {
            if index.insert(s.id, i).is_some() {
                return Err(Error::schema(format!("duplicate scene id {}", s.id)));
            }
        }
        Ok(Pool {
            scenes,
            index,
            n_categories,
        })
    }

    pub fn ids(&self) -> Vec<u64> {
        self.scenes.iter().map(|s| s.id).collect()
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn get(&self, ids: &[u64]) -> Result<Vec<&'a Scene>> {
        ids.iter()
            .map(|id| {
                self.index
                    .get(id)
                    .map(|&i| &self.scenes[i])
                    .ok_or_else(|| Error::schema(format!("scene {id} is not in the pool")))
            })
            .collect()
    }
}

/// Models trained in one cycle. Member 0 of the ensemble is the deployed
/// student.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleModels {
    pub teacher: TeacherModel,
    pub ensemble: StudentEnsemble,
}

pub fn cycle_seed(seed: u64, cycle: usize) -> u64 {
    rng::derive_seed(seed, &[rng::tag("cycle"), cycle as u64])
}

/// Train the teacher on the labeled pool, pseudo-label the unlabeled pool
/// and train `members` students on the joint objective.
pub fn train_models(pool: &Pool<'_>, state: &PoolState, cfg: &ModelsConfig, members: usize, seed: u64) -> Result<CycleModels> {
    let cs = cycle_seed(seed, state.cycle);
    let labeled = pool.get(&state.labeled)?;
    let teacher = train_teacher(&labeled, &cfg.teacher, pool.n_categories, rng::derive_seed(cs, &[rng::tag("teacher")]))?;
    let unlabeled = pool.get(&state.unlabeled)?;
    let pseudo = if cfg.lambda_u > 0.0 && !unlabeled.is_empty() {
        let strategy = pseudolabel::build(&cfg.pseudo_label)?;
        pseudolabel::generate(&teacher, &unlabeled, strategy.as_ref())?
    } else {
        Vec::new()
    };
    let pairs: Vec<_> = unlabeled.iter().copied().zip(pseudo.iter()).collect();
    let ensemble = StudentEnsemble::train_members(
        &labeled,
        &pairs,
        cfg.lambda_u,
        &cfg.student,
        pool.n_categories,
        members,
        rng::derive_seed(cs, &[rng::tag("students")]),
    )?;
    Ok(CycleModels { teacher, ensemble })
}

fn ground_truth(scenes: &[Scene]) -> Vec<Vec<ScoredBox>> {
    scenes
        .iter()
        .map(|s| s.objects.iter().map(|o| ScoredBox::new(o.bbox, 1.0, o.category)).collect())
        .collect()
}

/// Band APs of the deployed student and of the teacher on held-out scenes.
pub fn evaluate(models: &CycleModels, eval: &[Scene], iou_thresh: f64) -> Result<(BandAp, BandAp)> {
    let gts = ground_truth(eval);
    let run = |f: &(dyn Fn(&Scene) -> Result<Vec<crate::detectors::Detection>> + Sync)| -> Result<Vec<Vec<ScoredBox>>> {
        eval.par_iter()
            .map(|s| Ok(f(s)?.iter().map(|d| d.scored_box()).collect()))
            .collect()
    };
    let student = run(&|s| models.ensemble.deployed().infer(s))?;
    let teacher = run(&|s| models.teacher.infer(s))?;
    Ok((band_ap(&student, &gts, iou_thresh)?, band_ap(&teacher, &gts, iou_thresh)?))
}

/// Shared inputs of every trial of an experiment.
pub struct TrialContext<'a> {
    pub pool: Pool<'a>,
    pub eval: &'a [Scene],
    pub models: &'a ModelsConfig,
    pub protocol: &'a Protocol,
}

impl TrialContext<'_> {
    pub fn budget(&self) -> Result<usize> {
        budget_size(self.pool.len(), self.protocol.budget_fraction)
    }

    fn members_for(&self, method: &dyn Acquisition) -> Result<usize> {
        if method.needs_ensemble() {
            if self.models.ensemble_size < 2 {
                return Err(Error::usage(format!(
                    "selection method `{}` needs ensemble_size >= 2",
                    method.name()
                )));
            }
            Ok(self.models.ensemble_size)
        } else {
            Ok(1)
        }
    }

    /// Train and evaluate the models of one cycle.
    pub fn train_and_evaluate(
        &self,
        state: &PoolState,
        method: &dyn Acquisition,
        method_name: &str,
        seed: u64,
    ) -> Result<(CycleModels, CycleReport)> {
        let start = Instant::now();
        let models = train_models(&self.pool, state, self.models, self.members_for(method)?, seed)?;
        let (ap, teacher_ap) = evaluate(&models, self.eval, self.protocol.eval.iou_thresh)?;
        let wall_ms = if self.protocol.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        let report = CycleReport {
            seed,
            cycle: state.cycle,
            labeled_fraction: state.labeled_fraction(),
            method: method_name.to_string(),
            ap,
            teacher_ap,
            wall_ms,
        };
        Ok((models, report))
    }

    /// Pick the next `budget` scenes and advance the pools.
    pub fn select(
        &self,
        models: &CycleModels,
        state: &PoolState,
        method: &dyn Acquisition,
        budget: usize,
        seed: u64,
    ) -> Result<PoolState> {
        if budget == 0 || budget > state.unlabeled.len() {
            return Err(Error::usage(format!(
                "budget {budget} must lie in 1..={} (unlabeled scenes)",
                state.unlabeled.len()
            )));
        }
        let labeled = self.pool.get(&state.labeled)?;
        let unlabeled = self.pool.get(&state.unlabeled)?;
        let ctx = AcquisitionContext {
            teacher: &models.teacher,
            ensemble: &models.ensemble,
            labeled: &labeled,
            unlabeled: &unlabeled,
            scoring: self.models.scoring,
            seed: rng::derive_seed(cycle_seed(seed, state.cycle), &[rng::tag("select")]),
            ground_truth_access: self.protocol.ground_truth_access,
        };
        let picked = method.select(&ctx, budget)?;
        if picked.len() != budget {
            return Err(Error::usage(format!(
                "selection method `{}` returned {} scenes for a budget of {budget}",
                method.name(),
                picked.len()
            )));
        }
        state.advance(&picked)
    }

    /// One full cycle: train, evaluate, select.
    pub fn run_cycle(
        &self,
        state: &PoolState,
        method: &dyn Acquisition,
        method_name: &str,
        budget: usize,
        seed: u64,
    ) -> Result<(PoolState, CycleReport)> {
        let (models, report) = self.train_and_evaluate(state, method, method_name, seed)?;
        Ok((self.select(&models, state, method, budget, seed)?, report))
    }

    /// Train on the whole pool without pseudo-labels: the upper anchor of the
    /// learning curves. Returns student and teacher band APs.
    pub fn fully_trained(&self, seed: u64) -> Result<(BandAp, BandAp)> {
        let mut ids = self.pool.ids();
        ids.sort_unstable();
        let state = PoolState {
            labeled: ids,
            unlabeled: vec![],
            cycle: 0,
        };
        let models = train_models(&self.pool, &state, self.models, 1, rng::derive_seed(seed, &[rng::tag("anchor")]))?;
        evaluate(&models, self.eval, self.protocol.eval.iou_thresh)
    }
}

/// Hooks for persisting a trial as it runs.
pub trait TrialObserver {
    fn on_cycle(&mut self, _report: &CycleReport, _models: &CycleModels) -> Result<()> {
        Ok(())
    }

    /// Called with the pools of the next cycle.
    fn on_pool(&mut self, _state: &PoolState) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrialObserver for NoopObserver {}

/// Where a trial (re)starts: pools of the current cycle, reports of the
/// cycles already evaluated, and the current cycle's models if its report
/// is among them.
pub struct TrialStart {
    pub state: PoolState,
    pub history: Vec<CycleReport>,
    pub models: Option<CycleModels>,
}

/// Run one (method, seed) trial until the stop condition holds or the
/// unlabeled pool cannot fill another budget.
pub fn run_trial(
    ctx: &TrialContext<'_>,
    method_spec: &StrategySpec,
    seed: u64,
    start: Option<TrialStart>,
    observer: &mut dyn TrialObserver,
) -> Result<Vec<CycleReport>> {
    let method = scoring::build(method_spec)?;
    let name = method_spec.to_string();
    let budget = ctx.budget()?;
    let headline = ctx.protocol.eval.headline;
    let TrialStart {
        mut state,
        mut history,
        mut models,
    } = match start {
        Some(s) => s,
        None => {
            let state = init_pools(&ctx.pool.ids(), ctx.protocol.initial_fraction, seed)?;
            observer.on_pool(&state)?;
            TrialStart {
                state,
                history: Vec::new(),
                models: None,
            }
        }
    };
    loop {
        let current = match models.take() {
            Some(m) if history.len() == state.cycle + 1 => m,
            _ => {
                if history.len() != state.cycle {
                    return Err(Error::schema(format!(
                        "resume point has {} reports for cycle {}",
                        history.len(),
                        state.cycle
                    )));
                }
                let (m, report) = ctx.train_and_evaluate(&state, method.as_ref(), &name, seed)?;
                info!(
                    "{name} seed {seed} cycle {}: labeled {:.3} ap {:?}",
                    report.cycle,
                    report.labeled_fraction,
                    report.ap.get(headline)
                );
                observer.on_cycle(&report, &m)?;
                history.push(report);
                m
            }
        };
        let curve: Vec<Option<f64>> = history.iter().map(|r| r.ap.get(headline)).collect();
        if ctx.protocol.stop.reached(&curve) || state.unlabeled.len() < budget {
            return Ok(history);
        }
        state = ctx.select(&current, &state, method.as_ref(), budget, seed)?;
        observer.on_pool(&state)?;
    }
}

/// Per-seed learning curves of every method.
pub type Curves = BTreeMap<String, Vec<(u64, Vec<CycleReport>)>>;

/// Run every (method, seed) trial in memory.
pub fn run_experiment(ctx: &TrialContext<'_>, methods: &[StrategySpec], seeds: &[u64]) -> Result<Curves> {
    let jobs: Vec<(&StrategySpec, u64)> = methods.iter().flat_map(|m| seeds.iter().map(move |&s| (m, s))).collect();
    let results: Vec<Vec<CycleReport>> = jobs
        .par_iter()
        .map(|&(m, s)| run_trial(ctx, m, s, None, &mut NoopObserver))
        .collect::<Result<_>>()?;
    let mut curves = Curves::new();
    for ((m, s), r) in jobs.into_iter().zip(results) {
        curves.entry(m.to_string()).or_default().push((s, r));
    }
    Ok(curves)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Mean and population std of the present values; `None` if none are.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Option<MeanStd> {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            n: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclePoint {
    pub cycle: usize,
    pub labeled_fraction: f64,
    pub ap_easy: Option<MeanStd>,
    pub ap_mod: Option<MeanStd>,
    pub ap_hard: Option<MeanStd>,
    pub teacher_ap_mod: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub curve: Vec<CyclePoint>,
    /// Headline AP of the last evaluated cycle, over seeds.
    pub final_ap: Option<MeanStd>,
    /// Savings over `random` on the seed-mean curves, when both exist.
    pub savings_vs_random: Option<DataSavings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub headline: Difficulty,
    /// Fully-trained headline AP over seeds.
    pub anchor: Option<MeanStd>,
    pub savings_target_ap: Option<f64>,
    pub methods: BTreeMap<String, MethodSummary>,
}

/// Seed-mean headline curve as `(labeled_fraction, AP)` points; cycles
/// missing from some seeds average over the seeds that reached them.
pub fn mean_curve(trials: &[(u64, Vec<CycleReport>)], headline: Difficulty) -> Vec<(f64, f64)> {
    curve_points(trials, headline)
        .iter()
        .filter_map(|p| {
            let ap = match headline {
                Difficulty::Easy => p.ap_easy,
                Difficulty::Moderate => p.ap_mod,
                Difficulty::Hard => p.ap_hard,
            };
            ap.map(|a| (p.labeled_fraction, a.mean))
        })
        .collect()
}

fn curve_points(trials: &[(u64, Vec<CycleReport>)], _headline: Difficulty) -> Vec<CyclePoint> {
    let n_cycles = trials.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
    (0..n_cycles)
        .map(|k| {
            let at: Vec<&CycleReport> = trials.iter().filter_map(|(_, r)| r.get(k)).collect();
            CyclePoint {
                cycle: k,
                labeled_fraction: at.iter().map(|r| r.labeled_fraction).sum::<f64>() / at.len() as f64,
                ap_easy: MeanStd::of(at.iter().map(|r| r.ap.easy)),
                ap_mod: MeanStd::of(at.iter().map(|r| r.ap.moderate)),
                ap_hard: MeanStd::of(at.iter().map(|r| r.ap.hard)),
                teacher_ap_mod: MeanStd::of(at.iter().map(|r| r.teacher_ap.moderate)),
            }
        })
        .collect()
}

/// Seed-mean curves, final APs and data savings against `random`.
pub fn aggregate(curves: &Curves, anchors: &[Option<f64>], eval: &EvalSettings) -> Aggregate {
    let anchor = MeanStd::of(anchors.iter().copied());
    let target = anchor.map(|a| eval.savings_target * a.mean);
    let random = curves.get("random").map(|t| mean_curve(t, eval.headline));
    let methods = curves
        .iter()
        .map(|(name, trials)| {
            let mc = mean_curve(trials, eval.headline);
            let savings = match (&random, target) {
                (Some(r), Some(t)) => Some(data_savings(&mc, r, t)),
                _ => None,
            };
            let summary = MethodSummary {
                curve: curve_points(trials, eval.headline),
                final_ap: MeanStd::of(trials.iter().map(|(_, r)| r.last().and_then(|c| c.ap.get(eval.headline)))),
                savings_vs_random: savings,
            };
            (name.clone(), summary)
        })
        .collect();
    Aggregate {
        headline: eval.headline,
        anchor,
        savings_target_ap: target,
        methods,
    }
}
