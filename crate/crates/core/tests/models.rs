mod common;

use std::sync::OnceLock;

use monolig::detectors::{aleatoric_box_score, teacher_infer, train_teacher, Detection, DetectorConfig, TeacherModel, UncertaintyMode};
use monolig::geometry::Box3D;
use monolig::pseudolabel::{self, confidence_from, label_scene, AleatoricWeighting, HardThreshold, PseudoLabelStrategy, UniformConfidence};
use monolig::registry::StrategySpec;
use monolig::synthworld::{generate_dataset, generate_scenes, Scene, WorldConfig};
use proptest::prelude::*;

fn world(seed: u64) -> WorldConfig {
    WorldConfig {
        n_scenes: 200,
        ..WorldConfig::with_seed(seed)
    }
}

fn fit(cfg: &WorldConfig, seed: u64) -> TeacherModel {
    let scenes = generate_dataset(cfg).unwrap();
    let refs: Vec<&Scene> = scenes.iter().collect();
    train_teacher(&refs, &DetectorConfig::default(), cfg.n_categories as usize, seed).unwrap()
}

/// Teacher on the default world, shared by the tests that only read it.
fn default_teacher() -> &'static (WorldConfig, TeacherModel) {
    static T: OnceLock<(WorldConfig, TeacherModel)> = OnceLock::new();
    T.get_or_init(|| {
        let cfg = world(1);
        let t = fit(&cfg, 1);
        (cfg, t)
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn teacher_is_more_certain_on_dense_returns() {
    let near = WorldConfig {
        range_z: 20.0,
        near_range_z: 20.0,
        ..world(2)
    };
    let far = WorldConfig {
        min_depth: 40.0,
        range_z: 60.0,
        near_range_z: 60.0,
        ..world(2)
    };
    let sigma = |cfg: &WorldConfig| {
        let t = fit(cfg, 2);
        let held_out = generate_scenes(&WorldConfig { n_scenes: 50, ..cfg.clone() }, 10_000).unwrap();
        let u: Vec<f64> = held_out
            .iter()
            .flat_map(|s| t.infer(s).unwrap())
            .map(|d| aleatoric_box_score(&d, UncertaintyMode::StdSum).unwrap())
            .collect();
        assert!(!u.is_empty());
        mean(&u)
    };
    let (a, b) = (sigma(&near), sigma(&far));
    assert!(a < b, "near {a} far {b}");
}

#[test]
fn retraining_with_the_same_seed_is_identical() {
    let (cfg, t) = default_teacher();
    assert_eq!(&fit(cfg, 1), t);
    assert_eq!(TeacherModel::from_json(&t.to_json().unwrap()).unwrap(), *t);
}

#[test]
fn teacher_infer_edge_cases() {
    let (cfg, t) = default_teacher();
    let empty = Scene {
        id: 0,
        objects: vec![],
        proposals: vec![],
    };
    assert!(teacher_infer(t, &empty).unwrap().is_empty());

    // the same proposal twice collapses to one detection after NMS
    let scene = &generate_scenes(&WorldConfig { n_scenes: 1, ..cfg.clone() }, 500).unwrap()[0];
    let p = scene.proposals.iter().find(|p| !p.is_clutter).unwrap().clone();
    let twice = Scene {
        id: 1,
        objects: scene.objects.clone(),
        proposals: vec![p.clone(), p],
    };
    let once = teacher_infer(t, &Scene { proposals: twice.proposals[..1].to_vec(), ..twice.clone() }).unwrap();
    let dets = teacher_infer(t, &twice).unwrap();
    assert_eq!(dets.len(), once.len());
    assert!(dets.len() <= 1);
}

#[test]
fn far_pseudo_labels_carry_less_confidence() {
    let (cfg, t) = default_teacher();
    let scenes = generate_scenes(&WorldConfig { n_scenes: 300, ..cfg.clone() }, 20_000).unwrap();
    let (mut near, mut far) = (Vec::new(), Vec::new());
    for s in &scenes {
        let labels = label_scene(s.id, &t.infer(s).unwrap(), &AleatoricWeighting, UncertaintyMode::StdSum).unwrap();
        for l in labels.labels {
            let d = l.bbox.bev_distance();
            if d < 15.0 {
                near.push(l.confidence);
            } else if d > 40.0 {
                far.push(l.confidence);
            }
        }
    }
    assert!(near.len() > 20 && far.len() > 20, "{} near, {} far", near.len(), far.len());
    assert!(mean(&far) < mean(&near), "far {} near {}", mean(&far), mean(&near));
}

#[test]
fn empty_pool_and_strict_threshold() {
    let (_, t) = default_teacher();
    let s = pseudolabel::build(&StrategySpec::named("aleatoric")).unwrap();
    assert!(pseudolabel::generate(t, &[], s.as_ref()).unwrap().is_empty());
    let dets: Vec<Detection> = (0..5).map(|k| det(0.2 * k as f64, [0.1; 3], k)).collect();
    let none = label_scene(0, &dets, &HardThreshold { tau: 1.0 }, UncertaintyMode::StdSum).unwrap();
    assert!(none.labels.is_empty());
    assert_eq!(none.ignored, vec![0, 1, 2, 3, 4]);
}

fn det(p: f64, sigma: [f64; 3], proposal: usize) -> Detection {
    Detection {
        bbox: Box3D::new(0.0, 1.0, 20.0, 1.6, 1.5, 3.9, 0.0).unwrap(),
        category: 0,
        p,
        sigma_xyz: Some(sigma),
        proposal: Some(proposal),
        class_probs: vec![],
    }
}

fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((0.0..=1.0f64, prop::array::uniform3(0.0..1.0f64)), 0..20)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, (p, s))| det(p, s, i)).collect())
}

proptest! {
    #[test]
    fn confidence_bounded_and_monotone(u in 0.0..5.0f64, du in 0.0..2.0f64, p in 0.0..=1.0f64) {
        let c = confidence_from(u, p);
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!(confidence_from(u + du, p) <= c);
        // oracle: the clamp written out case by case
        let want = if u >= 1.0 { 0.0 } else { (1.0 - u) * p };
        prop_assert!((c - want).abs() < 1e-15);
    }

    #[test]
    fn strategies_keep_the_expected_sets(dets in arb_dets(), tau in 0.0..=1.0f64) {
        let mode = UncertaintyMode::StdSum;
        let al = label_scene(0, &dets, &AleatoricWeighting, mode).unwrap();
        let un = label_scene(0, &dets, &UniformConfidence, mode).unwrap();
        let hard = label_scene(0, &dets, &HardThreshold { tau }, mode).unwrap();
        prop_assert_eq!(al.labels.len(), dets.len());
        prop_assert_eq!(un.labels.len(), dets.len());
        prop_assert!(al.labels.iter().all(|l| (0.0..=1.0).contains(&l.confidence)));
        prop_assert!(un.labels.iter().all(|l| l.confidence == 1.0));
        let kept: Vec<usize> = hard.labels.iter().map(|l| l.proposal).collect();
        prop_assert!(kept.iter().all(|k| un.labels.iter().any(|l| l.proposal == *k)));
        prop_assert_eq!(kept.len() + hard.ignored.len(), dets.len());
        prop_assert!(hard.labels.iter().all(|l| dets[l.proposal].p >= tau));
    }
}

#[test]
fn registry_builds_every_strategy_by_name() {
    for name in ["aleatoric", "uniform", "hard_threshold"] {
        let s: Box<dyn PseudoLabelStrategy> = pseudolabel::build(&StrategySpec::named(name)).unwrap();
        assert_eq!(s.name(), name);
    }
    assert!(pseudolabel::build(&StrategySpec::named("nope")).is_err());
}
