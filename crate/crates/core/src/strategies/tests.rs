use super::*;
use crate::data::{synth_gestures, SynthConfig};
use crate::features::encode;
use crate::net::train_epochs;

fn synth_classes(n_classes: usize, per_class: usize, seed: u64) -> Vec<ClassSamples> {
    let ds = synth_gestures(&SynthConfig {
        n_classes,
        samples_per_class: per_class,
        jitter_std: 0.02,
        n_subjects: 3,
        seed,
    })
    .unwrap();
    let labels = ds.label_ids();
    (0..n_classes)
        .map(|c| ClassSamples {
            class: c,
            features: ds
                .frames()
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(f, _)| encode(f, Encoding::WristDiff))
                .collect(),
        })
        .collect()
}

fn config(strategy: StrategyKind) -> LearnerConfig {
    LearnerConfig {
        strategy,
        encoding: Encoding::WristDiff,
        hidden: vec![32, 16],
        initial: TrainConfig { epochs: 30, ..TrainConfig::default() },
        incremental: TrainConfig { epochs: 15, ..TrainConfig::default() },
        seed: 7,
        ..LearnerConfig::default()
    }
}

fn accuracy_on(learner: &Learner, data: &[ClassSamples]) -> f64 {
    let refs: Vec<&FeatureVector> = data.iter().flat_map(|cs| &cs.features).collect();
    let truth: Vec<usize> = data.iter().flat_map(|cs| std::iter::repeat_n(cs.class, cs.features.len())).collect();
    let preds = learner.classify_batch(stack_features(refs).unwrap().view()).unwrap();
    preds.iter().zip(&truth).filter(|(p, &t)| p.class == t).count() as f64 / truth.len() as f64
}

#[test]
fn strategy_names_round_trip() {
    for k in StrategyKind::ALL {
        assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
    }
    assert_eq!("iCaRL".parse::<StrategyKind>().unwrap(), StrategyKind::ICaRL);
    assert_eq!("fine-tune".parse::<StrategyKind>().unwrap(), StrategyKind::FineTune);
    assert!("ewc".parse::<StrategyKind>().is_err());
}

#[test]
fn initial_task_preconditions() {
    let data = synth_classes(3, 10, 1);
    let mut l = Learner::new(config(StrategyKind::ICaRL)).unwrap();
    assert!(l.classify(&data[0].features[0]).is_err());
    assert!(l.learn_increment(&data[2..]).is_err());
    assert!(l.learn_initial(&data[..1]).is_err());
    let empty = vec![data[0].clone(), ClassSamples { class: 1, features: vec![] }];
    assert!(l.learn_initial(&empty).is_err());
    let dup = vec![data[0].clone(), data[0].clone()];
    assert!(l.learn_initial(&dup).is_err());
    let wrong = vec![
        data[0].clone(),
        ClassSamples { class: 1, features: vec![FeatureVector { encoding: Encoding::Raw2D, values: vec![0.0; 42] }] },
    ];
    assert!(l.learn_initial(&wrong).is_err());
    assert!(!l.is_initialized());

    l.learn_initial(&data[..2]).unwrap();
    assert!(l.learn_initial(&data[..2]).is_err());
    assert!(l.learn_increment(&data[1..2]).is_err());
    assert!(l.learn_increment(&[]).is_err());
}

#[test]
fn icarl_initial_task_fills_memory_and_fits() {
    let data = synth_classes(2, 30, 2);
    let mut l = Learner::new(config(StrategyKind::ICaRL)).unwrap();
    l.learn_initial(&data).unwrap();
    let mem = l.memory().unwrap();
    assert_eq!(mem.class_ids(), vec![0, 1]);
    assert_eq!(mem.len(), 10);
    assert_eq!(accuracy_on(&l, &data), 1.0);
    assert!(l.teacher().is_some());
    assert_eq!(l.class_means().len(), 2);
}

#[test]
fn bookkeeping_across_increments() {
    let data = synth_classes(6, 12, 3);
    for kind in StrategyKind::ALL {
        let mut cfg = config(kind);
        cfg.initial.epochs = 3;
        cfg.incremental.epochs = 2;
        let mut l = Learner::new(cfg).unwrap();
        l.learn_initial(&data[..2]).unwrap();
        for k in 1..=4 {
            l.learn_increment(&data[1 + k..2 + k]).unwrap();
            assert_eq!(l.seen().len(), 2 + k);
            assert_eq!(l.model().n_classes(), 2 + k);
            if let Some(mem) = l.memory() {
                assert_eq!(mem.class_ids(), (0..2 + k).collect::<Vec<_>>());
                assert!(mem.classes().all(|(_, ex)| ex.len() == 5));
            }
        }
        assert_eq!(l.tasks_completed(), 5);
        if kind == StrategyKind::IL2M {
            let s = l.il2m_stats().unwrap();
            assert_eq!(s.conf.len(), 5);
            assert_eq!(s.mu_init.len(), 6);
            assert_eq!(s.intro_task[&5], 4);
            for v in s.mu_init.values().chain(s.mu_cur.values()).chain(&s.conf) {
                assert!(*v > 0.0 && *v <= 1.0, "{v}");
            }
        }
    }
}

#[test]
fn memory_is_capped_by_class_size() {
    let data = synth_classes(3, 3, 4);
    let mut cfg = config(StrategyKind::IL2M);
    cfg.initial.epochs = 2;
    let mut l = Learner::new(cfg).unwrap();
    l.learn_initial(&data[..2]).unwrap();
    assert!(l.memory().unwrap().classes().all(|(_, ex)| ex.len() == 3));
}

#[test]
fn fine_tuning_forgets_old_classes() {
    let data = synth_classes(5, 30, 5);
    let mut l = Learner::new(config(StrategyKind::FineTune)).unwrap();
    l.learn_initial(&data[..2]).unwrap();
    let before = accuracy_on(&l, &data[..2]);
    assert!(before > 0.9);
    let mut worst = before;
    for k in 2..5 {
        l.learn_increment(&data[k..k + 1]).unwrap();
        worst = worst.min(accuracy_on(&l, &data[..2]));
    }
    assert!(worst < 0.5 * before, "old-class accuracy {worst} vs {before}");
}

#[test]
fn joint_pool_is_union_of_seen_data() {
    let data = synth_classes(4, 8, 6);
    let mut cfg = config(StrategyKind::Joint);
    cfg.initial.epochs = 2;
    cfg.incremental.epochs = 2;
    let mut l = Learner::new(cfg).unwrap();
    l.learn_initial(&data[..2]).unwrap();
    assert_eq!(l.pool(), &data[..2]);
    l.learn_increment(&data[2..3]).unwrap();
    l.learn_increment(&data[3..4]).unwrap();
    assert_eq!(l.pool(), &data[..]);
    assert!(l.memory().is_none());
}

#[test]
fn joint_from_scratch_matches_independent_training() {
    let data = synth_classes(3, 10, 7);
    let mut cfg = config(StrategyKind::Joint);
    cfg.joint_from_scratch = true;
    cfg.initial.epochs = 4;
    let mut l = Learner::new(cfg.clone()).unwrap();
    l.learn_initial(&data[..2]).unwrap();
    let report = l.learn_increment(&data[2..]).unwrap();

    let seed = task_seed(cfg.seed, 1);
    let mut model = MlpModel::new(
        Encoding::WristDiff.dim(),
        &cfg.hidden,
        3,
        cfg.dropout,
        &mut stream_rng(seed, STREAM_FRESH),
    )
    .unwrap();
    let rows: Vec<&FeatureVector> = data.iter().flat_map(|cs| &cs.features).collect();
    let labels: Vec<usize> = data.iter().flat_map(|cs| std::iter::repeat_n(cs.class, cs.features.len())).collect();
    let x = stack_features(rows).unwrap();
    let train = TrainConfig { seed, ..cfg.initial.clone() };
    let independent = train_epochs(&mut model, x.view(), &labels, &train, None).unwrap();
    assert_eq!(report.epochs, independent.epochs);
    assert_eq!(l.model(), &model);
}

#[test]
fn icarl_without_distillation_trains_like_il2m() {
    let data = synth_classes(4, 15, 8);
    let mut icarl_cfg = config(StrategyKind::ICaRL);
    icarl_cfg.incremental.distill_weight = 0.0;
    icarl_cfg.ablation.nem = false;
    let mut icarl = Learner::new(icarl_cfg).unwrap();
    let mut il2m = Learner::new(config(StrategyKind::IL2M)).unwrap();
    let a0 = icarl.learn_initial(&data[..2]).unwrap();
    let b0 = il2m.learn_initial(&data[..2]).unwrap();
    assert_eq!(a0.losses(), b0.losses());
    for k in 2..4 {
        let a = icarl.learn_increment(&data[k..k + 1]).unwrap();
        let b = il2m.learn_increment(&data[k..k + 1]).unwrap();
        assert_eq!(a.losses(), b.losses());
    }
    assert_eq!(icarl.model(), il2m.model());
    assert_eq!(icarl.memory(), il2m.memory());
}

#[test]
fn nem_predictions_match_brute_force() {
    let data = synth_classes(3, 20, 9);
    let mut l = Learner::new(config(StrategyKind::ICaRL)).unwrap();
    l.learn_initial(&data[..2]).unwrap();
    l.learn_increment(&data[2..]).unwrap();
    for cs in &data {
        for f in &cs.features {
            let e = l.model().embed(&f.values).unwrap();
            let mut best = (usize::MAX, f64::INFINITY);
            for m in l.class_means() {
                let d: f64 = m.mean.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.1 || (d == best.1 && m.class < best.0) {
                    best = (m.class, d);
                }
            }
            assert_eq!(l.classify(f).unwrap().class, best.0);
        }
    }
}

#[test]
fn il2m_classification_uses_rectified_scores() {
    let data = synth_classes(3, 15, 10);
    let mut l = Learner::new(config(StrategyKind::IL2M)).unwrap();
    l.learn_initial(&data[..2]).unwrap();
    l.learn_increment(&data[2..]).unwrap();
    let f = &data[0].features[0];
    let x = ArrayView2::from_shape((1, f.dim()), &f.values[..]).unwrap();
    let raw = softmax_rows(&l.model().predict(x).unwrap().view()).row(0).to_vec();
    let expected = il2m_rectify(&raw, l.seen(), l.il2m_stats().unwrap(), 1).unwrap();
    assert_eq!(l.classify(f).unwrap().scores, expected);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = synth_classes(3, 12, 11);
    for kind in [StrategyKind::ICaRL, StrategyKind::IL2M, StrategyKind::LwF] {
        let mut cfg = config(kind);
        cfg.initial.epochs = 3;
        cfg.incremental.epochs = 2;
        let mut l = Learner::new(cfg).unwrap();
        l.learn_initial(&data[..2]).unwrap();
        l.learn_increment(&data[2..]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("learner.json");
        l.save_json(&path).unwrap();
        let back = Learner::load_json(&path).unwrap();
        assert_eq!(back, l);
        for f in data.iter().flat_map(|cs| &cs.features) {
            assert_eq!(back.classify(f).unwrap(), l.classify(f).unwrap());
        }
    }
}

#[test]
fn same_seed_same_learner() {
    let data = synth_classes(3, 10, 12);
    let run = || {
        let mut cfg = config(StrategyKind::LwF);
        cfg.initial.epochs = 3;
        cfg.incremental.epochs = 3;
        let mut l = Learner::new(cfg).unwrap();
        l.learn_initial(&data[..2]).unwrap();
        l.learn_increment(&data[2..]).unwrap();
        l
    };
    assert_eq!(run(), run());
}
