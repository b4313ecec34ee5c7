use tdm_core::attention::TdmConfig;
use tdm_core::data::SplitPart;
use tdm_core::harness::train::{train, train_step, training_batch};
use tdm_core::harness::*;
use tdm_core::model::Model;
use tdm_core::Error;

/// Small, fast experiment: 16×16 images, 4-channel backbone.
fn micro(extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut ov: Vec<(String, String)> = [
        ("data.synthetic.n_classes", "8"),
        ("data.synthetic.instances_per_class", "8"),
        ("data.synthetic.image_size", "16"),
        ("data.synthetic.patch_size", "4"),
        ("split.fractions", "[0.5, 0.25, 0.25]"),
        ("model.backbone.width", "4"),
        ("train.n_way", "2"),
        ("train.n_query", "2"),
        ("train.episodes", "6"),
        ("train.val_every", "3"),
        ("train.val_episodes", "4"),
        ("eval.n_way", "2"),
        ("eval.n_query", "3"),
        ("eval.episodes", "10"),
        ("sweep.n_list", "[2, 3]"),
        ("sweep.k_list", "[1, 2]"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    ov.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    ExperimentConfig::load(None, &ov).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = micro(&[("optim.lr", "0"), ("train.episodes", "1"), ("model.tdm.iam", "true")]);
    let (ds, split) = prepare_data(&cfg).unwrap();
    let model = Model::init(cfg.model.clone(), cfg.seed).unwrap();
    let out = train(&cfg, &ds, &split, model.clone()).unwrap();
    for (name, t) in model.params.iter() {
        assert_eq!(out.last.params.get(name).unwrap(), t, "{name}");
    }
    let moved = out
        .last
        .params
        .running_iter()
        .any(|(name, rs)| model.params.running(name).unwrap() != rs);
    assert!(moved, "running statistics should still update");
}

#[test]
fn fixed_seed_gives_identical_loss_curves() {
    let cfg = micro(&[("model.tdm.iam", "true")]);
    let (ds, split) = prepare_data(&cfg).unwrap();
    let run = || train(&cfg, &ds, &split, Model::init(cfg.model.clone(), cfg.seed).unwrap()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.params, b.best.params);
    assert!(a.log.iter().any(|r| r.val_acc.is_some()));
}

#[test]
fn separable_two_class_task_is_learned_within_200_episodes() {
    let cfg = micro(&[
        ("data.synthetic.n_classes", "3"),
        ("data.synthetic.noise_sigma", "0.0"),
        ("data.synthetic.jitter", "0"),
        ("split.fractions", "[0.34, 0.33, 0.33]"),
        ("eval.n_way", "1"),
        ("train.n_way", "2"),
        ("train.episodes", "200"),
        ("train.val_every", "0"),
        ("model.tdm.sam", "false"),
        ("model.tdm.qam", "false"),
    ]);
    // Both training classes come from the train part: use a 2/0/1 split.
    let cfg = ExperimentConfig {
        split: tdm_core::harness::config::SplitConfig {
            fractions: [2.0 / 3.0, 0.0, 1.0 / 3.0],
            seed: 0,
        },
        ..cfg
    };
    let (ds, split) = prepare_data(&cfg).unwrap();
    assert_eq!(split.part(SplitPart::Train).len(), 2);
    let out = train(&cfg, &ds, &split, Model::init(cfg.model.clone(), cfg.seed).unwrap()).unwrap();
    let first_perfect = out.log.iter().position(|r| r.train_acc == 1.0);
    assert!(first_perfect.is_some(), "never reached 1.0 train accuracy");
    let tail: Vec<f64> = out.log.iter().rev().take(20).map(|r| r.train_acc).collect();
    assert!(tail.iter().all(|&a| a == 1.0), "tail {tail:?}");
}

#[test]
fn divergence_reports_episode_and_seed() {
    let cfg = micro(&[("optim.lr", "1e300"), ("optim.momentum", "0"), ("train.episodes", "50")]);
    let (ds, split) = prepare_data(&cfg).unwrap();
    let err = train(&cfg, &ds, &split, Model::init(cfg.model.clone(), cfg.seed).unwrap()).unwrap_err();
    match err {
        Error::Diverged { episode, seed, .. } => {
            assert_eq!(seed, train::episode_seed(cfg.seed, episode));
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn evaluation_is_deterministic_and_reports_ci() {
    let cfg = micro(&[]);
    let (ds, split) = prepare_data(&cfg).unwrap();
    let model = Model::init(cfg.model.clone(), cfg.seed).unwrap();
    let plan = test_plan(&cfg, &ds, &split);
    let a = evaluate(&model, &plan).unwrap();
    let b = evaluate(&model, &plan).unwrap();
    assert_eq!(a.per_episode, b.per_episode);
    assert_eq!(a.mean_accuracy, b.mean_accuracy);
    let accs = a.per_episode.clone().unwrap();
    let (m, ci, _) = mean_ci95(&accs);
    let e = accs.len() as f64;
    let sd = (accs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (e - 1.0)).sqrt();
    assert!((a.ci95 - 1.96 * sd / e.sqrt()).abs() < 1e-12);
    assert_eq!(ci, a.ci95);

    let one = EvalPlan { episodes: 1, ..plan };
    let r = evaluate(&model, &one).unwrap();
    assert_eq!(r.ci95, 0.0);
    assert!(r.ci_degenerate);
}

#[test]
fn sequential_and_parallel_evaluation_agree() {
    let cfg = micro(&[]);
    let (ds, split) = prepare_data(&cfg).unwrap();
    let model = Model::init(cfg.model.clone(), cfg.seed).unwrap();
    let plan = test_plan(&cfg, &ds, &split);
    let par = evaluate(&model, &EvalPlan { execution: tdm_core::parallel::Execution::Parallel, ..plan }).unwrap();
    let seq = evaluate(&model, &EvalPlan { execution: tdm_core::parallel::Execution::Sequential, ..plan }).unwrap();
    assert_eq!(par.per_episode, seq.per_episode);
}

#[test]
fn evaluation_never_touches_training_classes() {
    let cfg = micro(&[]);
    let (ds, split) = prepare_data(&cfg).unwrap();
    let plan = test_plan(&cfg, &ds, &split);
    for e in 0..50 {
        let ep = plan.episode(e).unwrap();
        assert!(ep.class_ids.iter().all(|id| split.test_class_ids.contains(id)));
    }
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let cfg = micro(&[("model.tdm.iam", "true")]);
    let (ds, split) = prepare_data(&cfg).unwrap();
    let out = train(&cfg, &ds, &split, Model::init(cfg.model.clone(), cfg.seed).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&out.best, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, out.best);
    let plan = test_plan(&cfg, &ds, &split);
    assert_eq!(evaluate(&back, &plan).unwrap().per_episode, evaluate(&out.best, &plan).unwrap().per_episode);
}

#[test]
fn ablation_grid_structure() {
    let cfg = micro(&[("train.episodes", "2"), ("train.val_every", "0"), ("eval.episodes", "4")]);
    let (ds, split) = prepare_data(&cfg).unwrap();
    let rows = ablation_grid(&cfg, &ds, &split, &[(2, 1)]).unwrap();
    let labels: Vec<String> = rows.iter().map(|r| r.label()).collect();
    assert_eq!(labels, ["none", "S", "Q", "I", "SQ", "SI", "QI", "SQI"]);
    assert!(rows.iter().all(|r| r.results.len() == 1));
    let mut csv = Vec::new();
    ablation::write_ablation_csv(&rows, &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 9);

    // The "none" row is the plain baseline trained on its own.
    let mut base_cfg = cfg.clone();
    base_cfg.model.tdm = TdmConfig { sam: false, qam: false, iam: false, ..cfg.model.tdm.clone() };
    let base = train(&base_cfg, &ds, &split, Model::init(base_cfg.model.clone(), base_cfg.seed).unwrap()).unwrap();
    let mut plan = test_plan(&base_cfg, &ds, &split);
    plan.spec.k_shot = 1;
    assert_eq!(evaluate(&base.best, &plan).unwrap().mean_accuracy, rows[0].results[0].mean_accuracy);
}

#[test]
fn sweep_grid_shape_and_skips() {
    let cfg = micro(&[]);
    let (ds, split) = prepare_data(&cfg).unwrap();
    let model = Model::init(cfg.model.clone(), cfg.seed).unwrap();
    let cells = sweep_nk(&cfg, &model, &ds, &split, &[2, 3], &[1, 2]).unwrap();
    assert_eq!(cells.len(), 4);
    // two test classes: the 3-way cells are skipped with a note
    assert!(cells.iter().filter(|c| c.n_way == 3).all(|c| c.metrics.is_none() && c.note.is_some()));
    assert!(cells.iter().filter(|c| c.n_way == 2).all(|c| c.metrics.is_some()));
}

#[test]
fn training_batches_are_reproducible_with_augmentation() {
    let cfg = micro(&[("train.augment.flip", "true"), ("train.augment.crop", "true"), ("train.augment.jitter", "true")]);
    let (ds, split) = prepare_data(&cfg).unwrap();
    let (a, _) = training_batch(&cfg, &ds, &split, 3).unwrap();
    let (b, _) = training_batch(&cfg, &ds, &split, 3).unwrap();
    assert_eq!(a, b);
    let mut model = Model::init(cfg.model.clone(), 0).unwrap();
    let mut opt = Sgd::new(&cfg.optim);
    let step = train_step(&mut model, &mut opt, &a, None, cfg.execution).unwrap();
    assert!(step.loss.is_finite());
}
