use contiseg::data::{build_task_sequence, generate_dataset, materialize_step, LabeledImage, Mode, SceneSpec};
use contiseg::eval::{miou, ClassGroups, ConfusionMatrix};
use contiseg::model::{ArchConfig, SegModel};
use contiseg::trainer::{run_continual, train_first_step, train_increment_step, Ablation, TrainConfig};
use contiseg::Error;

fn scene(classes: usize, seed: u64) -> SceneSpec {
    let mut s = SceneSpec::uniform(16, 16, classes, 0.5, seed);
    for k in &mut s.shape_kinds {
        k.radius = (0.2, 0.35);
    }
    s
}

fn small_config(protocol: &str, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        protocol: protocol.into(),
        mode: Mode::Overlapped,
        epochs_per_step: 2,
        batch_size: 4,
        widths: [3, 4, 5],
        alpha: 1e-3,
        gamma: 1e-3,
        ablation,
        ..TrainConfig::default()
    }
}

fn data(classes: usize, n: usize) -> Vec<LabeledImage> {
    generate_dataset(&scene(classes, 3), n).unwrap()
}

#[test]
fn fixed_seed_is_bit_identical() {
    let train = data(3, 12);
    let cfg = small_config("2-1", Ablation::Full);
    let a = run_continual(&cfg, &train, &train, 3).unwrap();
    let b = run_continual(&cfg, &train, &train, 3).unwrap();
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed = 1;
    let c = run_continual(&other, &train, &train, 3).unwrap();
    assert_ne!(a.final_model(), c.final_model());
}

#[test]
fn zero_epochs_returns_initialization() {
    let train = data(2, 6);
    let mut cfg = small_config("2-0", Ablation::Baseline);
    cfg.epochs_per_step = 0;
    let task = cfg.task(2).unwrap();
    let step = materialize_step(&train, &task, 1).unwrap();
    let out = train_first_step(&cfg, &step).unwrap();
    let arch = ArchConfig {
        height: 16,
        width: 16,
        widths: cfg.widths,
        init_seed: cfg.seed,
    };
    assert_eq!(out.checkpoint.model, SegModel::new(arch, 3).unwrap());
    assert!(out.epochs.is_empty());
}

fn increment(ablation: Ablation, gamma: f64) -> (contiseg::model::Checkpoint, contiseg::trainer::StepArtifacts) {
    let train = data(3, 12);
    let mut cfg = small_config("2-1", ablation);
    cfg.gamma = gamma;
    let task = cfg.task(3).unwrap();
    let first = train_first_step(&cfg, &materialize_step(&train, &task, 1).unwrap()).unwrap();
    let step2 = materialize_step(&train, &task, 2).unwrap();
    let frozen = first.checkpoint.clone();
    let out = train_increment_step(&cfg, &step2, Some(&first.checkpoint), &[1, 2]).unwrap();
    // The previous model is read, never written.
    assert_eq!(first.checkpoint, frozen);
    (frozen, out)
}

#[test]
fn baseline_skips_balance_and_consistency() {
    let (_, out) = increment(Ablation::Baseline, 0.5);
    for r in out.batches.iter().chain(&out.epochs) {
        let b = &r.breakdown;
        assert!(b.l_ctx.is_none() && b.eta_old.is_none() && b.l_bps.is_none());
        assert!(b.l_ps_partner.is_none() && b.l_kd_partner.is_none());
    }
}

#[test]
fn double_copies_the_original_loss() {
    let (_, out) = increment(Ablation::Double, 0.5);
    for r in &out.batches {
        let b = &r.breakdown;
        assert_eq!(b.l_ps_partner, b.l_ps);
        assert_eq!(b.l_kd_partner, Some(b.l_kd));
        assert!(b.l_ctx.is_none());
        let single = b.l_ps.unwrap() + b.alpha * b.l_kd;
        assert!((b.total - 2.0 * single).abs() <= 1e-12 * b.total.abs().max(1.0));
    }
}

#[test]
fn full_with_zero_gamma_is_the_duplet_loss() {
    let (_, out) = increment(Ablation::Full, 0.0);
    for r in &out.batches {
        let b = &r.breakdown;
        assert!(b.l_ctx.is_some() && b.l_bps.is_some());
        assert_eq!(b.total, b.l_dup);
    }
}

#[test]
fn old_head_channels_survive_extension() {
    let train = data(3, 12);
    let mut cfg = small_config("2-1", Ablation::Full);
    let task = cfg.task(3).unwrap();
    let first = train_first_step(&cfg, &materialize_step(&train, &task, 1).unwrap()).unwrap();
    cfg.epochs_per_step = 0;
    let step2 = materialize_step(&train, &task, 2).unwrap();
    let out = train_increment_step(&cfg, &step2, Some(&first.checkpoint), &[1, 2]).unwrap();
    let (old, new) = (&first.checkpoint.model.head, &out.checkpoint.model.head);
    let per_class = old.weight.len() / old.out_channels;
    assert_eq!(&new.weight[..old.weight.len()], &old.weight[..]);
    assert_eq!(&new.bias[..3], &old.bias[..]);
    assert!(new.weight[old.weight.len()..old.weight.len() + per_class].iter().all(|&w| w == 0.0));
    assert_eq!(new.bias[3], old.bias[0]);
    assert_eq!(out.checkpoint.classes, vec![0, 1, 2, 3]);
}

#[test]
fn increment_without_previous_model_fails() {
    let train = data(3, 12);
    let cfg = small_config("2-1", Ablation::Full);
    let task = cfg.task(3).unwrap();
    let step2 = materialize_step(&train, &task, 2).unwrap();
    assert!(matches!(
        train_increment_step(&cfg, &step2, None, &[1, 2]),
        Err(Error::MissingOldModel(2))
    ));
}

#[test]
fn single_step_task_is_joint_training() {
    let train = data(3, 12);
    let cfg = small_config("3-0", Ablation::Full);
    let result = run_continual(&cfg, &train, &train, 3).unwrap();
    assert_eq!(result.steps.len(), 1);
    assert_eq!(result.steps[0].checkpoint.classes, vec![0, 1, 2, 3]);
    assert!(result.steps[0].frozen_step.is_none());
}

#[test]
fn every_step_is_logged_and_evaluated() {
    let train = data(4, 16);
    let cfg = small_config("1-1", Ablation::DupletCtx);
    let result = run_continual(&cfg, &train, &train, 4).unwrap();
    assert_eq!(result.steps.len(), 4);
    for (i, s) in result.steps.iter().enumerate() {
        assert_eq!(s.step, i + 1);
        assert_eq!(s.epochs.len(), cfg.epochs_per_step);
        assert!(s.epochs.iter().all(|r| r.step == s.step && r.batch.is_none()));
        assert!(s.metrics.is_some());
    }
    assert_eq!(result.history().len(), 4);
    assert_eq!(result.steps[3].frozen_step, Some(3));
}

#[test]
fn first_step_learns_a_two_class_scene() {
    let spec = SceneSpec::uniform(32, 32, 2, 0.5, 21);
    let train = generate_dataset(&spec, 200).unwrap();
    let cfg = TrainConfig {
        protocol: "2-0".into(),
        epochs_per_step: 20,
        widths: [8, 16, 32],
        ..TrainConfig::default()
    };
    let task = build_task_sequence(2, "2-0", Mode::Overlapped).unwrap();
    let out = train_first_step(&cfg, &materialize_step(&train, &task, 1).unwrap()).unwrap();
    let mut cm = ConfusionMatrix::new(3);
    for item in &train {
        cm.accumulate(&out.checkpoint.model.predict(&item.image).unwrap(), &item.mask).unwrap();
    }
    let report = miou(&cm, &ClassGroups::for_step(&task, 1).unwrap()).unwrap();
    let all = report.all.unwrap();
    assert!(all > 0.8, "training mIoU {all}");
}
