use tyrist_core::detect::LossConfig;
use tyrist_core::model::{Group, Head, ModelConfig, ModelGraph, PanMode};
use tyrist_core::synth::{generate_split, Sample, SceneConfig};
use tyrist_core::train::{
    decode_checkpoint, encode_checkpoint, freeze, load_checkpoint, load_into, optimizer_step, prepare_stage2,
    save_checkpoint, train, train_step, FreezeSpec, OptimState, TrainConfig,
};
use tyrist_core::{Error, LossKind};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        width_multiple: 0.25,
        ..ModelConfig::p2_only()
    }
}

fn tiny_data(n: usize) -> Vec<Sample> {
    generate_split(&SceneConfig::fast(), 0, n).unwrap()
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        lr: 1e-3,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

fn param_snapshot(m: &ModelGraph, keep: impl Fn(Group) -> bool) -> Vec<(String, Vec<f32>)> {
    m.store()
        .params()
        .filter(|(n, _)| keep(m.group_of_param(n).unwrap()))
        .map(|(n, p)| (n.clone(), p.data.clone()))
        .collect()
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let data = tiny_data(4);
    let mut m = ModelGraph::build(&tiny_config(), 1).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        batch_size: 4,
        ..quick_cfg(3)
    };
    let mut st = OptimState::new(cfg.adamw());
    let h = train(&mut m, &data, &[], &cfg, &mut st).unwrap();
    for r in &h[1..] {
        assert!(
            (r.loss_total - h[0].loss_total).abs() <= 1e-9 * h[0].loss_total,
            "{h:?}"
        );
    }
}

#[test]
fn same_seed_gives_identical_history_and_weights() {
    let data = tiny_data(4);
    let run = || {
        let mut m = ModelGraph::build(&tiny_config(), 3).unwrap();
        let cfg = TrainConfig {
            mirror: true,
            ..quick_cfg(2)
        };
        let mut st = OptimState::new(cfg.adamw());
        let h = train(&mut m, &data, &data[..2], &cfg, &mut st).unwrap();
        (h, encode_checkpoint(&m, Some(&st)).unwrap())
    };
    let (h1, b1) = run();
    let (h2, b2) = run();
    assert_eq!(h1, h2);
    assert_eq!(b1, b2);
    assert!(h1.last().unwrap().ap50.is_some());
}

#[test]
fn frozen_backbone_and_neck_stay_bitwise_unchanged() {
    let data = tiny_data(4);
    let mut m = ModelGraph::build(&tiny_config(), 5).unwrap();
    freeze(&mut m, FreezeSpec::BackboneAndNeck);
    let frozen = |g: Group| !matches!(g, Group::Attention | Group::Head(_));
    let before_frozen = param_snapshot(&m, frozen);
    let before_trained = param_snapshot(&m, |g| !frozen(g));
    let stats_before: Vec<_> = m.store().all_stats().map(|(n, s)| (n.clone(), s.clone())).collect();
    let mut st = OptimState::new(quick_cfg(1).adamw());
    let batch: Vec<&Sample> = data.iter().take(2).collect();
    for _ in 0..3 {
        train_step(&mut m, &batch, &LossConfig::default(), &mut st, (1, 1)).unwrap();
    }
    assert_eq!(param_snapshot(&m, frozen), before_frozen);
    assert_ne!(param_snapshot(&m, |g| !frozen(g)), before_trained);
    for (n, s) in &stats_before {
        if frozen(m.group_of_param(n).unwrap()) {
            assert_eq!(m.store().stats(n).unwrap(), s, "{n}");
        }
    }
    // optimizer moments exist only for trainable parameters
    assert!(st.moments.keys().all(|n| !frozen(m.group_of_param(n).unwrap())));
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    use tyrist_core::nn::Ctx;
    let data = tiny_data(2);
    let mut m = ModelGraph::build(&tiny_config(), 5).unwrap();
    freeze(&mut m, FreezeSpec::BackboneAndNeck);
    let images = tyrist_core::eval::stack_images(&data.iter().collect::<Vec<_>>()).unwrap();
    let ctx = Ctx::<f32>::train(m.store());
    let out = m.forward_with(&ctx, &images).unwrap();
    let mut sum = None;
    for t in out.values() {
        let s = tyrist_core::tensor::ops::sum(t);
        sum = Some(match sum {
            None => s,
            Some(prev) => tyrist_core::tensor::ops::add(&prev, &s).unwrap(),
        });
    }
    sum.unwrap().backward().unwrap();
    let grads = ctx.grads();
    assert!(!grads.is_empty());
    for n in grads.keys() {
        assert!(
            matches!(m.group_of_param(n).unwrap(), Group::Attention | Group::Head(_)),
            "{n}"
        );
    }
}

#[test]
fn stage_two_reinitializes_only_attention_and_heads() {
    let mut m = ModelGraph::build(&tiny_config(), 9).unwrap();
    let backbone = param_snapshot(&m, |g| g == Group::Backbone);
    let heads = param_snapshot(&m, |g| matches!(g, Group::Head(_) | Group::Attention));
    prepare_stage2(&mut m, 9);
    assert_eq!(param_snapshot(&m, |g| g == Group::Backbone), backbone);
    assert_ne!(
        param_snapshot(&m, |g| matches!(g, Group::Head(_) | Group::Attention)),
        heads
    );
    for (n, p) in m.store().params() {
        let trains = matches!(m.group_of_param(n).unwrap(), Group::Head(_) | Group::Attention);
        assert_eq!(p.trainable, trains, "{n}");
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical_and_preserves_outputs() {
    let data = tiny_data(4);
    let mut m = ModelGraph::build(&tiny_config(), 11).unwrap();
    let cfg = quick_cfg(1);
    let mut st = OptimState::new(cfg.adamw());
    train(&mut m, &data, &[], &cfg, &mut st).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.tyrk");
    save_checkpoint(&m, Some(&st), &path).unwrap();
    let (loaded, loaded_st) = load_checkpoint(&path).unwrap();
    let path2 = dir.path().join("b.tyrk");
    save_checkpoint(&loaded, loaded_st.as_ref(), &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    assert_eq!(loaded_st.as_ref(), Some(&st));

    let images = tyrist_core::eval::stack_images(&data.iter().collect::<Vec<_>>()).unwrap();
    let a = m.forward(&images).unwrap();
    let b = loaded.forward(&images).unwrap();
    for (h, t) in &a {
        assert_eq!(t.data(), b[h].data());
    }
}

#[test]
fn checkpoint_loads_into_trimmed_model_and_reports_missing_names() {
    let full = ModelGraph::build(
        &ModelConfig {
            width_multiple: 0.25,
            ..ModelConfig::full()
        },
        2,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.tyrk");
    save_checkpoint(&full, None, &path).unwrap();

    let mut trimmed = full.trim(&[Head::P2].into(), PanMode::Identity).unwrap();
    trimmed.reinit_groups(&[Group::Backbone], 77);
    assert!(load_into(&mut trimmed, &path).unwrap().is_none());
    assert_eq!(
        trimmed.store().get("stem.conv.weight"),
        full.store().get("stem.conv.weight")
    );

    let mut small = trimmed.clone();
    save_checkpoint(&small, None, &path).unwrap();
    let mut bigger = full.clone();
    match load_into(&mut bigger, &path) {
        Err(Error::MissingParams(names)) => assert!(names.iter().any(|n| n.starts_with("head_p3.")), "{names:?}"),
        other => panic!("expected missing params, got {other:?}"),
    }
    small.reinit_groups(&[Group::Backbone], 1);
    assert!(load_into(&mut small, &path).is_ok());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = ModelGraph::build(&tiny_config(), 0).unwrap();
    let bytes = encode_checkpoint(&m, None).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        decode_checkpoint(&bad_magic),
        Err(Error::CorruptCheckpoint(_))
    ));
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(
        decode_checkpoint(&bad_version),
        Err(Error::CorruptCheckpoint(_))
    ));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 3]),
        Err(Error::CorruptCheckpoint(_))
    ));
    assert!(decode_checkpoint(&bytes).is_ok());
}

#[test]
fn non_finite_weights_abort_naming_the_layer() {
    let data = tiny_data(2);
    let mut m = ModelGraph::build(&tiny_config(), 0).unwrap();
    m.store_mut().get_mut("down3.conv.weight").unwrap().data[0] = f32::NAN;
    let mut st = OptimState::new(quick_cfg(1).adamw());
    match train(&mut m, &data, &[], &quick_cfg(1), &mut st) {
        Err(Error::NonFinite {
            epoch: 1,
            step: 1,
            layer,
        }) => assert_eq!(layer, "down3"),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn optimizer_step_ignores_frozen_and_matches_rule() {
    let mut m = ModelGraph::build(&tiny_config(), 0).unwrap();
    freeze(&mut m, FreezeSpec::None);
    assert!(m.store().params().all(|(_, p)| p.trainable));
    let before = m.store().clone();
    let mut st = OptimState::new(quick_cfg(1).adamw());
    optimizer_step(m.store_mut(), &Default::default(), &mut st).unwrap();
    // zero gradient: only weight decay acts, theta * (1 - lr * wd)
    let (name, p) = before.params().next().unwrap();
    let after = &m.store().get(name).unwrap().data;
    let k = 1.0 - 1e-3 * 5e-4;
    for (a, b) in p.data.iter().zip(after) {
        assert!(((*a as f64) * k - *b as f64).abs() <= 1e-7 * a.abs().max(1e-3) as f64);
    }
}

#[test]
fn both_box_kinds_train_without_error() {
    let data = tiny_data(2);
    for kind in [LossKind::Ciou, LossKind::Iou, "nwd:9".parse().unwrap()] {
        let mut m = ModelGraph::build(&tiny_config(), 0).unwrap();
        let cfg = TrainConfig {
            loss: LossConfig::with_kind(kind),
            ..quick_cfg(1)
        };
        let mut st = OptimState::new(cfg.adamw());
        let h = train(&mut m, &data, &[], &cfg, &mut st).unwrap();
        assert!(h[0].loss_total.is_finite());
    }
}
