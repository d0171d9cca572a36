use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::data::{synthesize_sample, Label};
use crate::nn::{ClassifierModel, Mode, SegmentationModel, WidthConfig};

fn dice_oracle(p: &[f64], t: &[f64], eps: f64) -> f64 {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    1.0 - (2.0 * inter + eps) / (p.iter().sum::<f64>() + t.iter().sum::<f64>() + eps)
}

fn loss_of(kind: LossKind, out: Tensor<f64>, masks: &[f64], labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(out);
    let l = record_loss(&mut tape, kind, v, masks, labels, None).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn dice_loss_examples() {
    let t: Vec<f64> = (0..16).map(|i| (i < 8) as u8 as f64).collect();
    let same = loss_of(LossKind::Dice, Tensor::new([1, 1, 4, 4], t.clone()).unwrap(), &t, &[]);
    assert!(same <= 1.0 / (2.0 * 8.0 + 1.0) + 1e-12, "{same}");
    let inv: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
    let far = loss_of(LossKind::Dice, Tensor::new([1, 1, 4, 4], inv.clone()).unwrap(), &t, &[]);
    assert!((far - dice_oracle(&inv, &t, 1.0)).abs() < 1e-12);
    assert!(far > 0.9);
    let zero = vec![0.0; 16];
    let empty = loss_of(LossKind::Dice, Tensor::new([1, 1, 4, 4], zero.clone()).unwrap(), &zero, &[]);
    assert_eq!(empty, 0.0);
}

#[test]
fn dice_plus_bce_is_the_sum() {
    let p: Vec<f64> = (0..16).map(|i| 0.05 + 0.9 * (i as f64 / 15.0)).collect();
    let t: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let bce: f64 = p
        .iter()
        .zip(&t)
        .map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .sum::<f64>()
        / 16.0;
    let got = loss_of(LossKind::DicePlusBce, Tensor::new([1, 1, 4, 4], p.clone()).unwrap(), &t, &[]);
    assert!((got - dice_oracle(&p, &t, 1.0) - bce).abs() < 1e-12);
}

#[test]
fn cross_entropy_examples() {
    let uniform = loss_of(LossKind::CrossEntropy, Tensor::zeros([2, 3]), &[], &[0, 2]);
    assert!((uniform - 3f64.ln()).abs() < 1e-12);
    let sure = loss_of(
        LossKind::CrossEntropy,
        Tensor::new([1, 3], vec![60.0, 0.0, 0.0]).unwrap(),
        &[],
        &[0],
    );
    assert!(sure < 1e-20);
    let z = vec![0.3, -1.2, 2.2];
    let a = loss_of(LossKind::CrossEntropy, Tensor::new([1, 3], z.clone()).unwrap(), &[], &[1]);
    let shifted: Vec<f64> = z.iter().map(|v| v + 7.5).collect();
    let b = loss_of(LossKind::CrossEntropy, Tensor::new([1, 3], shifted).unwrap(), &[], &[1]);
    assert!((a - b).abs() < 1e-6);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::<f64>::zeros([1, 3]));
    assert!(record_loss(&mut tape, LossKind::CrossEntropy, v, &[], &[3], None).is_err());
}

#[test]
fn inverse_frequency() {
    let w = inverse_frequency_weights(&[0, 0, 0, 1, 2, 2], 3);
    assert_eq!(w, vec![6.0 / 9.0, 2.0, 1.0]);
    let w = inverse_frequency_weights(&[0, 1], 3);
    assert_eq!(w[2], 0.0);
}

fn adam_scalar(grads: &[f64], lr: f64) -> f64 {
    let mut p = Tensor::<f64>::zeros([1]);
    let mut st = OptimizerState::new();
    for &g in grads {
        let grad = [g];
        adam_step(
            &mut [ParamUpdate {
                name: "p",
                value: &mut p,
                grad: &grad,
            }],
            &mut st,
            &AdamConfig::new(lr),
        )
        .unwrap();
    }
    assert_eq!(st.step, grads.len() as u64);
    p.data()[0]
}

#[test]
fn adam_first_step_is_minus_lr() {
    let p = adam_scalar(&[1.0], 0.1);
    // m_hat = 1, v_hat = 1
    assert!((p + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{p}");
    assert_eq!(adam_scalar(&[0.0; 50], 0.1), 0.0);
    assert_eq!(adam_scalar(&[0.3, -0.2, 0.7], 0.01).to_bits(), adam_scalar(&[0.3, -0.2, 0.7], 0.01).to_bits());
}

#[test]
fn adam_matches_textbook_recurrence() {
    let grads = [0.5, -1.5, 2.0, 0.25];
    let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        p -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
    }
    assert!((adam_scalar(&grads, 0.05) - p).abs() < 1e-15);
}

#[test]
fn adam_rejects_shape_mismatch() {
    let mut p = Tensor::<f32>::zeros([3]);
    let g = [1.0f32; 2];
    let mut st = OptimizerState::new();
    assert!(adam_step(
        &mut [ParamUpdate {
            name: "p",
            value: &mut p,
            grad: &g
        }],
        &mut st,
        &AdamConfig::new(0.1)
    )
    .is_err());
    assert_eq!(st.step, 0);
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn unfreeze_plan_examples() {
    let always = names(&["dec1", "head"]);
    let s = UnfreezeSchedule::new(vec![
        UnfreezeStage {
            start_epoch: 5,
            blocks: names(&["enc5"]),
        },
        UnfreezeStage {
            start_epoch: 10,
            blocks: names(&["enc4"]),
        },
    ])
    .unwrap();
    assert_eq!(unfreeze_plan(&s, 0, &always), always.iter().cloned().collect());
    let at7 = unfreeze_plan(&s, 7, &always);
    assert!(at7.contains("enc5") && !at7.contains("enc4"));
    assert!(unfreeze_plan(&s, 10, &always).contains("enc4"));
}

#[test]
fn schedule_validation() {
    let stage = |e, b: &str| UnfreezeStage {
        start_epoch: e,
        blocks: names(&[b]),
    };
    assert!(UnfreezeSchedule::new(vec![stage(3, "enc5"), stage(3, "enc4")]).is_err());
    assert!(UnfreezeSchedule::new(vec![stage(3, "enc4"), stage(5, "enc5")]).is_err());
    assert!(UnfreezeSchedule::new(vec![stage(3, "dec1")]).is_err());
}

#[test]
fn default_schedules() {
    let enc5 = names(&["enc1", "enc2", "enc3", "enc4", "enc5"]);
    let starts = |s: &UnfreezeSchedule| -> Vec<(usize, String)> {
        s.stages().iter().map(|st| (st.start_epoch, st.blocks[0].clone())).collect()
    };
    let s = UnfreezeSchedule::default_for(&enc5, 10);
    assert_eq!(
        starts(&s),
        vec![
            (2, "enc5".into()),
            (3, "enc4".into()),
            (4, "enc3".into()),
            (5, "enc2".into()),
            (6, "enc1".into())
        ]
    );
    let s = UnfreezeSchedule::default_for(&enc5, 30);
    assert_eq!(s.stages().iter().map(|s| s.start_epoch).collect::<Vec<_>>(), vec![6, 9, 12, 15, 18]);
    let s = UnfreezeSchedule::default_for(&enc5[..4], 20);
    assert_eq!(s.unfreeze_epoch("enc4"), Some(4));
    assert_eq!(s.unfreeze_epoch("enc1"), Some(10));
    assert_eq!(s.unfreeze_epoch("enc5"), None);
    UnfreezeSchedule::new(s.stages().to_vec()).unwrap();
}

#[test]
fn early_stopping_rule() {
    let mut es = EarlyStopping::new(Some(2));
    let losses = [1.0, 0.5, 0.6, 0.7, 0.8, 0.9];
    let stop = losses.iter().enumerate().position(|(e, &l)| es.update(e, l)).unwrap();
    assert_eq!(es.best_epoch, 1);
    assert_eq!(stop, 4);
    let mut off = EarlyStopping::new(None);
    assert!(!(0..10).any(|e| off.update(e, e as f64)));
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[0.2f32, 0.4, 0.4]), 1);
    assert_eq!(argmax(&[1.0f64, 1.0, 1.0]), 0);
}

#[test]
fn history_csv_layout() {
    let r = EpochReport {
        epoch: 0,
        train_loss: 0.5,
        val_loss: 0.75,
        train: TaskMetrics::Classification { accuracy: 0.5, f1: 0.25 },
        val: TaskMetrics::Classification { accuracy: 1.0, f1: 1.0 },
        trainable_param_count: 3,
        trainable_blocks: vec![],
    };
    assert_eq!(
        history_csv(&[r]),
        "epoch,train_loss,val_loss,train_acc,val_acc,train_f1,val_f1\n1,0.5,0.75,0.5,1,0.25,1\n"
    );
}

fn synthetic_dataset(n_per_class: usize, side: usize, seed: u64, labels: &[Label]) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for i in 0..n_per_class {
        for &l in labels {
            let s = synthesize_sample(l, side, &mut rng);
            samples.push(Sample {
                path: format!("{}_{i}", l.as_str()).into(),
                image: s.image,
                label: Some(l),
                lung: Some(s.lung),
                infection: (l != Label::Normal).then_some(s.infection),
            });
        }
    }
    Dataset { side, samples }
}

fn quick_config(loss: LossKind) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-3,
        augment: None,
        loss,
        ..TrainConfig::segmentation()
    }
}

#[test]
fn frozen_model_is_unchanged_and_reports() {
    let data = synthetic_dataset(3, 32, 1, &[Label::Normal, Label::Covid19, Label::NonCovid]);
    let mut model = ClassifierModel::<f32>::new(&WidthConfig::desk(2), 0).unwrap();
    let all: Vec<String> = model.blocks().iter().map(|b| b.name.clone()).collect();
    let refs: Vec<&str> = all.iter().map(String::as_str).collect();
    model.set_trainable(&refs, false).unwrap();
    let before: Vec<u64> = model.blocks().iter().map(|b| b.fingerprint()).collect();
    let config = quick_config(LossKind::CrossEntropy);
    let mut state = TrainState::new(&config, &data).unwrap();
    let (loss, m) = train_epoch(&mut model, &data, &config, &mut state, 0).unwrap();
    assert!(loss > 0.0);
    assert!(matches!(m, TaskMetrics::Classification { .. }));
    let after: Vec<u64> = model.blocks().iter().map(|b| b.fingerprint()).collect();
    assert_eq!(before, after);
}

#[test]
fn same_seed_same_reports_and_bits() {
    let data = synthetic_dataset(4, 32, 2, &[Label::Covid19, Label::NonCovid]);
    let run = || {
        let mut model = SegmentationModel::<f32>::new(&WidthConfig::desk(2), 5).unwrap();
        let cfg = TrainConfig {
            augment: Some(AugmentParams::default()),
            ..quick_config(LossKind::DicePlusBce)
        };
        let sched = UnfreezeSchedule::default_for(&model.encoder_block_names(), cfg.epochs);
        let r = fit(&mut model, &data, &data, &cfg, &sched, |_, _| {}).unwrap();
        (r, model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert_eq!(a.history.len(), 2);
}

#[test]
fn nan_loss_aborts_with_batch_index() {
    let data = synthetic_dataset(4, 32, 3, &[Label::Covid19]);
    let mut model = SegmentationModel::<f32>::new(&WidthConfig::desk(2), 5).unwrap();
    let head = model.blocks_mut().last_mut().unwrap();
    head.params[1].value.data_mut()[0] = f32::NAN;
    let config = quick_config(LossKind::DicePlusBce);
    let mut state = TrainState::new(&config, &data).unwrap();
    match train_epoch(&mut model, &data, &config, &mut state, 0) {
        Err(Error::NumericAbort { batch, epoch, .. }) => assert_eq!((epoch, batch), (0, 0)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_and_mismatched_inputs_fail() {
    let empty = Dataset {
        side: 32,
        samples: vec![],
    };
    let mut model = SegmentationModel::<f32>::new(&WidthConfig::desk(2), 5).unwrap();
    let config = quick_config(LossKind::DicePlusBce);
    let mut state = TrainState::new(&config, &empty).unwrap();
    assert!(matches!(
        train_epoch(&mut model, &empty, &config, &mut state, 0),
        Err(Error::EmptyDataset(_))
    ));
    let normals = synthetic_dataset(2, 32, 3, &[Label::Normal]);
    assert!(train_epoch(&mut model, &normals, &config, &mut state, 0).is_err());
    let ce = quick_config(LossKind::CrossEntropy);
    assert!(matches!(
        train_epoch(&mut model, &normals, &ce, &mut state, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn history_never_exceeds_epochs_with_patience() {
    let data = synthetic_dataset(3, 32, 4, &[Label::Normal, Label::Covid19, Label::NonCovid]);
    let mut model = ClassifierModel::<f32>::new(&WidthConfig::desk(2), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        early_stop_patience: Some(0),
        ..quick_config(LossKind::CrossEntropy)
    };
    let sched = UnfreezeSchedule::all_trainable(&model.encoder_block_names());
    let r = fit(&mut model, &data, &data, &cfg, &sched, |_, _| {}).unwrap();
    assert!(r.history.len() <= 4);
    if r.stopped_early {
        assert_eq!(r.history.len(), r.best_epoch + 2);
    }
}

fn loss_after_step<M: Model<f64>>(model: &mut M, x: &Tensor<f64>, kind: LossKind, masks: &[f64], labels: &[usize]) -> (f64, f64) {
    let eval = |m: &M| -> f64 {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let f = m.forward(&mut t, xv, Mode::Train, ParamGrads::None).unwrap();
        let l = record_loss(&mut t, kind, f.output, masks, labels, None).unwrap();
        t.value(l).data()[0]
    };
    let before = eval(model);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let f = model.forward(&mut tape, xv, Mode::Train, ParamGrads::All).unwrap();
    let l = record_loss(&mut tape, kind, f.output, masks, labels, None).unwrap();
    tape.backward(l).unwrap();
    let grads: Vec<Vec<Vec<f64>>> = f
        .params
        .iter()
        .map(|b| b.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect())
        .collect();
    let mut st = OptimizerState::new();
    let mut ups = Vec::new();
    for (block, g) in model.blocks_mut().iter_mut().zip(&grads) {
        for (p, g) in block.params.iter_mut().zip(g) {
            ups.push(ParamUpdate {
                name: &p.name,
                value: &mut p.value,
                grad: g,
            });
        }
    }
    adam_step(&mut ups, &mut st, &AdamConfig::new(1e-4)).unwrap();
    (before, eval(model))
}

#[test]
fn one_small_adam_step_lowers_both_losses() {
    let (mut seg_ok, mut cls_ok) = (0, 0);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn([4, 1, 32, 32], |_| rng.random_range(-1.0..1.0));
        let masks: Vec<f64> = (0..4096).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let mut seg = SegmentationModel::<f64>::new(&WidthConfig::desk(2), seed).unwrap();
        let (b, a) = loss_after_step(&mut seg, &x, LossKind::DicePlusBce, &masks, &[]);
        seg_ok += (a < b) as usize;
        let mut cls = ClassifierModel::<f64>::new(&WidthConfig::desk(2), seed).unwrap();
        let (b, a) = loss_after_step(&mut cls, &x, LossKind::CrossEntropy, &[], &labels);
        cls_ok += (a < b) as usize;
    }
    assert!(seg_ok >= 9 && cls_ok >= 9, "seg {seg_ok}/10, cls {cls_ok}/10");
}

proptest! {
    #[test]
    fn unfreeze_plan_is_monotone(gaps in proptest::collection::vec(1usize..6, 1..5), probe in 0usize..30) {
        let mut start = 0;
        let stages: Vec<UnfreezeStage> = gaps
            .iter()
            .enumerate()
            .map(|(k, g)| {
                start += g;
                UnfreezeStage { start_epoch: start, blocks: vec![format!("enc{}", 5 - k)] }
            })
            .collect();
        let s = UnfreezeSchedule::new(stages).unwrap();
        let always = names(&["head"]);
        let a = unfreeze_plan(&s, probe, &always);
        let b = unfreeze_plan(&s, probe + 1, &always);
        prop_assert!(a.is_subset(&b));
    }
}

#[test]
fn frozen_transferred_encoder_stays_bitwise_while_dense_trains() {
    let data = synthetic_dataset(4, 32, 11, &[Label::Normal, Label::Covid19, Label::NonCovid]);
    let seg = SegmentationModel::<f32>::new(&WidthConfig::desk(2), 1).unwrap();
    let mut cls = ClassifierModel::from_segmentation(&seg, 2).unwrap();
    cls.set_trainable(&["enc1", "enc2", "enc3", "enc4"], false).unwrap();
    let before: Vec<u64> = cls.blocks().iter().map(|b| b.fingerprint()).collect();
    let config = quick_config(LossKind::CrossEntropy);
    let mut state = TrainState::new(&config, &data).unwrap();
    // 12 samples at batch 4: three optimizer steps
    train_epoch(&mut cls, &data, &config, &mut state, 0).unwrap();
    let after: Vec<u64> = cls.blocks().iter().map(|b| b.fingerprint()).collect();
    for i in 0..4 {
        assert_eq!(before[i], after[i], "{}", cls.blocks()[i].name);
        assert_eq!(after[i], seg.blocks()[i].fingerprint());
    }
    assert_ne!(before[4], after[4], "dense block did not move");
    assert_ne!(before[5], after[5], "head did not move");
}
