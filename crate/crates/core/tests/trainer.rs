mod common;

use std::collections::BTreeSet;
use std::sync::atomic::AtomicBool;

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use scribblegate::autograd::{Graph, Tensor};
use scribblegate::config::{AblationFlags, ExperimentConfig};
use scribblegate::datapipe::{split_dataset, DatasetSplit, Record};
use scribblegate::objectives::supervised_loss;
use scribblegate::scribblegen::{ScribbleMap, UNLABELED};
use scribblegate::segmentor::Mode;
use scribblegate::trainer::{
    apply_roto_translation, cyclical_lr, run_training, train_step_unlabeled, train_step_weak, RotoTranslation, RunHooks,
    TrainState, TrainingData,
};
use scribblegate::Error;

use common::{synthetic_records, tiny_config};

fn fixture(cfg: &ExperimentConfig) -> (Vec<Record>, DatasetSplit, TrainingData) {
    let records = synthetic_records(8, 3, 2, cfg.image_size);
    let subjects: Vec<String> = records.iter().map(|r| r.image.subject_id.clone()).collect();
    let split = split_dataset(&subjects, (0.5, 0.25, 0.25), 1).unwrap();
    let data = TrainingData::assemble(&records, &split, cfg).unwrap();
    (records, split, data)
}

fn params_of(state: &TrainState) -> (Vec<Tensor>, Vec<Tensor>) {
    let seg = state.segmentor.params().values().to_vec();
    let disc = state.discriminator.as_ref().map(|d| d.params().values().to_vec()).unwrap_or_default();
    (seg, disc)
}

#[test]
fn assembled_roles_follow_the_split() {
    let cfg = tiny_config();
    let (_, split, data) = fixture(&cfg);
    let subject = |id: &str| id.split('/').next().unwrap().to_string();
    assert!(data.weak.iter().all(|s| split.seg_train.contains(&subject(&s.id))));
    assert!(data.unlabeled.iter().all(|s| split.seg_train.contains(&subject(&s.id))));
    assert!(data.masks.iter().all(|m| split.disc_train.contains(&subject(&m.id))));
    assert!(data.validation.iter().all(|v| split.validation.contains(&subject(&v.id))));
    assert_eq!(data.masks.len(), 3 * split.disc_train.len());
}

#[test]
fn annotation_fraction_keeps_a_subset() {
    let mut cfg = tiny_config();
    cfg.annotation_fraction = 0.5;
    let (_, _, data) = fixture(&cfg);
    assert_eq!(data.unlabeled.len(), 6);
    assert_eq!(data.weak.len(), 3);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let cfg = tiny_config();
    let (_, _, data) = fixture(&cfg);
    let mut state = TrainState::new(&cfg, (32, 32)).unwrap();
    let (seg0, disc0) = params_of(&state);
    train_step_weak(&mut state, &data.weak[..2], &cfg, 0.0).unwrap();
    let masks: Vec<_> = data.masks[..2].iter().map(|m| &m.pyramid).collect();
    train_step_unlabeled(&mut state, &data.unlabeled[..2], &masks, &cfg, 0.0).unwrap();
    let (seg1, disc1) = params_of(&state);
    assert_eq!(seg0, seg1);
    assert_eq!(disc0, disc1);
}

#[test]
fn ablated_weak_step_is_a_plain_supervised_step() {
    let mut cfg = tiny_config();
    cfg.flags = AblationFlags::NONE;
    let (_, _, data) = fixture(&cfg);
    let batch = &data.weak[..2];
    let mut state = TrainState::new(&cfg, (32, 32)).unwrap();
    assert!(state.discriminator.is_none());

    // reference step assembled by hand
    let mut seg = state.segmentor.clone();
    let mut adam = state.seg_adam.clone();
    let mut g = Graph::new();
    let bound = seg.params().bind(&mut g);
    let parts: Vec<Tensor> = batch.iter().map(|s| Tensor::new(&[1, 32, 32], s.image.iter().copied().collect())).collect();
    let x = g.constant(Tensor::stack(&parts));
    let (vars, _) = seg.forward(&mut g, &bound, x, Mode::Train).unwrap();
    let probs = g.value(vars.probs).clone();
    let plane = 3 * 32 * 32;
    let mut grad = vec![0.0f32; probs.len()];
    let mut loss = 0.0;
    for (b, s) in batch.iter().enumerate() {
        let pred = Array3::from_shape_vec((3, 32, 32), probs.data()[b * plane..(b + 1) * plane].iter().map(|&v| v as f64).collect()).unwrap();
        let term = supervised_loss(pred.view(), &s.scribbles, None, cfg.supervised_loss, cfg.epsilon).unwrap();
        loss += term.value / 2.0;
        for (dst, src) in grad[b * plane..(b + 1) * plane].iter_mut().zip(term.grad.iter()) {
            *dst = (src / 2.0) as f32;
        }
    }
    let root = g.loss(vars.probs, loss, Tensor::new(probs.shape(), grad));
    let mut grads = g.backward(root);
    let seg_grads = seg.params().collect_grads(&mut grads, &bound);
    adam.update(seg.params_mut(), &seg_grads, 1e-3);

    let rec = train_step_weak(&mut state, batch, &cfg, 1e-3).unwrap();
    assert_eq!(rec.adv_loss, None);
    assert_eq!(rec.a0, 1.0);
    assert_eq!(rec.sup_loss, loss);
    assert_eq!(state.segmentor.params().values(), seg.params().values());
}

#[test]
fn unlabeled_phase_is_skipped_without_discriminator() {
    let mut cfg = tiny_config();
    cfg.flags = AblationFlags::NONE;
    let (_, _, data) = fixture(&cfg);
    let mut state = TrainState::new(&cfg, (32, 32)).unwrap();
    let before = params_of(&state);
    assert_eq!(train_step_unlabeled(&mut state, &data.unlabeled[..2], &[], &cfg, 1e-3).unwrap(), None);
    assert_eq!(params_of(&state), before);
    assert_eq!(state.step, 0);
}

#[test]
fn unlabeled_step_needs_masks() {
    let cfg = tiny_config();
    let (_, _, data) = fixture(&cfg);
    let mut state = TrainState::new(&cfg, (32, 32)).unwrap();
    assert!(matches!(train_step_unlabeled(&mut state, &data.unlabeled[..2], &[], &cfg, 1e-3), Err(Error::NoUnpairedMasks)));
}

#[test]
fn phases_touch_only_their_own_weights() {
    let (_, _, data) = fixture(&tiny_config());
    let masks: Vec<_> = data.masks[..2].iter().map(|m| &m.pyramid).collect();
    let images = &data.unlabeled[..2];

    // with a3 = 0 only the discriminator phase has a gradient
    let mut cfg = tiny_config();
    cfg.a3 = 0.0;
    let mut state = TrainState::new(&cfg, (32, 32)).unwrap();
    let (seg0, disc0) = params_of(&state);
    train_step_unlabeled(&mut state, images, &masks, &cfg, 1e-3).unwrap();
    let (seg1, disc1) = params_of(&state);
    assert_eq!(seg0, seg1);
    assert_ne!(disc0, disc1);

    // with a2 = 0 only the segmentor phase has a gradient
    cfg.a3 = 0.2;
    cfg.a2 = 0.0;
    let mut state = TrainState::new(&cfg, (32, 32)).unwrap();
    train_step_unlabeled(&mut state, images, &masks, &cfg, 1e-3).unwrap();
    let (seg2, disc2) = params_of(&state);
    assert_ne!(seg0, seg2);
    assert_eq!(disc0, disc2);
}

#[test]
fn satisfied_discriminator_gives_no_segmentor_gradient() {
    let mut cfg = tiny_config();
    cfg.a2 = 0.0;
    let (_, _, data) = fixture(&cfg);
    let mut state = TrainState::new(&cfg, (32, 32)).unwrap();
    let disc = state.discriminator.as_mut().unwrap();
    let bias = disc.params().param_id("dense.bias").unwrap();
    for v in disc.params_mut().values_mut() {
        *v = Tensor::zeros(v.shape());
    }
    *disc.params_mut().get_mut(bias) = Tensor::full(&[1], 1.0);
    let (seg0, disc0) = params_of(&state);
    let masks: Vec<_> = data.masks[..2].iter().map(|m| &m.pyramid).collect();
    let rec = train_step_unlabeled(&mut state, &data.unlabeled[..2], &masks, &cfg, 1e-3).unwrap().unwrap();
    assert!(rec.fake_scores.iter().all(|&s| s == 1.0));
    assert_eq!(rec.gen_loss, 0.0);
    assert_eq!(params_of(&state), (seg0, disc0));
}

#[test]
fn alternating_steps_stay_finite() {
    let cfg = tiny_config();
    let (_, _, data) = fixture(&cfg);
    let mut state = TrainState::new(&cfg, (32, 32)).unwrap();
    for step in 0..200 {
        let i = step % (data.unlabeled.len() - 1);
        let j = step % (data.masks.len() - 1);
        train_step_weak(&mut state, &data.weak[i % (data.weak.len() - 1)..][..2], &cfg, 1e-3).unwrap();
        let masks: Vec<_> = data.masks[j..j + 2].iter().map(|m| &m.pyramid).collect();
        let rec = train_step_unlabeled(&mut state, &data.unlabeled[i..i + 2], &masks, &cfg, 1e-3).unwrap().unwrap();
        assert!(rec.disc_loss.is_finite() && rec.gen_loss.is_finite());
        assert!(rec.real_scores.iter().chain(&rec.fake_scores).all(|s| s.is_finite() && s.abs() < 10.0));
    }
    assert!(state.segmentor.params().values().iter().all(Tensor::all_finite));
}

#[test]
fn repeated_batch_is_overfit() {
    let mut cfg = tiny_config();
    cfg.flags = AblationFlags::NONE;
    let (_, _, data) = fixture(&cfg);
    let mut state = TrainState::new(&cfg, (32, 32)).unwrap();
    let batch = &data.weak[..2];
    let losses: Vec<f64> = (0..200).map(|_| train_step_weak(&mut state, batch, &cfg, 1e-3).unwrap().sup_loss).collect();
    let smoothed: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let rising = smoothed.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rising <= 2, "smoothed losses {smoothed:?}");
    assert!(smoothed[19] < 0.5 * smoothed[0], "smoothed losses {smoothed:?}");
}

#[test]
fn full_run_hygiene_schedule_and_early_stopping() {
    let mut cfg = tiny_config();
    cfg.max_epochs = 6;
    cfg.patience = 1;
    let (records, split, data) = fixture(&cfg);
    let report = run_training(&cfg, &data, &RunHooks::default()).unwrap();

    let disc_ids: BTreeSet<String> =
        records.iter().filter(|r| split.disc_train.contains(&r.image.subject_id)).map(|r| r.image.id.clone()).collect();
    assert!(!report.sigma_image_ids.is_empty());
    assert!(report.sigma_image_ids.is_disjoint(&disc_ids));

    for r in &report.history {
        assert_eq!(r.lr, cyclical_lr(r.epoch as f64));
    }
    let best = report.best_epoch.unwrap();
    assert_eq!(report.best_val_dice, report.history[best].val_dice);
    assert!(report.history[best..].iter().all(|r| r.val_dice <= report.best_val_dice));
    if report.stopped_early {
        assert_eq!(report.history.len(), best + cfg.patience + 2);
    }
}

#[test]
fn zero_patience_stops_at_first_plateau() {
    let mut cfg = tiny_config();
    cfg.max_epochs = 20;
    cfg.patience = 0;
    cfg.flags = AblationFlags::NONE;
    cfg.lr_min = 0.0;
    cfg.lr_max = 0.0;
    let (_, _, data) = fixture(&cfg);
    // weights never move, so epoch 1 cannot improve on epoch 0
    let report = run_training(&cfg, &data, &RunHooks::default()).unwrap();
    assert!(report.stopped_early);
    assert_eq!(report.history.len(), 2);
    assert_eq!(report.best_epoch, Some(0));
}

#[test]
fn identical_runs_write_identical_metrics() {
    let mut cfg = tiny_config();
    cfg.max_epochs = 2;
    let (_, _, data) = fixture(&cfg);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_training(&cfg, &data, &RunHooks { run_dir: Some(d.path()), ..Default::default() }).unwrap();
        assert!(d.path().join("best.ckpt").exists() && d.path().join("last.ckpt").exists());
    }
    let read = |i: usize| std::fs::read(dirs[i].path().join("metrics.csv")).unwrap();
    assert_eq!(read(0), read(1));
    assert_eq!(String::from_utf8(read(0)).unwrap().lines().count(), 3);
}

#[test]
fn interrupt_checkpoints_and_stops() {
    let cfg = tiny_config();
    let (_, _, data) = fixture(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let flag = AtomicBool::new(true);
    let report = run_training(&cfg, &data, &RunHooks { run_dir: Some(dir.path()), interrupt: Some(&flag), ..Default::default() }).unwrap();
    assert!(report.interrupted);
    assert!(report.history.is_empty());
    assert!(dir.path().join("last.ckpt").exists());
}

fn scribble_grid() -> impl Strategy<Value = ScribbleMap> {
    prop::collection::vec(prop_oneof![Just(UNLABELED), 0u8..3], 64)
        .prop_map(|v| ScribbleMap::new(Array2::from_shape_vec((8, 8), v).unwrap(), 3).unwrap())
}

proptest! {
    #[test]
    fn transformed_labels_stay_in_the_original_set(s in scribble_grid(), angle in -15.0f64..15.0, dy in -0.8f64..0.8, dx in -0.8f64..0.8) {
        let img = Array3::zeros((1, 8, 8));
        let t = RotoTranslation { angle_deg: angle, shift: (dy, dx) };
        let (_, out) = apply_roto_translation(img.view(), std::slice::from_ref(&s), &t);
        let allowed: BTreeSet<u8> = s.labels().iter().copied().chain([UNLABELED]).collect();
        prop_assert!(out[0].labels().iter().all(|v| allowed.contains(v)));
    }
}
