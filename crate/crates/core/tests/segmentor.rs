use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scribblegate::autograd::{Graph, Tensor};
use scribblegate::segmentor::{Mode, Segmentor, SegmentorConfig};

fn config(use_gating: bool) -> SegmentorConfig {
    SegmentorConfig { depths: 3, encoder_filters: vec![4, 6, 8, 8], num_classes: 3, use_gating, ..Default::default() }
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor {
    let data = (0..n * size * size).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    Tensor::new(&[n, 1, size, size], data)
}

#[test]
fn attention_maps_are_probabilities_and_gate_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for pass in 0..50 {
        let seg = Segmentor::new(config(true), pass).unwrap();
        let x = random_input(&mut rng, 2, 16);
        let mut g = Graph::new();
        let bound = seg.params().bind(&mut g);
        let xv = g.constant(x);
        let mode = if pass % 2 == 0 { Mode::Train } else { Mode::Eval };
        let (vars, _) = seg.forward(&mut g, &bound, xv, mode).unwrap();
        assert_eq!(vars.levels.len(), 3);
        for level in &vars.levels {
            let probs = g.value(level.probs);
            let (n, c, h, w) = probs.dims4();
            for b in 0..n {
                for p in 0..h * w {
                    let s: f64 = (0..c).map(|k| probs.data()[(b * c + k) * h * w + p] as f64).sum();
                    assert!((s - 1.0).abs() <= 1e-5, "softmax sums to {s}");
                }
            }
            let a = g.value(level.attention);
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

            let m = g.value(level.features);
            let gated = g.value(level.gated);
            let (n, k, h, w) = m.dims4();
            assert_eq!(gated.shape(), m.shape());
            for b in 0..n {
                for ch in 0..k {
                    for p in 0..h * w {
                        let i = (b * k + ch) * h * w + p;
                        assert_eq!(gated.data()[i].to_bits(), (m.data()[i] * a.data()[b * h * w + p]).to_bits());
                    }
                }
            }
        }
    }
}

#[test]
fn coarsest_supervision_reaches_deepest_decoder() {
    let seg = Segmentor::new(config(true), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_input(&mut rng, 2, 16);
    let mut g = Graph::new();
    let bound = seg.params().bind(&mut g);
    let xv = g.constant(x);
    let (vars, _) = seg.forward(&mut g, &bound, xv, Mode::Train).unwrap();
    let coarsest = vars.levels.last().unwrap().soft_seg;
    let shape = g.shape(coarsest).to_vec();
    let grad = Tensor::new(&shape, (0..shape.iter().product()).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    let loss = g.loss(coarsest, 1.0, grad);
    let grads = g.backward(loss);

    let norm = |name: &str| {
        let id = seg.params().param_id(name).unwrap();
        grads.get(bound.var(id)).map_or(0.0, |t| t.norm())
    };
    for name in seg.decoder_conv_names(3) {
        assert!(norm(&name) > 0.0, "{name} received no gradient");
    }
    // shallower decoder stages sit downstream of the coarsest head
    for name in seg.decoder_conv_names(1) {
        assert_eq!(norm(&name), 0.0);
    }
}

#[test]
fn ungated_model_ignores_auxiliary_classifiers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_input(&mut rng, 1, 16);
    let seg = Segmentor::new(config(false), 9).unwrap();
    let base = seg.predict(&x).unwrap();
    assert_eq!(base.levels[0].gated, level_features(&seg, &x, &base));
    let mut altered = seg.clone();
    for d in 2..=3 {
        for suffix in ["weight", "bias"] {
            let id = altered.params().param_id(&format!("dec{d}.aag.{suffix}")).unwrap();
            for v in altered.params_mut().get_mut(id).data_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
        }
    }
    let after = altered.predict(&x).unwrap();
    assert_eq!(after.probs, base.probs);
    assert_ne!(after.levels[1].soft_seg, base.levels[1].soft_seg);
}

fn level_features(seg: &Segmentor, x: &Tensor, pred: &scribblegate::segmentor::MultiScalePrediction) -> Tensor {
    // without gating the gate output is the decoder feature map itself
    let mut g = Graph::new();
    let bound = seg.params().bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let (vars, _) = seg.forward(&mut g, &bound, xv, Mode::Eval).unwrap();
    assert_eq!(vars.levels[0].gated, vars.levels[0].features);
    assert_eq!(g.value(vars.probs), &pred.probs);
    g.value(vars.levels[0].features).clone()
}

#[test]
fn gating_changes_the_final_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_input(&mut rng, 1, 16);
    let gated = Segmentor::new(config(true), 5).unwrap().predict(&x).unwrap();
    let plain = Segmentor::new(config(false), 5).unwrap().predict(&x).unwrap();
    assert_ne!(gated.probs, plain.probs);
}

#[test]
fn output_sizes_per_depth_on_64() {
    let cfg = SegmentorConfig { depths: 4, encoder_filters: vec![2, 2, 4, 4, 4], num_classes: 3, ..Default::default() };
    let seg = Segmentor::new(cfg, 0).unwrap();
    let pred = seg.predict(&Tensor::zeros(&[1, 1, 64, 64])).unwrap();
    let sizes: Vec<Vec<usize>> = pred.levels.iter().map(|l| l.soft_seg.shape().to_vec()).collect();
    assert_eq!(sizes, vec![vec![1, 2, 64, 64], vec![1, 2, 32, 32], vec![1, 2, 16, 16], vec![1, 2, 8, 8]]);
    assert_eq!(pred.probs.shape(), &[1, 3, 64, 64]);
}

#[test]
fn same_seed_same_weights_and_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_input(&mut rng, 2, 16);
    let a = Segmentor::new(config(true), 11).unwrap();
    let b = Segmentor::new(config(true), 11).unwrap();
    assert_eq!(a.params().values(), b.params().values());
    assert_eq!(a.predict(&x).unwrap().probs, b.predict(&x).unwrap().probs);
    let c = Segmentor::new(config(true), 12).unwrap();
    assert_ne!(a.params().values(), c.params().values());
}
