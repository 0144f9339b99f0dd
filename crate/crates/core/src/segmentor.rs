//! The multi-scale segmentor: a UNet whose decoder ends every depth level
//! with an adversarial attention gate (AAG).
//!
//! At each decoder depth `d` the two 3×3 conv/BN/ReLU layers produce the
//! feature map `M`; a 1×1 classifier with pixel-wise softmax predicts a
//! `c`-class segmentation; its foreground channels form the soft
//! segmentation fed to the discriminator, and their sum is the attention map
//! that multiplies `M` before nearest-neighbour upsampling to the next level.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{he_uniform, kernels, BatchMoments, Bound, BufferId, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentorConfig {
    /// Number of gated decoder levels `D`.
    pub depths: usize,
    /// Filters per encoder stage, `D + 1` entries (the last is the bottleneck).
    pub encoder_filters: Vec<usize>,
    pub num_classes: usize,
    pub input_channels: usize,
    pub use_gating: bool,
    pub use_ads: bool,
    /// Weight of the previous running statistic in BN updates.
    pub bn_momentum: f32,
}

impl Default for SegmentorConfig {
    fn default() -> Self {
        Self {
            depths: 4,
            encoder_filters: vec![32, 64, 128, 256, 512],
            num_classes: 4,
            input_channels: 1,
            use_gating: true,
            use_ads: true,
            bn_momentum: 0.9,
        }
    }
}

impl SegmentorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths == 0 {
            return Err(Error::Config("segmentor needs at least one depth".into()));
        }
        if self.encoder_filters.len() != self.depths + 1 {
            return Err(Error::Config(format!(
                "encoder_filters has {} entries, expected depths + 1 = {}",
                self.encoder_filters.len(),
                self.depths + 1
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.input_channels == 0 || self.encoder_filters.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << self.depths
    }
}

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct ConvBnRelu {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl ConvBnRelu {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), he_uniform(rng, &[cout, cin, 3, 3], cin * 9)),
            gamma: store.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0)),
            beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout])),
            running_mean: store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout])),
            running_var: store.add_buffer(format!("{name}.bn.running_var"), Tensor::full(&[cout], 1.0)),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, b: &Bound, x: Var, mode: Mode, stats: &mut Vec<(Self, BatchMoments)>) -> Var {
        let y = g.conv2d(x, b.var(self.weight), None, 1, 1);
        let y = match mode {
            Mode::Train => {
                let (y, m) = g.batch_norm(y, b.var(self.gamma), b.var(self.beta));
                stats.push((self.clone(), m));
                y
            }
            Mode::Eval => g.channel_affine(
                y,
                b.var(self.gamma),
                b.var(self.beta),
                store.buffer(self.running_mean).data(),
                store.buffer(self.running_var).data(),
            ),
        };
        g.relu(y)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    first: ConvBnRelu,
    second: ConvBnRelu,
}

impl Stage {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            first: ConvBnRelu::new(store, rng, &format!("{name}.conv1"), cin, cout),
            second: ConvBnRelu::new(store, rng, &format!("{name}.conv2"), cout, cout),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, b: &Bound, x: Var, mode: Mode, stats: &mut Vec<(ConvBnRelu, BatchMoments)>) -> Var {
        let h = self.first.forward(g, store, b, x, mode, stats);
        self.second.forward(g, store, b, h, mode, stats)
    }
}

#[derive(Debug, Clone)]
struct Classifier {
    weight: ParamId,
    bias: ParamId,
}

/// Graph handles for one attention gate.
#[derive(Debug, Clone, Copy)]
pub struct AagVars {
    /// Feature map `M` entering the gate.
    pub features: Var,
    /// Full `c`-channel softmax of the classifier.
    pub probs: Var,
    /// Foreground channels of `probs` (background removed).
    pub soft_seg: Var,
    /// Single-channel attention map, the sum of `soft_seg` channels.
    pub attention: Var,
    /// `M ⊙ attention` with gating, `M` otherwise.
    pub gated: Var,
}

/// Attention gate on an existing tape: 1×1 classifier, softmax, background
/// slicing, channel sum, and (optionally) the Hadamard gating of `features`.
pub fn aag_forward(g: &mut Graph, features: Var, weight: Var, bias: Var, use_gating: bool) -> Result<AagVars> {
    let (_, k, _, _) = g.value(features).dims4();
    let wshape = g.shape(weight).to_vec();
    if wshape.len() != 4 || wshape[1] != k || wshape[2] != 1 || wshape[3] != 1 || g.shape(bias) != [wshape[0]] {
        return Err(Error::shape(format!("classifier weight {wshape:?} does not fit a {k}-channel feature map")));
    }
    let c = wshape[0];
    if c < 2 {
        return Err(Error::shape("classifier needs at least two classes"));
    }
    let logits = g.conv2d(features, weight, Some(bias), 1, 0);
    let probs = g.softmax_channels(logits);
    let soft_seg = g.slice_channels(probs, 1, c);
    let attention = g.sum_channels(soft_seg);
    let gated = if use_gating { g.mul_channel_broadcast(features, attention) } else { features };
    Ok(AagVars { features, probs, soft_seg, attention, gated })
}

/// Graph handles for a full forward pass; `levels[0]` is depth 1 (full resolution).
#[derive(Debug, Clone)]
pub struct SegmentorVars {
    pub levels: Vec<AagVars>,
    /// Final `c`-channel prediction (the depth-1 classifier output).
    pub probs: Var,
}

/// Concrete values of one gate.
#[derive(Debug, Clone)]
pub struct AagOutput {
    pub soft_seg: Tensor,
    pub attention: Tensor,
    pub gated: Tensor,
}

/// Concrete multi-scale outputs, NCHW tensors; `levels[d-1]` holds depth `d`.
#[derive(Debug, Clone)]
pub struct MultiScalePrediction {
    pub levels: Vec<AagOutput>,
    pub probs: Tensor,
}

/// BN statistics gathered during a training-mode pass, to be folded into the running averages.
pub struct RunningStatsUpdate(Vec<(ConvBnRelu, BatchMoments)>);

#[derive(Debug, Clone)]
pub struct Segmentor {
    config: SegmentorConfig,
    store: ParamStore,
    encoder: Vec<Stage>,
    decoder: Vec<Stage>,
    classifiers: Vec<Classifier>,
}

impl Segmentor {
    pub fn new(config: SegmentorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = &config.encoder_filters;
        let mut encoder = Vec::with_capacity(config.depths + 1);
        let mut cin = config.input_channels;
        for (i, &cout) in f.iter().enumerate() {
            encoder.push(Stage::new(&mut store, &mut rng, &format!("enc{i}"), cin, cout));
            cin = cout;
        }
        let mut decoder = Vec::with_capacity(config.depths);
        let mut classifiers = Vec::with_capacity(config.depths);
        for d in 1..=config.depths {
            let cin = f[d] + f[d - 1];
            decoder.push(Stage::new(&mut store, &mut rng, &format!("dec{d}"), cin, f[d - 1]));
            let weight = store.add(
                format!("dec{d}.aag.weight"),
                he_uniform(&mut rng, &[config.num_classes, f[d - 1], 1, 1], f[d - 1]),
            );
            let bias = store.add(format!("dec{d}.aag.bias"), Tensor::zeros(&[config.num_classes]));
            classifiers.push(Classifier { weight, bias });
        }
        Ok(Self { config, store, encoder, decoder, classifiers })
    }

    pub fn config(&self) -> &SegmentorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameter names of the two convolutions at decoder depth `d`.
    pub fn decoder_conv_names(&self, d: usize) -> [String; 2] {
        [format!("dec{d}.conv1.weight"), format!("dec{d}.conv2.weight")]
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::shape(format!("expected NCHW input, got {shape:?}")));
        };
        if *c != self.config.input_channels {
            return Err(Error::shape(format!("expected {} input channels, got {c}", self.config.input_channels)));
        }
        let div = self.config.size_divisor();
        if h % div != 0 || w % div != 0 || *h == 0 || *w == 0 {
            return Err(Error::IndivisibleShape { height: *h, width: *w, divisor: div });
        }
        Ok(())
    }

    /// Records a forward pass on `g` using the parameter handles in `bound`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var, mode: Mode) -> Result<(SegmentorVars, RunningStatsUpdate)> {
        self.check_input(g.shape(x))?;
        let mut stats = Vec::new();
        let depths = self.config.depths;
        let mut skips = Vec::with_capacity(depths);
        let mut h = x;
        for stage in &self.encoder[..depths] {
            let e = stage.forward(g, &self.store, bound, h, mode, &mut stats);
            skips.push(e);
            h = g.max_pool2(e);
        }
        h = self.encoder[depths].forward(g, &self.store, bound, h, mode, &mut stats);

        let mut levels = Vec::with_capacity(depths);
        for d in (1..=depths).rev() {
            let up = g.upsample_nearest(h, 2);
            let cat = g.concat(up, skips[d - 1]);
            let m = self.decoder[d - 1].forward(g, &self.store, bound, cat, mode, &mut stats);
            let cls = &self.classifiers[d - 1];
            let aag = aag_forward(g, m, bound.var(cls.weight), bound.var(cls.bias), self.config.use_gating)?;
            h = aag.gated;
            levels.push(aag);
        }
        levels.reverse();
        let probs = levels[0].probs;
        Ok((SegmentorVars { levels, probs }, RunningStatsUpdate(stats)))
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, update: RunningStatsUpdate) {
        let momentum = self.config.bn_momentum;
        for (layer, m) in update.0 {
            let unbias = if m.count > 1 { m.count as f32 / (m.count - 1) as f32 } else { 1.0 };
            let mean = self.store.buffer_mut(layer.running_mean).data_mut();
            for (r, &b) in mean.iter_mut().zip(&m.mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            let var = self.store.buffer_mut(layer.running_var).data_mut();
            for (r, &b) in var.iter_mut().zip(&m.var) {
                *r = momentum * *r + (1.0 - momentum) * b * unbias;
            }
        }
    }

    /// Inference with running statistics.
    pub fn predict(&self, images: &Tensor) -> Result<MultiScalePrediction> {
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let (vars, _) = self.forward(&mut g, &bound, x, Mode::Eval)?;
        Ok(collect_prediction(&g, &vars))
    }
}

pub fn collect_prediction(g: &Graph, vars: &SegmentorVars) -> MultiScalePrediction {
    MultiScalePrediction {
        levels: vars
            .levels
            .iter()
            .map(|l| AagOutput {
                soft_seg: g.value(l.soft_seg).clone(),
                attention: g.value(l.attention).clone(),
                gated: g.value(l.gated).clone(),
            })
            .collect(),
        probs: g.value(vars.probs).clone(),
    }
}

/// Nearest-neighbour upsampling of a `k × h × w` map by an integer factor.
pub fn upsample_nn(map: &Array3<f32>, factor: usize) -> Array3<f32> {
    assert!(factor >= 1, "upsampling factor must be at least 1");
    let (k, h, w) = map.dim();
    let flat: Vec<f32> = map.iter().copied().collect();
    let out = kernels::upsample_nearest(&flat, k, h, w, factor);
    Array3::from_shape_vec((k, h * factor, w * factor), out).expect("upsampled size")
}
