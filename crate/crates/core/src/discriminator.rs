//! Multi-scale shape discriminator.
//!
//! Each depth applies a spectrally-normalized 4×4 stride-2 convolution with
//! `tanh`, then a 1×1 convolution compressing to a few channels with `tanh`.
//! With ADS enabled the mask pyramid level of the next depth is concatenated
//! onto the compressed features before the next convolution; a dense layer
//! maps the last features to one realism score per sample.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{he_uniform, BufferId, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::datapipe::LabelMask;
use crate::error::{Error, Result};

/// Below this singular value a layer is left unnormalized (it is numerically zero).
const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub depths: usize,
    /// Filters of the strided convolution at each depth, `D + 1` entries
    /// mirroring the segmentor encoder; the last one is unused.
    pub filters: Vec<usize>,
    pub compress_channels: usize,
    pub num_classes: usize,
    /// Spatial size of the depth-1 input.
    pub input_size: (usize, usize),
    pub use_ads: bool,
    pub spectral_norm: bool,
    pub label_flip_prob: f64,
    pub instance_noise_sigma: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            depths: 4,
            filters: vec![32, 64, 128, 256, 512],
            compress_channels: 12,
            num_classes: 4,
            input_size: (224, 224),
            use_ads: true,
            spectral_norm: true,
            label_flip_prob: 0.10,
            instance_noise_sigma: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths == 0 || self.filters.len() != self.depths + 1 {
            return Err(Error::Config(format!(
                "discriminator needs depths + 1 = {} filter entries, got {}",
                self.depths + 1,
                self.filters.len()
            )));
        }
        if self.num_classes < 2 || self.compress_channels == 0 || self.filters.contains(&0) {
            return Err(Error::Config("discriminator channel counts must be positive".into()));
        }
        let div = 1 << self.depths;
        let (h, w) = self.input_size;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::IndivisibleShape { height: h, width: w, divisor: div });
        }
        if !(0.0..=1.0).contains(&self.label_flip_prob) || self.instance_noise_sigma < 0.0 {
            return Err(Error::Config("noise settings out of range".into()));
        }
        Ok(())
    }
}

/// Foreground channels of a mask downsampled to every depth; `levels[d-1]`
/// is `(c-1) × H/2^(d-1) × W/2^(d-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    pub levels: Vec<Array3<f32>>,
}

/// Builds the pyramid of a one-hot mask by nearest-neighbour subsampling
/// (the top-left pixel of every block).
pub fn mask_pyramid(mask: &LabelMask, depths: usize) -> Result<MaskPyramid> {
    let (h, w) = mask.dims();
    let div = 1usize << depths.saturating_sub(1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::IndivisibleShape { height: h, width: w, divisor: div });
    }
    let c = mask.num_classes();
    let mut levels = Vec::with_capacity(depths);
    for d in 0..depths {
        let s = 1 << d;
        let level = Array3::from_shape_fn((c - 1, h / s, w / s), |(k, y, x)| mask.channels()[[k + 1, y * s, x * s]] as f32);
        levels.push(level);
    }
    Ok(MaskPyramid { levels })
}

/// Batched pyramid from an NCHW tensor of foreground channels.
pub fn pyramid_tensor(level1: &Tensor, depths: usize) -> Vec<Tensor> {
    let (n, c, h, w) = level1.dims4();
    let mut out = vec![level1.clone()];
    for d in 1..depths {
        let s = 1 << d;
        let (hs, ws) = (h / s, w / s);
        let mut data = Vec::with_capacity(n * c * hs * ws);
        for plane in level1.data().chunks(h * w) {
            for y in 0..hs {
                for x in 0..ws {
                    data.push(plane[y * s * w + x * s]);
                }
            }
        }
        out.push(Tensor::new(&[n, c, hs, ws], data));
    }
    out
}

impl MaskPyramid {
    /// Stacks per-sample pyramids into NCHW tensors, one per depth.
    pub fn stack(pyramids: &[MaskPyramid]) -> Vec<Tensor> {
        assert!(!pyramids.is_empty(), "stacking an empty set of pyramids");
        (0..pyramids[0].levels.len())
            .map(|d| {
                let (c, h, w) = pyramids[0].levels[d].dim();
                let data: Vec<f32> = pyramids.iter().flat_map(|p| p.levels[d].iter().copied()).collect();
                Tensor::new(&[pyramids.len(), c, h, w], data)
            })
            .collect()
    }
}

/// Power iteration for the largest singular value of `weight`, starting from
/// (and updating) `u`. Returns `weight / sigma` and `sigma`.
pub fn spectral_normalize(weight: &Array2<f64>, u: &mut Array1<f64>, iterations: usize) -> Result<(Array2<f64>, f64)> {
    if weight.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroWeight);
    }
    if u.len() != weight.nrows() {
        return Err(Error::shape(format!("u has {} entries for {} rows", u.len(), weight.nrows())));
    }
    let normalize = |x: Array1<f64>| {
        let n = x.dot(&x).sqrt();
        if n > 0.0 { x / n } else { x }
    };
    let mut v = normalize(weight.t().dot(u));
    for _ in 0..iterations.max(1) {
        v = normalize(weight.t().dot(u));
        *u = normalize(weight.dot(&v));
    }
    let sigma = u.dot(&weight.dot(&v));
    if sigma.abs() < SIGMA_FLOOR {
        return Err(Error::ZeroWeight);
    }
    Ok((weight / sigma, sigma))
}

/// Adds i.i.d. `N(0, sigma²)` noise to every element; no clipping.
pub fn apply_instance_noise<R: Rng>(input: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    if sigma == 0.0 {
        return input.clone();
    }
    let mut out = input.clone();
    for x in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x += (sigma * z) as f32;
    }
    out
}

/// Returns the tag the discriminator is trained against: `is_real`, flipped with probability `p`.
pub fn apply_label_noise<R: Rng>(is_real: bool, p: f64, rng: &mut R) -> bool {
    if p <= 0.0 {
        return is_real;
    }
    let flip = rng.random::<f64>() < p;
    is_real ^ flip
}

#[derive(Debug, Clone)]
struct DepthLayers {
    conv_weight: ParamId,
    conv_bias: ParamId,
    u: BufferId,
    v: BufferId,
    compress_weight: ParamId,
    compress_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    layers: Vec<DepthLayers>,
    dense_weight: ParamId,
    dense_bias: ParamId,
}

fn unit_normal(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x /= norm);
    Tensor::new(&[n], v)
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fg = config.num_classes - 1;
        let k = config.compress_channels;
        let mut layers = Vec::with_capacity(config.depths);
        for d in 1..=config.depths {
            let cin = if d == 1 { fg } else if config.use_ads { k + fg } else { k };
            let f = config.filters[d - 1];
            let conv_weight = store.add(format!("d{d}.conv.weight"), he_uniform(&mut rng, &[f, cin, 4, 4], cin * 16));
            let conv_bias = store.add(format!("d{d}.conv.bias"), Tensor::zeros(&[f]));
            let u = store.add_buffer(format!("d{d}.conv.u"), unit_normal(&mut rng, f));
            let v = store.add_buffer(format!("d{d}.conv.v"), unit_normal(&mut rng, cin * 16));
            let compress_weight = store.add(format!("d{d}.compress.weight"), he_uniform(&mut rng, &[k, f, 1, 1], f));
            let compress_bias = store.add(format!("d{d}.compress.bias"), Tensor::zeros(&[k]));
            layers.push(DepthLayers { conv_weight, conv_bias, u, v, compress_weight, compress_bias });
        }
        let s = 1 << config.depths;
        let features = k * (config.input_size.0 / s) * (config.input_size.1 / s);
        let dense_weight = store.add("dense.weight", he_uniform(&mut rng, &[1, features], features));
        let dense_bias = store.add("dense.bias", Tensor::zeros(&[1]));
        let mut disc = Self { config, store, layers, dense_weight, dense_bias };
        // settle the singular-vector estimates before the first use
        for _ in 0..5 {
            disc.power_iterate();
        }
        Ok(disc)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// One power-iteration step per normalized layer, refining the stored `u`, `v`.
    pub fn power_iterate(&mut self) {
        if !self.config.spectral_norm {
            return;
        }
        for layer in &self.layers {
            let w = self.store.get(layer.conv_weight).clone();
            let rows = w.shape()[0];
            let cols = w.len() / rows;
            let wd = w.data();
            let u: Vec<f64> = self.store.buffer(layer.u).data().iter().map(|&x| x as f64).collect();
            let mut v = vec![0.0f64; cols];
            for r in 0..rows {
                for c in 0..cols {
                    v[c] += wd[r * cols + c] as f64 * u[r];
                }
            }
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vn == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= vn);
            let mut u2: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| wd[r * cols + c] as f64 * v[c]).sum()).collect();
            let un = u2.iter().map(|x| x * x).sum::<f64>().sqrt();
            if un == 0.0 {
                continue;
            }
            u2.iter_mut().for_each(|x| *x /= un);
            for (dst, src) in self.store.buffer_mut(layer.u).data_mut().iter_mut().zip(&u2) {
                *dst = *src as f32;
            }
            for (dst, src) in self.store.buffer_mut(layer.v).data_mut().iter_mut().zip(&v) {
                *dst = *src as f32;
            }
        }
    }

    /// Current singular-value estimate `uᵀ W v` of each depth's convolution.
    pub fn sigma_estimates(&self) -> Vec<f64> {
        self.layers.iter().map(|l| self.sigma(l)).collect()
    }

    fn sigma(&self, layer: &DepthLayers) -> f64 {
        let w = self.store.get(layer.conv_weight);
        let u = self.store.buffer(layer.u).data();
        let v = self.store.buffer(layer.v).data();
        let cols = v.len();
        let mut s = 0.0f64;
        for (r, &ur) in u.iter().enumerate() {
            let row = &w.data()[r * cols..(r + 1) * cols];
            s += ur as f64 * row.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
        }
        s
    }

    /// Records the discriminator on `g`. `pyramid[d-1]` must hold the level-`d`
    /// input as an NCHW tensor handle; only level 1 is read without ADS.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, pyramid: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        let needed = if cfg.use_ads { cfg.depths } else { 1 };
        if pyramid.len() < needed {
            return Err(Error::shape(format!("discriminator needs {needed} pyramid levels, got {}", pyramid.len())));
        }
        let (n, c, h, w) = g.value(pyramid[0]).dims4();
        if c != cfg.num_classes - 1 || (h, w) != cfg.input_size {
            return Err(Error::shape(format!(
                "discriminator expects {}×{}×{} inputs, got {c}×{h}×{w}",
                cfg.num_classes - 1,
                cfg.input_size.0,
                cfg.input_size.1
            )));
        }
        let mut x = pyramid[0];
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 && cfg.use_ads {
                let level = pyramid[i];
                if g.shape(level)[2..] != g.shape(x)[2..] || g.shape(level)[0] != n {
                    return Err(Error::shape(format!("pyramid level {} has shape {:?}", i + 1, g.shape(level))));
                }
                x = g.concat(x, level);
            }
            let mut wv = bound.var(layer.conv_weight);
            if cfg.spectral_norm && self.sigma(layer).abs() >= SIGMA_FLOOR {
                wv = g.spectral_norm(wv, self.store.buffer(layer.u).data(), self.store.buffer(layer.v).data());
            }
            let y = g.conv2d(x, wv, Some(bound.var(layer.conv_bias)), 2, 1);
            let y = g.tanh(y);
            let y = g.conv2d(y, bound.var(layer.compress_weight), Some(bound.var(layer.compress_bias)), 1, 0);
            x = g.tanh(y);
        }
        Ok(g.dense(x, bound.var(self.dense_weight), bound.var(self.dense_bias)))
    }

    /// Scores for concrete inputs, without recording gradients.
    pub fn score(&self, pyramid: &[Tensor]) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let bound = self.store.bind_frozen(&mut g);
        let vars: Vec<Var> = pyramid.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward(&mut g, &bound, &vars)?;
        Ok(g.value(out).data().to_vec())
    }
}
