//! Alternating optimization of the segmentor Σ and the discriminator Δ.
//!
//! Every step runs a weak batch (images with scribbles, Σ only) and then an
//! unlabeled batch (Δ on real vs detached fake masks, then Σ against the
//! freshly updated Δ). After each epoch the validation Dice drives early
//! stopping; the best epoch's weights are kept.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Adam, Graph, Tensor, Var};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::datapipe::{DatasetSplit, LabelMask, Record, SplitGroup};
use crate::discriminator::{apply_instance_noise, apply_label_noise, mask_pyramid, Discriminator, MaskPyramid};
use crate::error::{Error, Result};
use crate::evaluation::{dice_multiclass, harden};
use crate::objectives::{dynamic_a0, lsgan_disc_loss_flipped, lsgan_gen_loss, supervised_loss};
use crate::scribblegen::{ScribbleMap, UNLABELED};
use crate::segmentor::{collect_prediction, Mode, Segmentor};

/// `lr_min + (lr_max − lr_min)·(1 + cos(2π·epoch/period))/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub period: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { lr_min: 1e-5, lr_max: 1e-4, period: 20.0 }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: f64) -> f64 {
        let phase = (1.0 + (2.0 * std::f64::consts::PI * epoch / self.period).cos()) / 2.0;
        self.lr_min + (self.lr_max - self.lr_min) * phase
    }
}

pub fn cyclical_lr(epoch: f64) -> f64 {
    LrSchedule::default().at(epoch)
}

/// A random rotation (degrees) about the image center followed by a shift (pixels, `(dy, dx)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotoTranslation {
    pub angle_deg: f64,
    pub shift: (f64, f64),
}

impl RotoTranslation {
    pub const IDENTITY: Self = Self { angle_deg: 0.0, shift: (0.0, 0.0) };

    pub fn sample<R: Rng>(rng: &mut R, max_deg: f64, max_frac: f64, height: usize, width: usize) -> Self {
        let angle_deg = if max_deg > 0.0 { rng.random_range(-max_deg..=max_deg) } else { 0.0 };
        let mut shift = |size: usize| {
            let m = max_frac * size as f64;
            if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 }
        };
        let dy = shift(height);
        let dx = shift(width);
        Self { angle_deg, shift: (dy, dx) }
    }

    /// Source coordinates sampled by output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, height: usize, width: usize) -> (f64, f64) {
        let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
        let (ry, rx) = (y as f64 - cy - self.shift.0, x as f64 - cx - self.shift.1);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        (cy + c * ry - s * rx, cx + s * ry + c * rx)
    }
}

/// Applies one transform to a `C × H × W` image (bilinear, border-clamped)
/// and to label maps (nearest neighbour; outside the canvas becomes UNLABELED).
pub fn apply_roto_translation(image: ArrayView3<'_, f32>, labels: &[ScribbleMap], t: &RotoTranslation) -> (Array3<f32>, Vec<ScribbleMap>) {
    if *t == RotoTranslation::IDENTITY {
        return (image.to_owned(), labels.to_vec());
    }
    let (ch, h, w) = image.dim();
    let mut out = Array3::zeros((ch, h, w));
    let mut coords = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            coords.push(t.source(y, x, h, w));
        }
    }
    for k in 0..ch {
        let plane = image.index_axis(ndarray::Axis(0), k);
        for (i, &(sy, sx)) in coords.iter().enumerate() {
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            let top = plane[(y0, x0)] * (1.0 - fx) + plane[(y0, x1)] * fx;
            let bottom = plane[(y1, x0)] * (1.0 - fx) + plane[(y1, x1)] * fx;
            out[(k, i / w, i % w)] = top * (1.0 - fy) + bottom * fy;
        }
    }
    let warped = labels
        .iter()
        .map(|s| {
            let src = s.labels();
            let (lh, lw) = s.dims();
            let map = Array2::from_shape_fn((lh, lw), |(y, x)| {
                let (sy, sx) = t.source(y, x, lh, lw);
                let (ny, nx) = (sy.round(), sx.round());
                if ny < 0.0 || nx < 0.0 || ny >= lh as f64 || nx >= lw as f64 {
                    UNLABELED
                } else {
                    src[(ny as usize, nx as usize)]
                }
            });
            ScribbleMap::new(map, s.num_classes()).expect("warping keeps label values")
        })
        .collect();
    (out, warped)
}

/// Draws a transform within the given bounds and applies it.
pub fn augment_roto_translate<R: Rng>(
    image: ArrayView3<'_, f32>,
    labels: &[ScribbleMap],
    rng: &mut R,
    max_deg: f64,
    max_frac: f64,
) -> (Array3<f32>, Vec<ScribbleMap>) {
    let (_, h, w) = image.dim();
    let t = RotoTranslation::sample(rng, max_deg, max_frac, h, w);
    apply_roto_translation(image, labels, &t)
}

/// An image with scribble supervision (or a dense mask stored as a fully annotated map).
#[derive(Debug, Clone)]
pub struct WeakSample {
    pub id: String,
    /// `C × H × W`.
    pub image: Array3<f32>,
    pub scribbles: Vec<ScribbleMap>,
    pub full_mask: bool,
}

#[derive(Debug, Clone)]
pub struct UnlabeledSample {
    pub id: String,
    pub image: Array3<f32>,
}

#[derive(Debug, Clone)]
pub struct RealMask {
    pub id: String,
    pub pyramid: MaskPyramid,
}

#[derive(Debug, Clone)]
pub struct ValidationSample {
    pub id: String,
    pub image: Array3<f32>,
    pub mask: LabelMask,
}

/// In-memory training data, already separated by role.
#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub weak: Vec<WeakSample>,
    pub unlabeled: Vec<UnlabeledSample>,
    pub masks: Vec<RealMask>,
    pub validation: Vec<ValidationSample>,
}

fn chw(pixels: &Array3<f32>) -> Array3<f32> {
    pixels.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

impl TrainingData {
    /// Routes preprocessed records by subject group.
    ///
    /// `seg_train` images all join the unlabeled stream; a seeded choice of
    /// `ceil(annotation_fraction · n)` of them (at least one) keeps its
    /// supervision, and `mixed_mask_fraction` of those use the dense mask.
    /// Only `disc_train` masks reach the discriminator and its images are
    /// never used.
    pub fn assemble(records: &[Record], split: &DatasetSplit, cfg: &ExperimentConfig) -> Result<Self> {
        let mut seg: Vec<&Record> = Vec::new();
        let mut data = TrainingData::default();
        for r in records {
            match split.group_of(&r.image.subject_id) {
                Some(SplitGroup::SegTrain) => seg.push(r),
                Some(SplitGroup::DiscTrain) => {
                    if let Some(m) = &r.mask {
                        data.masks.push(RealMask { id: r.image.id.clone(), pyramid: mask_pyramid(m, cfg.depths)? });
                    }
                }
                Some(SplitGroup::Validation) => {
                    let mask = r.mask.clone().ok_or_else(|| Error::Dataset(format!("{}: validation image has no mask", r.image.id)))?;
                    data.validation.push(ValidationSample { id: r.image.id.clone(), image: chw(&r.image.pixels), mask });
                }
                Some(SplitGroup::Test) | None => {}
            }
        }
        seg.sort_by(|a, b| a.image.id.cmp(&b.image.id));
        if seg.is_empty() {
            return Err(Error::Dataset("no segmentor training images".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
        let mut order: Vec<usize> = (0..seg.len()).collect();
        order.shuffle(&mut rng);
        let n_weak = ((cfg.annotation_fraction * seg.len() as f64).ceil() as usize).clamp(1, seg.len());
        let mut chosen = order[..n_weak].to_vec();
        chosen.sort_unstable();
        let n_full = (cfg.mixed_mask_fraction * n_weak as f64).round() as usize;
        let mut full_order = chosen.clone();
        full_order.shuffle(&mut rng);
        let full: BTreeSet<usize> = full_order[..n_full].iter().copied().collect();
        for &i in &chosen {
            let r = seg[i];
            let (scribbles, full_mask) = if full.contains(&i) {
                let m = r.mask.as_ref().ok_or_else(|| Error::Dataset(format!("{}: mixed supervision needs a mask", r.image.id)))?;
                (vec![ScribbleMap::from_mask(m)], true)
            } else {
                let s: Vec<ScribbleMap> = r.scribbles.iter().take(cfg.annotators).cloned().collect();
                if s.iter().all(ScribbleMap::is_empty) {
                    return Err(Error::Dataset(format!("{}: no scribble", r.image.id)));
                }
                (s, false)
            };
            data.weak.push(WeakSample { id: r.image.id.clone(), image: chw(&r.image.pixels), scribbles, full_mask });
        }
        for r in &seg {
            data.unlabeled.push(UnlabeledSample { id: r.image.id.clone(), image: chw(&r.image.pixels) });
        }
        Ok(data)
    }

    pub fn image_size(&self) -> Result<(usize, usize)> {
        let first = self.weak.first().ok_or_else(|| Error::Dataset("no weakly annotated images".into()))?;
        let (_, h, w) = first.image.dim();
        Ok((h, w))
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub segmentor: Segmentor,
    pub discriminator: Option<Discriminator>,
    pub seg_adam: Adam,
    pub disc_adam: Option<Adam>,
    pub best_val_metric: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub data_rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    pub init_seed: u64,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig, input_size: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let segmentor = Segmentor::new(cfg.segmentor_config(), cfg.init_seed)?;
        let discriminator = if cfg.flags.use_discriminator {
            Some(Discriminator::new(cfg.discriminator_config(input_size), cfg.init_seed.wrapping_add(1))?)
        } else {
            None
        };
        let (b1, b2, eps) = (cfg.adam_beta1 as f32, cfg.adam_beta2 as f32, cfg.adam_eps as f32);
        let seg_adam = Adam::new(segmentor.params(), b1, b2, eps);
        let disc_adam = discriminator.as_ref().map(|d| Adam::new(d.params(), b1, b2, eps));
        Ok(Self {
            epoch: 0,
            step: 0,
            segmentor,
            discriminator,
            seg_adam,
            disc_adam,
            best_val_metric: f64::NEG_INFINITY,
            best_epoch: None,
            epochs_since_improvement: 0,
            data_rng: ChaCha8Rng::seed_from_u64(cfg.data_seed.wrapping_add(0x5EED)),
            noise_rng: ChaCha8Rng::seed_from_u64(cfg.noise_seed),
            init_seed: cfg.init_seed,
        })
    }
}

fn stack_images<'a>(images: impl Iterator<Item = &'a Array3<f32>>) -> Tensor {
    let parts: Vec<Tensor> = images
        .map(|img| {
            let (c, h, w) = img.dim();
            Tensor::new(&[c, h, w], img.iter().copied().collect())
        })
        .collect();
    Tensor::stack(&parts)
}

fn sample_view(t: &Tensor, b: usize) -> Array3<f64> {
    let (_, c, h, w) = t.dims4();
    let len = c * h * w;
    Array3::from_shape_vec((c, h, w), t.data()[b * len..(b + 1) * len].iter().map(|&v| v as f64).collect()).expect("sample shape")
}

fn with_noise(g: &mut Graph, v: Var, sigma: f64, rng: &mut ChaCha8Rng) -> Var {
    if sigma == 0.0 {
        return v;
    }
    let noise = apply_instance_noise(&Tensor::zeros(g.shape(v)), sigma, rng);
    let n = g.constant(noise);
    g.add(v, n)
}

fn score_loss(g: &mut Graph, scores: Var, value: f64, grad: &[f64]) -> Var {
    let shape = g.shape(scores).to_vec();
    g.loss(scores, value, Tensor::new(&shape, grad.iter().map(|&v| v as f32).collect()))
}

/// Fake pyramid handles from the segmentor's per-depth soft segmentations.
fn fake_levels(g: &mut Graph, levels: &[Var], detach: bool, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Var> {
    levels
        .iter()
        .enumerate()
        .map(|(d, &v)| {
            let v = if detach { g.detach(v) } else { v };
            if d == 0 { with_noise(g, v, sigma, rng) } else { v }
        })
        .collect()
}

/// Losses of one weak step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakStepRecord {
    pub sup_loss: f64,
    /// Generator loss against the current discriminator; absent without one.
    pub adv_loss: Option<f64>,
    pub a0: f64,
    pub total: f64,
}

/// One Adam update of Σ on `a0·L_sup + a1·V_gen` (pure supervised loss without a discriminator).
pub fn train_step_weak(state: &mut TrainState, batch: &[WeakSample], cfg: &ExperimentConfig, lr: f64) -> Result<WeakStepRecord> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut g = Graph::new();
    let seg_bound = state.segmentor.params().bind(&mut g);
    let x = g.constant(stack_images(batch.iter().map(|s| &s.image)));
    let (vars, stats) = state.segmentor.forward(&mut g, &seg_bound, x, Mode::Train)?;

    let probs = g.value(vars.probs).clone();
    let (_, c, h, w) = probs.dims4();
    let mut grad = vec![0.0f32; probs.len()];
    let mut sup = 0.0;
    let n = batch.len() as f64;
    for (b, sample) in batch.iter().enumerate() {
        let pred = sample_view(&probs, b);
        let term = match supervised_loss(pred.view(), &sample.scribbles, None, cfg.supervised_loss, cfg.epsilon) {
            Ok(t) => t,
            Err(Error::EmptyScribble) => continue,
            Err(e) => return Err(e),
        };
        sup += term.value / n;
        let off = b * c * h * w;
        for (dst, &src) in grad[off..off + c * h * w].iter_mut().zip(term.grad.iter()) {
            *dst = (src / n) as f32;
        }
    }
    let sup_node = g.loss(vars.probs, sup, Tensor::new(probs.shape(), grad));

    let record = match (&state.discriminator, cfg.flags.use_discriminator) {
        (Some(disc), true) => {
            let disc_bound = disc.params().bind_frozen(&mut g);
            let soft: Vec<Var> = vars.levels.iter().map(|l| l.soft_seg).collect();
            let fake = fake_levels(&mut g, &soft, false, cfg.instance_noise_sigma, &mut state.noise_rng);
            let scores = disc.forward(&mut g, &disc_bound, &fake)?;
            let s: Vec<f64> = g.value(scores).data().iter().map(|&v| v as f64).collect();
            let (adv, adv_grad) = lsgan_gen_loss(&s)?;
            let adv_node = score_loss(&mut g, scores, adv, adv_grad.as_slice().expect("contiguous"));
            let a0 = dynamic_a0(sup, adv);
            let root = g.weighted_sum(&[(sup_node, a0 as f32), (adv_node, cfg.a1 as f32)]);
            let mut grads = g.backward(root);
            let seg_grads = state.segmentor.params().collect_grads(&mut grads, &seg_bound);
            state.seg_adam.update(state.segmentor.params_mut(), &seg_grads, lr as f32);
            WeakStepRecord { sup_loss: sup, adv_loss: Some(adv), a0, total: a0 * sup + cfg.a1 * adv }
        }
        _ => {
            let mut grads = g.backward(sup_node);
            let seg_grads = state.segmentor.params().collect_grads(&mut grads, &seg_bound);
            state.seg_adam.update(state.segmentor.params_mut(), &seg_grads, lr as f32);
            WeakStepRecord { sup_loss: sup, adv_loss: None, a0: 1.0, total: sup }
        }
    };
    state.segmentor.update_running_stats(stats);
    state.step += 1;
    Ok(record)
}

/// Losses and scores of one unlabeled step.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledStepRecord {
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub real_scores: Vec<f32>,
    pub fake_scores: Vec<f32>,
}

/// Δ update on real vs detached fake masks, then Σ update against the updated Δ.
/// Returns `None` (and does nothing) when the discriminator is disabled.
pub fn train_step_unlabeled(
    state: &mut TrainState,
    images: &[UnlabeledSample],
    masks: &[&MaskPyramid],
    cfg: &ExperimentConfig,
    lr: f64,
) -> Result<Option<UnlabeledStepRecord>> {
    if !cfg.flags.use_discriminator {
        return Ok(None);
    }
    let Some(disc) = state.discriminator.as_mut() else {
        return Ok(None);
    };
    if masks.is_empty() {
        return Err(Error::NoUnpairedMasks);
    }
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sigma = cfg.instance_noise_sigma;
    let mut g = Graph::new();
    let seg_bound = state.segmentor.params().bind(&mut g);
    let x = g.constant(stack_images(images.iter().map(|s| &s.image)));
    let (vars, stats) = state.segmentor.forward(&mut g, &seg_bound, x, Mode::Train)?;
    let soft: Vec<Var> = vars.levels.iter().map(|l| l.soft_seg).collect();

    // discriminator phase
    disc.power_iterate();
    let disc_bound = disc.params().bind(&mut g);
    let mut real_levels = MaskPyramid::stack(&masks.iter().map(|&m| m.clone()).collect::<Vec<_>>());
    real_levels[0] = apply_instance_noise(&real_levels[0], sigma, &mut state.noise_rng);
    let real: Vec<Var> = real_levels.into_iter().map(|t| g.constant(t)).collect();
    let fake = fake_levels(&mut g, &soft, true, sigma, &mut state.noise_rng);
    let real_scores = disc.forward(&mut g, &disc_bound, &real)?;
    let fake_scores = disc.forward(&mut g, &disc_bound, &fake)?;
    let rs: Vec<f64> = g.value(real_scores).data().iter().map(|&v| v as f64).collect();
    let fs: Vec<f64> = g.value(fake_scores).data().iter().map(|&v| v as f64).collect();
    let p = cfg.label_flip_prob;
    let flip_real: Vec<bool> = rs.iter().map(|_| !apply_label_noise(true, p, &mut state.noise_rng)).collect();
    let flip_fake: Vec<bool> = fs.iter().map(|_| apply_label_noise(false, p, &mut state.noise_rng)).collect();
    let dl = lsgan_disc_loss_flipped(&rs, &fs, &flip_real, &flip_fake)?;
    let real_node = score_loss(&mut g, real_scores, dl.value, dl.grad_real.as_slice().expect("contiguous"));
    let fake_node = score_loss(&mut g, fake_scores, 0.0, dl.grad_fake.as_slice().expect("contiguous"));
    let disc_root = g.weighted_sum(&[(real_node, cfg.a2 as f32), (fake_node, cfg.a2 as f32)]);
    let mut grads = g.backward(disc_root);
    let disc_grads = disc.params().collect_grads(&mut grads, &disc_bound);
    let disc_adam = state.disc_adam.as_mut().expect("discriminator optimizer");
    disc_adam.update(disc.params_mut(), &disc_grads, lr as f32);

    // generator phase against the updated discriminator
    let disc_bound = disc.params().bind_frozen(&mut g);
    let fake = fake_levels(&mut g, &soft, false, sigma, &mut state.noise_rng);
    let scores = disc.forward(&mut g, &disc_bound, &fake)?;
    let gs: Vec<f64> = g.value(scores).data().iter().map(|&v| v as f64).collect();
    let (gen, gen_grad) = lsgan_gen_loss(&gs)?;
    let gen_node = score_loss(&mut g, scores, gen, gen_grad.as_slice().expect("contiguous"));
    let gen_root = g.weighted_sum(&[(gen_node, cfg.a3 as f32)]);
    let mut grads = g.backward(gen_root);
    let seg_grads = state.segmentor.params().collect_grads(&mut grads, &seg_bound);
    state.seg_adam.update(state.segmentor.params_mut(), &seg_grads, lr as f32);

    state.segmentor.update_running_stats(stats);
    state.step += 1;
    Ok(Some(UnlabeledStepRecord {
        disc_loss: dl.value,
        gen_loss: gen,
        real_scores: rs.iter().map(|&v| v as f32).collect(),
        fake_scores: gs.iter().map(|&v| v as f32).collect(),
    }))
}

/// Mean multi-class Dice of hardened predictions over the validation set.
pub fn validation_dice(segmentor: &Segmentor, samples: &[ValidationSample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset("empty validation set".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let pred = segmentor.predict(&stack_images(chunk.iter().map(|s| &s.image)))?;
        for (b, s) in chunk.iter().enumerate() {
            let probs = sample_view(&pred.probs, b).mapv(|v| v as f32);
            total += dice_multiclass(&harden(probs.view()), &s.mask)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Per-pixel class probabilities for a batch of `C × H × W` images.
pub fn predict_probs(segmentor: &Segmentor, images: &[Array3<f32>]) -> Result<Vec<Array3<f32>>> {
    let mut g = Graph::new();
    let bound = segmentor.params().bind_frozen(&mut g);
    let x = g.constant(stack_images(images.iter()));
    let (vars, _) = segmentor.forward(&mut g, &bound, x, Mode::Eval)?;
    let pred = collect_prediction(&g, &vars);
    Ok((0..images.len()).map(|b| sample_view(&pred.probs, b).mapv(|v| v as f32)).collect())
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub sup_loss: f64,
    pub adv_loss_g: f64,
    pub adv_loss_d: f64,
    pub val_dice: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,sup_loss,adv_loss_g,adv_loss_d,val_dice";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:.10}",
            self.epoch, self.lr, self.sup_loss, self.adv_loss_g, self.adv_loss_d, self.val_dice
        )
    }
}

/// Optional side effects of a training run.
#[derive(Default)]
pub struct RunHooks<'a> {
    /// Receives `metrics.csv`, `best.ckpt` and `last.ckpt`.
    pub run_dir: Option<&'a Path>,
    /// Checked between steps; when set, the run checkpoints and stops.
    pub interrupt: Option<&'a AtomicBool>,
    /// Called after every epoch.
    pub on_epoch: Option<&'a dyn Fn(&EpochRecord)>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub weak_steps: Vec<WeakStepRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_dice: f64,
    pub best_segmentor: Segmentor,
    pub final_state: TrainState,
    /// Ids of every image that entered a Σ update.
    pub sigma_image_ids: BTreeSet<String>,
    pub stopped_early: bool,
    pub interrupted: bool,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
}

/// Trains from scratch until early stopping, `max_epochs`, or an interrupt.
pub fn run_training(cfg: &ExperimentConfig, data: &TrainingData, hooks: &RunHooks<'_>) -> Result<TrainReport> {
    let state = TrainState::new(cfg, data.image_size()?)?;
    resume_training(cfg, data, state, hooks)
}

pub fn resume_training(cfg: &ExperimentConfig, data: &TrainingData, mut state: TrainState, hooks: &RunHooks<'_>) -> Result<TrainReport> {
    if data.weak.is_empty() {
        return Err(Error::Dataset("no weakly annotated images".into()));
    }
    let use_disc = cfg.flags.use_discriminator;
    if use_disc && data.masks.is_empty() {
        return Err(Error::NoUnpairedMasks);
    }
    let schedule = LrSchedule { lr_min: cfg.lr_min, lr_max: cfg.lr_max, period: cfg.lr_period };
    let mut metrics = match hooks.run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let mut report = TrainReport {
        history: Vec::new(),
        weak_steps: Vec::new(),
        best_epoch: state.best_epoch,
        best_val_dice: state.best_val_metric,
        best_segmentor: state.segmentor.clone(),
        final_state: state.clone(),
        sigma_image_ids: BTreeSet::new(),
        stopped_early: false,
        interrupted: false,
    };
    let bs = cfg.batch_size;
    let mut mask_order: Vec<usize> = (0..data.masks.len()).collect();
    let mut mask_cursor = mask_order.len();

    'epochs: while state.epoch < cfg.max_epochs {
        let lr = schedule.at(state.epoch as f64);
        let mut weak_order: Vec<usize> = (0..data.weak.len()).collect();
        weak_order.shuffle(&mut state.data_rng);
        let weak_batches: Vec<&[usize]> = weak_order.chunks(bs).collect();
        let mut unl_order: Vec<usize> = (0..data.unlabeled.len()).collect();
        let unl_batches: Vec<&[usize]> = if use_disc {
            unl_order.shuffle(&mut state.data_rng);
            unl_order.chunks(bs).collect()
        } else {
            Vec::new()
        };
        let steps = weak_batches.len().max(unl_batches.len());
        let (mut sup, mut adv_g, mut adv_d) = (Vec::new(), Vec::new(), Vec::new());
        for s in 0..steps {
            if hooks.interrupt.is_some_and(|f| f.load(Ordering::SeqCst)) {
                report.interrupted = true;
                break 'epochs;
            }
            let batch: Vec<WeakSample> = weak_batches[s % weak_batches.len()]
                .iter()
                .map(|&i| augment_weak(&data.weak[i], cfg, &mut state.data_rng))
                .collect();
            report.sigma_image_ids.extend(batch.iter().map(|b| b.id.clone()));
            let rec = train_step_weak(&mut state, &batch, cfg, lr)?;
            sup.push(rec.sup_loss);
            report.weak_steps.push(rec);

            if use_disc {
                let images: Vec<UnlabeledSample> = unl_batches[s % unl_batches.len()]
                    .iter()
                    .map(|&i| augment_unlabeled(&data.unlabeled[i], cfg, &mut state.data_rng))
                    .collect();
                let mut masks = Vec::with_capacity(images.len());
                for _ in 0..images.len() {
                    if mask_cursor == mask_order.len() {
                        mask_order.shuffle(&mut state.data_rng);
                        mask_cursor = 0;
                    }
                    masks.push(&data.masks[mask_order[mask_cursor]].pyramid);
                    mask_cursor += 1;
                }
                report.sigma_image_ids.extend(images.iter().map(|b| b.id.clone()));
                if let Some(u) = train_step_unlabeled(&mut state, &images, &masks, cfg, lr)? {
                    adv_g.push(u.gen_loss);
                    adv_d.push(u.disc_loss);
                }
            }
        }
        let val_dice = validation_dice(&state.segmentor, &data.validation, bs)?;
        let record = EpochRecord { epoch: state.epoch, lr, sup_loss: mean(&sup), adv_loss_g: mean(&adv_g), adv_loss_d: mean(&adv_d), val_dice };
        if let Some((path, f)) = metrics.as_mut() {
            writeln!(f, "{}", record.csv_line()).map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(cb) = hooks.on_epoch {
            cb(&record);
        }
        report.history.push(record);
        state.epoch += 1;
        if val_dice > state.best_val_metric {
            state.best_val_metric = val_dice;
            state.best_epoch = Some(record.epoch);
            state.epochs_since_improvement = 0;
            report.best_segmentor = state.segmentor.clone();
            if let Some(dir) = hooks.run_dir {
                checkpoint::save_state(&dir.join("best.ckpt"), cfg, &state)?;
            }
        } else {
            state.epochs_since_improvement += 1;
        }
        if state.epochs_since_improvement > cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(dir) = hooks.run_dir {
        checkpoint::save_state(&dir.join("last.ckpt"), cfg, &state)?;
    }
    report.best_epoch = state.best_epoch;
    report.best_val_dice = state.best_val_metric;
    report.final_state = state;
    Ok(report)
}

fn augment_weak(sample: &WeakSample, cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> WeakSample {
    if !cfg.augment {
        return sample.clone();
    }
    let (image, scribbles) = augment_roto_translate(sample.image.view(), &sample.scribbles, rng, cfg.rotation_deg, cfg.translation_frac);
    WeakSample { id: sample.id.clone(), image, scribbles, full_mask: sample.full_mask }
}

fn augment_unlabeled(sample: &UnlabeledSample, cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> UnlabeledSample {
    if !cfg.augment {
        return sample.clone();
    }
    let (image, _) = augment_roto_translate(sample.image.view(), &[], rng, cfg.rotation_deg, cfg.translation_frac);
    UnlabeledSample { id: sample.id.clone(), image }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use super::*;

    #[test]
    fn schedule_examples() {
        assert_abs_diff_eq!(cyclical_lr(0.0), 1e-4, epsilon = 1e-12);
        assert_abs_diff_eq!(cyclical_lr(10.0), 1e-5, epsilon = 1e-12);
        assert_abs_diff_eq!(cyclical_lr(5.0), 5.5e-5, epsilon = 1e-12);
        assert_abs_diff_eq!(cyclical_lr(20.0), 1e-4, epsilon = 1e-12);
    }

    #[test]
    fn identity_transform() {
        let img = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f32);
        let s = ScribbleMap::new(array![[0, 1, 255, 2], [0, 0, 0, 0], [1, 1, 1, 1], [2, 2, 255, 255]], 3).unwrap();
        let t = RotoTranslation { angle_deg: 0.0, shift: (0.0, 0.0) };
        let (out, labels) = apply_roto_translation(img.view(), std::slice::from_ref(&s), &t);
        assert_eq!(out, img);
        assert_eq!(labels[0], s);
    }

    #[test]
    fn quarter_turn_on_two_by_two() {
        let img = array![[[1.0f32, 2.0], [3.0, 4.0]]];
        let s = ScribbleMap::new(array![[0, 1], [2, 255]], 3).unwrap();
        let t = RotoTranslation { angle_deg: 90.0, shift: (0.0, 0.0) };
        let (out, labels) = apply_roto_translation(img.view(), &[s], &t);
        // output (y, x) reads source (c - (x - c), c + (y - c)) with c = 0.5
        let expected = array![[[3.0f32, 1.0], [4.0, 2.0]]];
        for (a, b) in out.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
        }
        assert_eq!(labels[0].labels(), array![[2u8, 0], [255, 1]]);
    }

    #[test]
    fn shifted_labels_fill_unlabeled() {
        let s = ScribbleMap::new(Array2::from_elem((4, 4), 1u8), 3).unwrap();
        let img = Array3::zeros((1, 4, 4));
        let t = RotoTranslation { angle_deg: 0.0, shift: (2.0, 0.0) };
        let (_, labels) = apply_roto_translation(img.view(), &[s], &t);
        let l = labels[0].labels();
        assert!(l.row(0).iter().chain(l.row(1)).all(|&v| v == UNLABELED));
        assert!(l.row(2).iter().chain(l.row(3)).all(|&v| v == 1));
    }
}
