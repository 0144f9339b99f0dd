//! Loss functions with closed-form gradients.
//!
//! Everything here works in `f64` on plain arrays and returns both the value
//! and the gradient with respect to its prediction inputs. The training loop
//! splices these into the autograd tape as opaque loss nodes.

use ndarray::{Array1, Array3, ArrayView3, Axis};

use crate::datapipe::LabelMask;
use crate::error::{Error, Result};
use crate::scribblegen::{ScribbleMap, UNLABELED};

/// Default stabilizer inside the logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Below this magnitude the supervised loss is treated as zero when balancing.
pub const BALANCE_FLOOR: f64 = 1e-12;

/// Per-class scaling factors `1 - n_i / n_tot` over annotated pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0; num_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// The adversarial and loss-balancing coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { a0: 1.0, a1: 0.1, a2: 0.2, a3: 0.2 }
    }
}

/// A scalar loss together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array3<f64>,
}

pub fn class_weights(scribble: &ScribbleMap) -> Result<ClassWeights> {
    let mut counts = vec![0usize; scribble.num_classes()];
    for &v in scribble.labels() {
        if v != UNLABELED {
            counts[v as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyScribble);
    }
    Ok(ClassWeights(counts.iter().map(|&n| 1.0 - n as f64 / total as f64).collect()))
}

fn check_shapes(pred: &ArrayView3<'_, f64>, scribble: &ScribbleMap, weights: &ClassWeights) -> Result<()> {
    let (c, h, w) = pred.dim();
    if (h, w) != scribble.dims() || c != scribble.num_classes() || weights.0.len() != c {
        return Err(Error::shape(format!(
            "prediction {c}x{h}x{w}, scribble {:?} with {} classes, {} weights",
            scribble.dims(),
            scribble.num_classes(),
            weights.0.len()
        )));
    }
    Ok(())
}

/// Weighted partial cross-entropy, averaged over annotated pixels.
///
/// Unlabeled pixels contribute nothing to the value and receive an exactly
/// zero gradient.
pub fn wpce_loss_eps(pred: ArrayView3<'_, f64>, scribble: &ScribbleMap, weights: &ClassWeights, eps: f64) -> Result<LossGrad> {
    check_shapes(&pred, scribble, weights)?;
    let annotated = scribble.annotated_count();
    if annotated == 0 {
        return Err(Error::EmptyScribble);
    }
    let scale = 1.0 / annotated as f64;
    let mut grad = Array3::zeros(pred.dim());
    let mut value = 0.0;
    for ((y, x), &label) in scribble.labels().indexed_iter() {
        if label == UNLABELED {
            continue;
        }
        let k = label as usize;
        let p = pred[(k, y, x)] + eps;
        value -= weights.0[k] * p.ln();
        grad[(k, y, x)] = -weights.0[k] / p * scale;
    }
    Ok(LossGrad { value: value * scale, grad })
}

pub fn wpce_loss(pred: ArrayView3<'_, f64>, scribble: &ScribbleMap, weights: &ClassWeights) -> Result<LossGrad> {
    wpce_loss_eps(pred, scribble, weights, LOG_EPS)
}

/// Like [`wpce_loss`], but an empty scribble yields zero loss and zero gradient.
pub fn wpce_loss_relaxed(pred: ArrayView3<'_, f64>, scribble: &ScribbleMap, weights: &ClassWeights) -> Result<LossGrad> {
    match wpce_loss(pred.view(), scribble, weights) {
        Err(Error::EmptyScribble) => {
            check_shapes(&pred, scribble, weights)?;
            Ok(LossGrad { value: 0.0, grad: Array3::zeros(pred.dim()) })
        }
        other => other,
    }
}

/// Partial cross-entropy: [`wpce_loss`] with all class weights equal to one.
pub fn pce_loss(pred: ArrayView3<'_, f64>, scribble: &ScribbleMap) -> Result<LossGrad> {
    wpce_loss(pred, scribble, &ClassWeights::uniform(scribble.num_classes()))
}

/// Sum (not mean) of per-annotator WPCE terms, each with its own class
/// weights. Empty scribbles are skipped.
pub fn multi_annotator_loss(pred: ArrayView3<'_, f64>, scribbles: &[ScribbleMap]) -> Result<LossGrad> {
    let mut total: Option<LossGrad> = None;
    for s in scribbles.iter().filter(|s| !s.is_empty()) {
        let term = wpce_loss(pred.view(), s, &class_weights(s)?)?;
        total = Some(match total {
            None => term,
            Some(mut acc) => {
                acc.value += term.value;
                acc.grad += &term.grad;
                acc
            }
        });
    }
    total.ok_or(Error::EmptyScribble)
}

/// Weighted cross-entropy against a dense mask (every pixel annotated).
pub fn full_mask_wce(pred: ArrayView3<'_, f64>, mask: &LabelMask) -> Result<LossGrad> {
    let (c, h, w) = pred.dim();
    if (h, w) != mask.dims() || c != mask.num_classes() {
        return Err(Error::shape(format!("prediction {c}x{h}x{w} vs mask {:?}", mask.dims())));
    }
    let scribble = ScribbleMap::from_mask(mask);
    let weights = class_weights(&scribble)?;
    wpce_loss(pred, &scribble, &weights)
}

/// Least-squares discriminator objective and its score gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscLoss {
    pub value: f64,
    pub grad_real: Array1<f64>,
    pub grad_fake: Array1<f64>,
}

/// `½·mean((real − 1)²) + ½·mean((fake + 1)²)`.
pub fn lsgan_disc_loss(real: &[f64], fake: &[f64]) -> Result<DiscLoss> {
    lsgan_disc_loss_flipped(real, fake, &vec![false; real.len()], &vec![false; fake.len()])
}

/// [`lsgan_disc_loss`] where flagged samples have their `+1`/`−1` targets swapped.
pub fn lsgan_disc_loss_flipped(real: &[f64], fake: &[f64], flip_real: &[bool], flip_fake: &[bool]) -> Result<DiscLoss> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    assert_eq!(real.len(), flip_real.len());
    assert_eq!(fake.len(), flip_fake.len());
    let term = |scores: &[f64], flips: &[bool], target: f64| {
        let n = scores.len() as f64;
        let mut value = 0.0;
        let grad: Array1<f64> = scores
            .iter()
            .zip(flips)
            .map(|(&s, &f)| {
                let t = if f { -target } else { target };
                value += 0.5 * (s - t) * (s - t);
                (s - t) / n
            })
            .collect();
        (value / n, grad)
    };
    let (vr, grad_real) = term(real, flip_real, 1.0);
    let (vf, grad_fake) = term(fake, flip_fake, -1.0);
    Ok(DiscLoss { value: vr + vf, grad_real, grad_fake })
}

/// `½·mean((fake − 1)²)` and its gradient.
pub fn lsgan_gen_loss(fake: &[f64]) -> Result<(f64, Array1<f64>)> {
    if fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = fake.len() as f64;
    let value = fake.iter().map(|&s| 0.5 * (s - 1.0) * (s - 1.0)).sum::<f64>() / n;
    let grad = fake.iter().map(|&s| (s - 1.0) / n).collect();
    Ok((value, grad))
}

/// Ratio that scales the supervised term to the adversarial term's magnitude.
pub fn dynamic_a0(sup_loss: f64, adv_loss: f64) -> f64 {
    if sup_loss.abs() < BALANCE_FLOOR {
        1.0
    } else {
        adv_loss.abs() / sup_loss.abs()
    }
}

/// The weak-batch objective `a0·L_sup + a1·V_gen`, evaluated on scalar parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakObjective {
    pub a0: f64,
    pub sup: f64,
    pub adv: f64,
    pub total: f64,
}

pub fn combined_weak_loss(sup_loss: f64, adv_loss: f64, a1: f64) -> WeakObjective {
    let a0 = dynamic_a0(sup_loss, adv_loss);
    WeakObjective { a0, sup: sup_loss, adv: adv_loss, total: a0 * sup_loss + a1 * adv_loss }
}

/// Supervised-loss flavour used for weak batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupervisedKind {
    Wpce,
    Pce,
}

impl std::str::FromStr for SupervisedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wpce" => Ok(Self::Wpce),
            "pce" => Ok(Self::Pce),
            other => Err(Error::Config(format!("unknown supervised loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for SupervisedKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Wpce => "wpce",
            Self::Pce => "pce",
        })
    }
}

/// Supervised loss for one sample: full-mask WCE when a dense mask is
/// given, otherwise the (summed) per-annotator partial cross-entropy.
pub fn supervised_loss(
    pred: ArrayView3<'_, f64>,
    scribbles: &[ScribbleMap],
    mask: Option<&LabelMask>,
    kind: SupervisedKind,
    eps: f64,
) -> Result<LossGrad> {
    if let Some(mask) = mask {
        let full = ScribbleMap::from_mask(mask);
        let w = match kind {
            SupervisedKind::Wpce => class_weights(&full)?,
            SupervisedKind::Pce => ClassWeights::uniform(full.num_classes()),
        };
        return wpce_loss_eps(pred, &full, &w, eps);
    }
    let mut total: Option<LossGrad> = None;
    for s in scribbles.iter().filter(|s| !s.is_empty()) {
        let w = match kind {
            SupervisedKind::Wpce => class_weights(s)?,
            SupervisedKind::Pce => ClassWeights::uniform(s.num_classes()),
        };
        let term = wpce_loss_eps(pred.view(), s, &w, eps)?;
        total = Some(match total {
            None => term,
            Some(mut acc) => {
                acc.value += term.value;
                acc.grad += &term.grad;
                acc
            }
        });
    }
    total.ok_or(Error::EmptyScribble)
}

/// Softmax over axis 0 of a `c × H × W` logit array.
pub fn softmax_channels(logits: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut out = logits.to_owned();
    for mut col in out.lanes_mut(Axis(0)) {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|v| (v - max).exp());
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    out
}
