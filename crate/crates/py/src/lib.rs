//! Python bindings. Arrays cross the boundary as nested lists: images are
//! `[h][w]` floats, masks and scribbles `[h][w]` class indices (255 marks an
//! unlabeled scribble pixel) and probabilities `[c][h][w]`.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use scribblegate::checkpoint::{self, Checkpoint};
use scribblegate::cli;
use scribblegate::config::ExperimentConfig;
use scribblegate::datapipe::{split_dataset as split_ids, LabelMask, SplitGroup};
use scribblegate::discriminator::{mask_pyramid, Discriminator, MaskPyramid};
use scribblegate::evaluation;
use scribblegate::objectives::{self, ClassWeights};
use scribblegate::scribblegen::{self, ScribbleMap, ScribbleMethod};
use scribblegate::segmentor::Segmentor;
use scribblegate::{synthdata, trainer, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Csv(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn grid<T: Copy>(rows: &[Vec<T>]) -> PyResult<Array2<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular 2-D list"));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| rows[y][x]))
}

fn cube(planes: &[Vec<Vec<f64>>]) -> PyResult<Array3<f64>> {
    let layers: Vec<Array2<f64>> = planes.iter().map(|p| grid(p)).collect::<PyResult<_>>()?;
    let (h, w) = layers.first().ok_or_else(|| PyValueError::new_err("expected at least one channel"))?.dim();
    if layers.iter().any(|l| l.dim() != (h, w)) {
        return Err(PyValueError::new_err("channels differ in size"));
    }
    Ok(Array3::from_shape_fn((layers.len(), h, w), |(k, y, x)| layers[k][(y, x)]))
}

fn rows<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn planes<T: Copy>(a: &Array3<T>) -> Vec<Vec<Vec<T>>> {
    a.outer_iter().map(|p| p.outer_iter().map(|r| r.to_vec()).collect()).collect()
}

fn label_mask(mask: &[Vec<u8>], num_classes: usize) -> PyResult<LabelMask> {
    LabelMask::from_indices(grid(mask)?.view(), num_classes).map_err(py_err)
}

fn scribble(labels: &[Vec<u8>], num_classes: usize) -> PyResult<ScribbleMap> {
    ScribbleMap::new(grid(labels)?, num_classes).map_err(py_err)
}

/// Flat `key = value` experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overridden by config text.
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => ExperimentConfig::parse_str(t).map_err(py_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::load(&path).map_err(py_err)? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    /// Value of `key` as it appears in the resolved text.
    fn get(&self, key: &str) -> PyResult<String> {
        let text = self.inner.to_text();
        text.lines()
            .filter_map(|l| l.split_once(" = "))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.to_string())
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(run_name={:?}, image_size={}, num_classes={})", self.inner.run_name, self.inner.image_size, self.inner.num_classes)
    }
}

/// UNet with attention gates at every decoder depth.
#[pyclass(name = "Segmentor")]
struct PySegmentor {
    inner: Segmentor,
}

#[pymethods]
impl PySegmentor {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: Segmentor::new(config.inner.segmentor_config(), seed).map_err(py_err)? })
    }

    /// Segmentor stored in a training checkpoint.
    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::read(&path).map_err(py_err)?;
        Ok(Self { inner: checkpoint::load_segmentor(&ckpt).map_err(py_err)? })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().num_classes
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().values().iter().map(|t| t.len()).sum()
    }

    /// Class probabilities `[c][h][w]` of a single-channel image.
    fn predict(&self, image: Vec<Vec<f32>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let img = grid(&image)?.insert_axis(ndarray::Axis(0));
        let probs = trainer::predict_probs(&self.inner, std::slice::from_ref(&img)).map_err(py_err)?;
        Ok(planes(&probs[0]))
    }

    /// Arg-max class indices `[h][w]`.
    fn segment(&self, image: Vec<Vec<f32>>) -> PyResult<Vec<Vec<u8>>> {
        let img = grid(&image)?.insert_axis(ndarray::Axis(0));
        let probs = trainer::predict_probs(&self.inner, std::slice::from_ref(&img)).map_err(py_err)?;
        Ok(rows(&evaluation::harden(probs[0].view()).indices()))
    }
}

/// Multi-scale mask discriminator.
#[pyclass(name = "Discriminator")]
struct PyDiscriminator {
    inner: Discriminator,
}

#[pymethods]
impl PyDiscriminator {
    #[new]
    #[pyo3(signature = (config, size, seed=0))]
    fn new(config: &PyConfig, size: (usize, usize), seed: u64) -> PyResult<Self> {
        Ok(Self { inner: Discriminator::new(config.inner.discriminator_config(size), seed).map_err(py_err)? })
    }

    /// Realism score of one mask.
    fn score(&self, mask: Vec<Vec<u8>>) -> PyResult<f32> {
        let cfg = self.inner.config();
        let m = label_mask(&mask, cfg.num_classes)?;
        let pyramid = mask_pyramid(&m, cfg.depths).map_err(py_err)?;
        let scores = self.inner.score(&MaskPyramid::stack(&[pyramid])).map_err(py_err)?;
        Ok(scores[0])
    }

    fn sigma_estimates(&self) -> Vec<f64> {
        self.inner.sigma_estimates()
    }
}

#[pyfunction]
fn cyclical_lr(epoch: f64) -> f64 {
    trainer::cyclical_lr(epoch)
}

/// Skeleton pixels `(y, x)` of a binary mask.
#[pyfunction]
fn skeletonize(mask: Vec<Vec<bool>>) -> PyResult<Vec<(usize, usize)>> {
    Ok(scribblegen::skeletonize(grid(&mask)?.view()))
}

#[pyfunction]
#[pyo3(signature = (mask, n_iter=2500, seed=0))]
fn random_walk_scribble(mask: Vec<Vec<bool>>, n_iter: usize, seed: u64) -> PyResult<Vec<(usize, usize)>> {
    scribblegen::random_walk_scribble(grid(&mask)?.view(), n_iter, seed).map_err(py_err)
}

/// Scribble labels for a class-index mask; `method` is "skeleton" or "walk".
#[pyfunction]
#[pyo3(signature = (mask, num_classes, method="skeleton", iters=2500, seed=0))]
fn synthesize_scribble(mask: Vec<Vec<u8>>, num_classes: usize, method: &str, iters: usize, seed: u64) -> PyResult<Vec<Vec<u8>>> {
    let m = label_mask(&mask, num_classes)?;
    let method = match method {
        "skeleton" => ScribbleMethod::Skeleton,
        "walk" => ScribbleMethod::Walk { iters },
        other => return Err(PyValueError::new_err(format!("unknown scribble method `{other}`"))),
    };
    Ok(rows(&scribblegen::synthesize_scribble(&m, method, iters, seed).into_labels()))
}

#[pyfunction]
fn class_weights(labels: Vec<Vec<u8>>, num_classes: usize) -> PyResult<Vec<f64>> {
    Ok(objectives::class_weights(&scribble(&labels, num_classes)?).map_err(py_err)?.0)
}

/// Weighted partial cross-entropy of `pred` `[c][h][w]`: `(value, grad)`.
#[pyfunction]
#[pyo3(signature = (pred, labels, weights=None))]
fn wpce_loss(pred: Vec<Vec<Vec<f64>>>, labels: Vec<Vec<u8>>, weights: Option<Vec<f64>>) -> PyResult<(f64, Vec<Vec<Vec<f64>>>)> {
    let p = cube(&pred)?;
    let s = scribble(&labels, p.dim().0)?;
    let w = match weights {
        Some(w) => ClassWeights(w),
        None => objectives::class_weights(&s).map_err(py_err)?,
    };
    let out = objectives::wpce_loss(p.view(), &s, &w).map_err(py_err)?;
    Ok((out.value, planes(&out.grad)))
}

#[pyfunction]
fn pce_loss(pred: Vec<Vec<Vec<f64>>>, labels: Vec<Vec<u8>>) -> PyResult<(f64, Vec<Vec<Vec<f64>>>)> {
    let p = cube(&pred)?;
    let s = scribble(&labels, p.dim().0)?;
    let out = objectives::pce_loss(p.view(), &s).map_err(py_err)?;
    Ok((out.value, planes(&out.grad)))
}

/// `(value, grad_real, grad_fake)`.
#[pyfunction]
fn lsgan_disc_loss(real: Vec<f64>, fake: Vec<f64>) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    let l = objectives::lsgan_disc_loss(&real, &fake).map_err(py_err)?;
    Ok((l.value, l.grad_real.to_vec(), l.grad_fake.to_vec()))
}

#[pyfunction]
fn lsgan_gen_loss(fake: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    let (v, g) = objectives::lsgan_gen_loss(&fake).map_err(py_err)?;
    Ok((v, g.to_vec()))
}

#[pyfunction]
fn dynamic_a0(sup_loss: f64, adv_loss: f64) -> f64 {
    objectives::dynamic_a0(sup_loss, adv_loss)
}

#[pyfunction]
fn dice_multiclass(pred: Vec<Vec<u8>>, truth: Vec<Vec<u8>>, num_classes: usize) -> PyResult<f64> {
    evaluation::dice_multiclass(&label_mask(&pred, num_classes)?, &label_mask(&truth, num_classes)?).map_err(py_err)
}

/// Per foreground class `(dice, both_empty)`.
#[pyfunction]
fn dice_per_class(pred: Vec<Vec<u8>>, truth: Vec<Vec<u8>>, num_classes: usize) -> PyResult<Vec<(f64, bool)>> {
    let d = evaluation::dice_per_class(&label_mask(&pred, num_classes)?, &label_mask(&truth, num_classes)?).map_err(py_err)?;
    Ok(d.into_iter().map(|c| (c.value, c.empty)).collect())
}

/// Symmetric Hausdorff distance in pixels; `None` when either set is empty.
#[pyfunction]
fn hausdorff(pred: Vec<Vec<bool>>, truth: Vec<Vec<bool>>) -> PyResult<Option<f64>> {
    let (p, t) = (grid(&pred)?, grid(&truth)?);
    if p.dim() != t.dim() {
        return Err(PyValueError::new_err("masks differ in size"));
    }
    Ok(evaluation::hausdorff(p.view(), t.view()))
}

/// `(statistic, p_value, exact)` of the two-sided signed-rank test.
#[pyfunction]
fn wilcoxon_signed_rank(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, bool)> {
    let r = evaluation::wilcoxon_signed_rank(&a, &b).map_err(py_err)?;
    Ok((r.statistic, r.p_value, r.exact))
}

#[pyfunction]
#[pyo3(signature = (subject_ids, fractions=(0.70, 0.15, 0.15), seed=0))]
fn split_dataset<'py>(py: Python<'py>, subject_ids: Vec<String>, fractions: (f64, f64, f64), seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let s = split_ids(&subject_ids, fractions, seed).map_err(py_err)?;
    let d = PyDict::new(py);
    for (group, ids) in s.groups() {
        d.set_item(group.as_str(), ids.to_vec())?;
    }
    Ok(d)
}

/// Writes the synthetic dataset under `out`; returns the image count.
#[pyfunction]
#[pyo3(signature = (out, n_subjects=20, per_subject=10, seed=0))]
fn generate_dataset(out: PathBuf, n_subjects: usize, per_subject: usize, seed: u64) -> PyResult<usize> {
    Ok(synthdata::generate_dataset(n_subjects, per_subject, seed, &out).map_err(py_err)?.len())
}

#[pyfunction]
#[pyo3(signature = (data, out=None, method="skeleton", iters=2500, seed=0, annotators=1))]
fn make_scribbles(data: PathBuf, out: Option<PathBuf>, method: &str, iters: usize, seed: u64, annotators: usize) -> PyResult<usize> {
    let method = match method {
        "skeleton" => ScribbleMethod::Skeleton,
        "walk" => ScribbleMethod::Walk { iters },
        other => return Err(PyValueError::new_err(format!("unknown scribble method `{other}`"))),
    };
    let out = out.unwrap_or_else(|| data.clone());
    cli::make_scribbles(&data, &out, method, iters, seed, annotators.max(1)).map_err(py_err)
}

/// Trains into `run_dir` and returns the best epoch and validation Dice.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig, run_dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    config.inner.validate().map_err(py_err)?;
    let cfg = config.inner.clone();
    let report = py.detach(|| cli::train_run(&cfg, &run_dir, false, None)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("best_epoch", report.best_epoch)?;
    d.set_item("best_val_dice", report.best_val_dice)?;
    d.set_item("epochs", report.history.len())?;
    d.set_item("stopped_early", report.stopped_early)?;
    Ok(d)
}

/// Scores a run's best checkpoint on one split group, writing the CSV reports to `out`.
#[pyfunction]
#[pyo3(signature = (run_dir, group="test", out=None))]
fn evaluate<'py>(py: Python<'py>, run_dir: PathBuf, group: &str, out: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let group: SplitGroup = group.parse().map_err(py_err)?;
    let out = out.unwrap_or_else(|| run_dir.clone());
    let report = py.detach(|| cli::evaluate_run(Path::new(&run_dir), group, &out)).map_err(py_err)?;
    let agg = report.multiclass_dice();
    let d = PyDict::new(py);
    d.set_item("images", agg.count)?;
    d.set_item("dice_mean", agg.mean)?;
    d.set_item("dice_std", agg.std)?;
    Ok(d)
}

#[pymodule]
pub fn scribblegate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySegmentor>()?;
    m.add_class::<PyDiscriminator>()?;
    m.add_function(wrap_pyfunction!(cyclical_lr, m)?)?;
    m.add_function(wrap_pyfunction!(skeletonize, m)?)?;
    m.add_function(wrap_pyfunction!(random_walk_scribble, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_scribble, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(wpce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lsgan_disc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lsgan_gen_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_a0, m)?)?;
    m.add_function(wrap_pyfunction!(dice_multiclass, m)?)?;
    m.add_function(wrap_pyfunction!(dice_per_class, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_signed_rank, m)?)?;
    m.add_function(wrap_pyfunction!(split_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(make_scribbles, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
