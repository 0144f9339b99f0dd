//! Images, masks and splits: normalization, crop/pad, subject-level
//! splitting, batching, and the on-disk dataset layout.
//!
//! Layout under a dataset root:
//!
//! ```text
//! images/<subject>/<slice>.png     8/16-bit gray or 8-bit RGB
//! masks/<subject>/<slice>.png      8-bit, pixel value = class index
//! scribbles/<subject>/<slice>.png  8-bit, class index or 255 (unlabeled)
//! index.csv                        subject_id,split_hint,image_path,mask_path,scribble_path
//! ```
//!
//! `scribble_path` may list several files separated by `;` (one per annotator).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scribblegen::{ScribbleMap, UNLABELED};

/// One 2D image, stored `H × W × C` (C = 1 for grayscale).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub subject_id: String,
    pub pixels: Array3<f32>,
    pub normalized: bool,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, subject_id: impl Into<String>, pixels: Array3<f32>) -> Self {
        Self { id: id.into(), subject_id: subject_id.into(), pixels, normalized: false }
    }

    pub fn gray(id: impl Into<String>, subject_id: impl Into<String>, pixels: Array2<f32>) -> Self {
        Self::new(id, subject_id, pixels.insert_axis(Axis(2)))
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Dense one-hot segmentation, `c × H × W`; channel 0 is the background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    channels: Array3<u8>,
    class_names: Vec<String>,
}

impl LabelMask {
    /// Builds the one-hot encoding of a class-index map.
    pub fn from_indices(indices: ArrayView2<'_, u8>, num_classes: usize) -> Result<Self> {
        let (h, w) = indices.dim();
        let mut channels = Array3::zeros((num_classes, h, w));
        for ((y, x), &c) in indices.indexed_iter() {
            if c as usize >= num_classes {
                return Err(Error::shape(format!("mask label {c} out of range for {num_classes} classes")));
            }
            channels[(c as usize, y, x)] = 1;
        }
        let class_names = (0..num_classes)
            .map(|i| if i == 0 { "background".to_string() } else { format!("class{i}") })
            .collect();
        Ok(Self { channels, class_names })
    }

    /// Wraps an existing one-hot array, validating the one-hot property.
    pub fn from_channels(channels: Array3<u8>) -> Result<Self> {
        let (c, h, w) = channels.dim();
        for y in 0..h {
            for x in 0..w {
                let col = channels.slice(s![.., y, x]);
                if col.iter().any(|&v| v > 1) || col.iter().map(|&v| v as usize).sum::<usize>() != 1 {
                    return Err(Error::shape(format!("pixel ({y},{x}) is not one-hot")));
                }
            }
        }
        let class_names = (0..c).map(|i| if i == 0 { "background".to_string() } else { format!("class{i}") }).collect();
        Ok(Self { channels, class_names })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.num_classes());
        self.class_names = names;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.channels.dim().0
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.channels.dim();
        (h, w)
    }

    pub fn channels(&self) -> ArrayView3<'_, u8> {
        self.channels.view()
    }

    pub fn channel(&self, class: usize) -> ArrayView2<'_, u8> {
        self.channels.index_axis(Axis(0), class)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Class-index map.
    pub fn indices(&self) -> Array2<u8> {
        let (c, h, w) = self.channels.dim();
        Array2::from_shape_fn((h, w), |(y, x)| (0..c).find(|&k| self.channels[(k, y, x)] == 1).unwrap_or(0) as u8)
    }
}

/// Subject-level partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    /// Scribble-supervised half of the training subjects.
    pub seg_train: Vec<String>,
    /// Masks-only half; its images never reach the segmentor.
    pub disc_train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Split membership of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SplitGroup {
    SegTrain,
    DiscTrain,
    Validation,
    Test,
}

impl SplitGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitGroup::SegTrain => "seg_train",
            SplitGroup::DiscTrain => "disc_train",
            SplitGroup::Validation => "validation",
            SplitGroup::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg_train" => Ok(Self::SegTrain),
            "disc_train" => Ok(Self::DiscTrain),
            "validation" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(Error::Dataset(format!("unknown split group `{other}`"))),
        }
    }
}

impl DatasetSplit {
    pub fn group_of(&self, subject: &str) -> Option<SplitGroup> {
        let has = |v: &[String]| v.iter().any(|s| s == subject);
        if has(&self.seg_train) {
            Some(SplitGroup::SegTrain)
        } else if has(&self.disc_train) {
            Some(SplitGroup::DiscTrain)
        } else if has(&self.validation) {
            Some(SplitGroup::Validation)
        } else if has(&self.test) {
            Some(SplitGroup::Test)
        } else {
            None
        }
    }

    pub fn groups(&self) -> [(SplitGroup, &[String]); 4] {
        [
            (SplitGroup::SegTrain, &self.seg_train),
            (SplitGroup::DiscTrain, &self.disc_train),
            (SplitGroup::Validation, &self.validation),
            (SplitGroup::Test, &self.test),
        ]
    }

    /// CSV with `subject_id,group` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["subject_id", "group"])?;
        for (group, ids) in self.groups() {
            for id in ids {
                w.write_record([id.as_str(), group.as_str()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path, seed: u64) -> Result<Self> {
        let mut split = DatasetSplit { seg_train: vec![], disc_train: vec![], validation: vec![], test: vec![], seed };
        let mut r = csv::Reader::from_path(path)?;
        for row in r.records() {
            let row = row?;
            let (id, group) = (row.get(0).unwrap_or("").to_string(), row.get(1).unwrap_or(""));
            match group.parse::<SplitGroup>()? {
                SplitGroup::SegTrain => split.seg_train.push(id),
                SplitGroup::DiscTrain => split.disc_train.push(id),
                SplitGroup::Validation => split.validation.push(id),
                SplitGroup::Test => split.test.push(id),
            }
        }
        Ok(split)
    }
}

/// Linear-interpolation quantile of an ascending-sorted slice.
fn quantile_sorted(sorted: &[f32], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

/// Subtracts the median and divides by the interquartile range, both taken
/// over every voxel of the subject's stack.
pub fn normalize_median_iqr(stack: &[ImageSample]) -> Result<Vec<ImageSample>> {
    let mut all: Vec<f32> = stack.iter().flat_map(|s| s.pixels.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::ZeroSpread);
    }
    all.sort_by(f32::total_cmp);
    let median = quantile_sorted(&all, 0.5);
    let iqr = quantile_sorted(&all, 0.75) - quantile_sorted(&all, 0.25);
    if iqr.abs() < 1e-12 {
        return Err(Error::ZeroSpread);
    }
    Ok(stack
        .iter()
        .map(|s| ImageSample {
            pixels: s.pixels.mapv(|v| ((v as f64 - median) / iqr) as f32),
            normalized: true,
            ..s.clone()
        })
        .collect())
}

/// Affine map of `[min, max]` onto `[-1, 1]`.
pub fn normalize_minmax_symmetric(image: &ImageSample) -> Result<ImageSample> {
    let min = image.pixels.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let max = image.pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if max - min <= 0.0 {
        return Err(Error::ZeroSpread);
    }
    Ok(ImageSample {
        pixels: image.pixels.mapv(|v| (2.0 * (v as f64 - min) / (max - min) - 1.0) as f32),
        normalized: true,
        ..image.clone()
    })
}

/// Divides by the maximum value, mapping non-negative images into `[0, 1]`.
pub fn normalize_max(image: &ImageSample) -> Result<ImageSample> {
    let max = image.pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max <= 0.0 {
        return Err(Error::ZeroSpread);
    }
    Ok(ImageSample { pixels: image.pixels.mapv(|v| v / max), normalized: true, ..image.clone() })
}

/// Intensity normalization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    MedianIqr,
    MinMaxSymmetric,
    Max,
    None,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median_iqr" => Ok(Self::MedianIqr),
            "minmax" => Ok(Self::MinMaxSymmetric),
            "max" => Ok(Self::Max),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MedianIqr => "median_iqr",
            Self::MinMaxSymmetric => "minmax",
            Self::Max => "max",
            Self::None => "none",
        })
    }
}

fn crop_pad_offsets(size: usize, target: usize) -> (usize, usize, usize) {
    // (source start, destination start, copied length); ties go top-left
    if size >= target {
        ((size - target) / 2, 0, target)
    } else {
        (0, (target - size) / 2, size)
    }
}

/// Center-crops or symmetrically pads a 2D array to `target_h × target_w`.
pub fn crop_or_pad<T: Clone>(a: ArrayView2<'_, T>, target_h: usize, target_w: usize, pad_value: T) -> Array2<T> {
    assert!(target_h > 0 && target_w > 0, "crop_or_pad: target must be positive");
    let (h, w) = a.dim();
    let (sy, dy, ly) = crop_pad_offsets(h, target_h);
    let (sx, dx, lx) = crop_pad_offsets(w, target_w);
    let mut out = Array2::from_elem((target_h, target_w), pad_value);
    out.slice_mut(s![dy..dy + ly, dx..dx + lx]).assign(&a.slice(s![sy..sy + ly, sx..sx + lx]));
    out
}

/// [`crop_or_pad`] applied to every channel of an image.
pub fn crop_or_pad_image(image: &ImageSample, target_h: usize, target_w: usize, pad_value: f32) -> ImageSample {
    let c = image.channels();
    let mut out = Array3::from_elem((target_h, target_w, c), pad_value);
    for ch in 0..c {
        let plane = crop_or_pad(image.pixels.index_axis(Axis(2), ch), target_h, target_w, pad_value);
        out.index_axis_mut(Axis(2), ch).assign(&plane);
    }
    ImageSample { pixels: out, ..image.clone() }
}

pub fn crop_or_pad_mask(mask: &LabelMask, target_h: usize, target_w: usize) -> LabelMask {
    let idx = crop_or_pad(mask.indices().view(), target_h, target_w, 0u8);
    LabelMask::from_indices(idx.view(), mask.num_classes())
        .expect("indices come from a valid mask")
        .with_class_names(mask.class_names().to_vec())
}

pub fn crop_or_pad_scribble(scribble: &ScribbleMap, target_h: usize, target_w: usize) -> ScribbleMap {
    let labels = crop_or_pad(scribble.labels(), target_h, target_w, UNLABELED);
    ScribbleMap::new(labels, scribble.num_classes()).expect("labels come from a valid scribble")
}

/// Deterministic subject-level split.
///
/// Validation and test sizes are floored; the remaining training subjects
/// are halved with the extra subject going to the segmentor half.
pub fn split_dataset(subject_ids: &[String], fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let unique: BTreeSet<&String> = subject_ids.iter().collect();
    let mut ids: Vec<String> = unique.into_iter().cloned().collect();
    let n = ids.len();
    let total = fractions.0 + fractions.1 + fractions.2;
    let n_val = ((n as f64) * fractions.1 / total + 1e-9).floor() as usize;
    let n_test = ((n as f64) * fractions.2 / total + 1e-9).floor() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    let n_disc = n_train / 2;
    let n_seg = n_train - n_disc;
    if n_val == 0 || n_test == 0 || n_seg == 0 || n_disc == 0 {
        return Err(Error::TooFewSubjects(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut it = ids.into_iter();
    let mut take = |k: usize| -> Vec<String> { it.by_ref().take(k).collect() };
    Ok(DatasetSplit {
        seg_train: take(n_seg),
        disc_train: take(n_disc),
        validation: take(n_val),
        test: take(n_test),
        seed,
    })
}

/// Shuffled index batches covering `0..n` once; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn make_batches<T: Clone>(samples: &[T], batch_size: usize, seed: u64) -> Vec<Vec<T>> {
    batch_indices(samples.len(), batch_size, seed)
        .into_iter()
        .map(|b| b.into_iter().map(|i| samples[i].clone()).collect())
        .collect()
}

/// One row of `index.csv`, resolved and loaded.
#[derive(Debug, Clone)]
pub struct Record {
    pub image: ImageSample,
    pub mask: Option<LabelMask>,
    pub scribbles: Vec<ScribbleMap>,
    pub split_hint: Option<String>,
}

/// Raw row of `index.csv` (paths relative to the dataset root).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexRow {
    pub subject_id: String,
    pub split_hint: String,
    pub image_path: String,
    pub mask_path: String,
    pub scribble_path: String,
}

pub const INDEX_HEADER: [&str; 5] = ["subject_id", "split_hint", "image_path", "mask_path", "scribble_path"];

pub fn read_index(root: &Path) -> Result<Vec<IndexRow>> {
    let path = root.join("index.csv");
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ci), Some(ii)) = (col("subject_id"), col("image_path")) else {
        return Err(Error::Dataset(format!("{}: missing subject_id or image_path column", path.display())));
    };
    let (hi, mi, si) = (col("split_hint"), col("mask_path"), col("scribble_path"));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: Option<usize>| i.and_then(|i| rec.get(i)).unwrap_or("").to_string();
        rows.push(IndexRow {
            subject_id: get(Some(ci)),
            split_hint: get(hi),
            image_path: get(Some(ii)),
            mask_path: get(mi),
            scribble_path: get(si),
        });
    }
    Ok(rows)
}

pub fn write_index(root: &Path, rows: &[IndexRow]) -> Result<()> {
    let path = root.join("index.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(INDEX_HEADER)?;
    for r in rows {
        w.write_record([&r.subject_id, &r.split_hint, &r.image_path, &r.mask_path, &r.scribble_path])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Reads an 8/16-bit grayscale or 8-bit RGB PNG as raw intensities.
pub fn read_image(path: &Path) -> Result<Array3<f32>> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let out = match img {
        DynamicImage::ImageLuma8(b) => Array3::from_shape_fn((h, w, 1), |(y, x, _)| b.get_pixel(x as u32, y as u32)[0] as f32),
        DynamicImage::ImageLuma16(b) => Array3::from_shape_fn((h, w, 1), |(y, x, _)| b.get_pixel(x as u32, y as u32)[0] as f32),
        other => {
            let rgb = other.to_rgb8();
            Array3::from_shape_fn((h, w, 3), |(y, x, c)| rgb.get_pixel(x as u32, y as u32)[c] as f32)
        }
    };
    Ok(out)
}

/// Reads an 8-bit indexed PNG (class index per pixel).
pub fn read_index_png(path: &Path) -> Result<Array2<u8>> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| img.get_pixel(x as u32, y as u32)[0]))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

pub fn write_index_png(path: &Path, labels: ArrayView2<'_, u8>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = labels.dim();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([labels[(y as usize, x as usize)]]));
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes a grayscale image, clamping intensities to `[0, 255]`.
pub fn write_gray_png(path: &Path, pixels: ArrayView2<'_, f32>) -> Result<()> {
    let bytes = pixels.mapv(|v| v.round().clamp(0.0, 255.0) as u8);
    write_index_png(path, bytes.view())
}

fn slice_id(subject: &str, image_path: &str) -> String {
    let stem = Path::new(image_path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{subject}/{stem}")
}

/// Loads every row of `<root>/index.csv`. Masks and scribbles are optional per row.
pub fn load_dataset(root: &Path, num_classes: usize) -> Result<Vec<Record>> {
    let rows = read_index(root)?;
    if rows.is_empty() {
        return Err(Error::Dataset(format!("{}: index.csv has no rows", root.display())));
    }
    let resolve = |p: &str| -> PathBuf { root.join(p) };
    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        let pixels = read_image(&resolve(&row.image_path))?;
        let image = ImageSample::new(slice_id(&row.subject_id, &row.image_path), row.subject_id.clone(), pixels);
        let mask = if row.mask_path.is_empty() {
            None
        } else {
            Some(LabelMask::from_indices(read_index_png(&resolve(&row.mask_path))?.view(), num_classes)?)
        };
        let mut scribbles = Vec::new();
        for p in row.scribble_path.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            scribbles.push(ScribbleMap::new(read_index_png(&resolve(p))?, num_classes)?);
        }
        let split_hint = (!row.split_hint.is_empty()).then_some(row.split_hint);
        records.push(Record { image, mask, scribbles, split_hint });
    }
    Ok(records)
}

/// Normalizes intensities (per subject for median/IQR) and crops or pads
/// images, masks and scribbles to `target` when given.
pub fn preprocess(records: Vec<Record>, normalization: Normalization, target: Option<(usize, usize)>) -> Result<Vec<Record>> {
    let mut subjects: Vec<String> = records.iter().map(|r| r.image.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let mut out: Vec<Option<Record>> = records.into_iter().map(Some).collect();
    if normalization == Normalization::MedianIqr {
        for subject in &subjects {
            let idx: Vec<usize> = (0..out.len())
                .filter(|&i| out[i].as_ref().is_some_and(|r| &r.image.subject_id == subject))
                .collect();
            let stack: Vec<ImageSample> = idx.iter().map(|&i| out[i].as_ref().unwrap().image.clone()).collect();
            let normalized = normalize_median_iqr(&stack)?;
            for (&i, img) in idx.iter().zip(normalized) {
                out[i].as_mut().unwrap().image = img;
            }
        }
    }
    let mut result = Vec::with_capacity(out.len());
    for rec in out.into_iter().flatten() {
        let mut rec = rec;
        rec.image = match normalization {
            Normalization::MinMaxSymmetric => normalize_minmax_symmetric(&rec.image)?,
            Normalization::Max => normalize_max(&rec.image)?,
            Normalization::MedianIqr | Normalization::None => rec.image,
        };
        if let Some((th, tw)) = target {
            rec.image = crop_or_pad_image(&rec.image, th, tw, 0.0);
            rec.mask = rec.mask.map(|m| crop_or_pad_mask(&m, th, tw));
            rec.scribbles = rec.scribbles.iter().map(|s| crop_or_pad_scribble(s, th, tw)).collect();
        }
        result.push(rec);
    }
    Ok(result)
}
