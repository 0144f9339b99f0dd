//! Synthetic cardiac-like scenes: a bright filled disk inside a darker
//! annulus on a textured background with a smooth intensity gradient.
//! Some slices carry a bright distractor blob away from the structure.
//!
//! The "disk" is elliptical, like a short-axis ventricle: a perfectly round
//! disk thins to a single pixel, which leaves nothing to learn from.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datapipe::{write_gray_png, write_index, write_index_png, ImageSample, IndexRow, LabelMask};
use crate::error::{Error, Result};

pub const CANVAS: usize = 64;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; 3] = ["background", "disk", "annulus"];

/// Geometry and intensity model of one synthetic image.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeScene {
    pub center: (f64, f64),
    /// Semi-axes of the inner region, major first.
    pub disk_radii: (f64, f64),
    /// Width added to both semi-axes to obtain the outer boundary.
    pub thickness: f64,
    /// Orientation of the major axis, radians from the x axis.
    pub angle: f64,
    pub background: f64,
    pub disk_intensity: f64,
    pub annulus_intensity: f64,
    pub noise_std: f64,
    /// Intensity change across the canvas along y and x.
    pub gradient: (f64, f64),
    /// Center and radius of an optional bright blob outside the structure.
    pub distractor: Option<((f64, f64), f64)>,
    pub seed: u64,
}

impl ShapeScene {
    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        let (dy, dx) = (y as f64 - self.center.0, x as f64 - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, c * dy - s * dx);
        let inside = |a: f64, b: f64| (u / a).powi(2) + (v / b).powi(2) <= 1.0;
        let (a, b) = self.disk_radii;
        if inside(a, b) {
            1
        } else if inside(a + self.thickness, b + self.thickness) {
            2
        } else {
            0
        }
    }

    pub fn outer_radius(&self) -> f64 {
        self.disk_radii.0 + self.thickness
    }

    pub fn mask(&self) -> Array2<u8> {
        Array2::from_shape_fn((CANVAS, CANVAS), |(y, x)| self.class_at(y, x))
    }

    /// Intensities in `[0, 1]` (clamped after noise).
    pub fn render(&self) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_std).expect("finite noise std");
        let size = CANVAS as f64;
        Array2::from_shape_fn((CANVAS, CANVAS), |(y, x)| {
            let base = match self.class_at(y, x) {
                1 => self.disk_intensity,
                2 => self.annulus_intensity,
                _ => match self.distractor {
                    Some(((cy, cx), r)) if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r => self.disk_intensity,
                    _ => self.background,
                },
            };
            let ramp = self.gradient.0 * (y as f64 / size - 0.5) + self.gradient.1 * (x as f64 / size - 0.5);
            (base + ramp + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
        })
    }
}


/// Draws the scenes of one subject: a shared anatomy that shrinks and
/// drifts slightly from slice to slice.
pub fn subject_scenes(subject: usize, per_subject: usize, seed: u64) -> Vec<ShapeScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (subject as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    let disk = rng.random_range(7.0..11.0);
    let aspect = rng.random_range(1.3..1.7);
    let thickness = rng.random_range(3.0..5.0);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let outer = disk + thickness;
    let margin = outer + 3.0;
    let center = (rng.random_range(margin..CANVAS as f64 - margin), rng.random_range(margin..CANVAS as f64 - margin));
    let background = rng.random_range(0.15..0.3);
    let gradient = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    (0..per_subject)
        .map(|k| {
            let shrink = if per_subject > 1 { 1.5 * k as f64 / (per_subject - 1) as f64 } else { 0.0 };
            let jitter = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let major = disk - shrink;
            let c = (center.0 + jitter.0, center.1 + jitter.1);
            let distractor = if rng.random_bool(0.5) {
                // place the blob in the widest free quadrant
                let r = rng.random_range(2.5..4.0);
                let far = |v: f64| if v < CANVAS as f64 / 2.0 { CANVAS as f64 - 8.0 } else { 8.0 };
                Some(((far(c.0), far(c.1)), r))
            } else {
                None
            };
            ShapeScene {
                center: c,
                disk_radii: (major, major / aspect),
                thickness,
                angle,
                background,
                disk_intensity: rng.random_range(0.75..0.9),
                annulus_intensity: rng.random_range(0.45..0.55),
                noise_std: 0.04,
                gradient,
                distractor,
                seed: rng.random(),
            }
        })
        .collect()
}

/// One generated image with its subject, slice name and mask.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub subject_id: String,
    pub slice: String,
    pub scene: ShapeScene,
    pub image: ImageSample,
    pub mask: LabelMask,
}

pub fn subject_name(i: usize) -> String {
    format!("s{i:03}")
}

/// Generates all samples in memory. Intensities are quantized to 8 bits
/// exactly as they would be stored on disk.
pub fn generate_samples(n_subjects: usize, per_subject: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n_subjects < 4 {
        return Err(Error::TooFewSubjects(n_subjects));
    }
    let mut out = Vec::with_capacity(n_subjects * per_subject);
    for s in 0..n_subjects {
        let subject_id = subject_name(s);
        for (k, scene) in subject_scenes(s, per_subject, seed).into_iter().enumerate() {
            let slice = format!("{k:02}");
            let pixels = scene.render().mapv(|v| (v * 255.0).round());
            let image = ImageSample::gray(format!("{subject_id}/{slice}"), subject_id.clone(), pixels);
            let names = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
            let mask = LabelMask::from_indices(scene.mask().view(), NUM_CLASSES)?.with_class_names(names);
            out.push(SyntheticSample { subject_id: subject_id.clone(), slice, scene, image, mask });
        }
    }
    Ok(out)
}

/// Writes the dataset under `out` in the standard layout and returns the index rows.
pub fn generate_dataset(n_subjects: usize, per_subject: usize, seed: u64, out: &Path) -> Result<Vec<IndexRow>> {
    let samples = generate_samples(n_subjects, per_subject, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let image_path = format!("images/{}/{}.png", s.subject_id, s.slice);
        let mask_path = format!("masks/{}/{}.png", s.subject_id, s.slice);
        let pixels = s.image.pixels.index_axis(ndarray::Axis(2), 0);
        write_gray_png(&out.join(&image_path), pixels)?;
        write_index_png(&out.join(&mask_path), s.mask.indices().view())?;
        rows.push(IndexRow {
            subject_id: s.subject_id.clone(),
            split_hint: String::new(),
            image_path,
            mask_path,
            scribble_path: String::new(),
        });
    }
    write_index(out, &rows)?;
    Ok(rows)
}
