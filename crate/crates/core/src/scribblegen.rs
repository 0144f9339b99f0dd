//! Scribble annotations: the sparse label map type, and two synthesizers that
//! derive scribbles from dense masks (topology-preserving thinning and
//! in-mask random walks).

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::LabelMask;
use crate::error::{Error, Result};

/// Label value of pixels that carry no annotation.
pub const UNLABELED: u8 = 255;

/// Sparse per-pixel labels; every pixel is a class index or [`UNLABELED`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScribbleMap {
    labels: Array2<u8>,
    num_classes: usize,
}

impl ScribbleMap {
    pub fn new(labels: Array2<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes >= UNLABELED as usize {
            return Err(Error::shape(format!("unsupported class count {num_classes}")));
        }
        if let Some(bad) = labels.iter().find(|&&v| v != UNLABELED && v as usize >= num_classes) {
            return Err(Error::shape(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { labels, num_classes })
    }

    /// A map with no annotated pixel.
    pub fn unlabeled(height: usize, width: usize, num_classes: usize) -> Self {
        Self { labels: Array2::from_elem((height, width), UNLABELED), num_classes }
    }

    /// Every pixel annotated with its mask class.
    pub fn from_mask(mask: &LabelMask) -> Self {
        Self { labels: mask.indices(), num_classes: mask.num_classes() }
    }

    pub fn labels(&self) -> ArrayView2<'_, u8> {
        self.labels.view()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn annotated_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != UNLABELED).count()
    }

    pub fn is_empty(&self) -> bool {
        self.annotated_count() == 0
    }

    /// Labels `pixels` with `class`, overwriting whatever was there.
    pub fn paint(&mut self, pixels: &[(usize, usize)], class: u8) {
        assert!((class as usize) < self.num_classes, "class {class} out of range");
        for &p in pixels {
            self.labels[p] = class;
        }
    }

    pub fn into_labels(self) -> Array2<u8> {
        self.labels
    }
}

/// 1 where a label is present, 0 elsewhere.
pub fn indicator(scribble: &ScribbleMap) -> Array2<u8> {
    scribble.labels.mapv(|v| u8::from(v != UNLABELED))
}

/// Fraction of all image pixels labelled `class_id`.
pub fn coverage(scribble: &ScribbleMap, class_id: usize) -> f64 {
    assert!(class_id < scribble.num_classes, "class {class_id} out of range");
    let hits = scribble.labels.iter().filter(|&&v| v as usize == class_id && v != UNLABELED).count();
    hits as f64 / scribble.labels.len() as f64
}

// Neighbour offsets in counter-clockwise order starting east:
// E, NE, N, NW, W, SW, S, SE.
const RING: [(isize, isize); 8] = [(0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1)];

fn at(img: &Array2<bool>, y: isize, x: isize) -> bool {
    let (h, w) = img.dim();
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && img[(y as usize, x as usize)]
}

fn ring_values(img: &Array2<bool>, y: usize, x: usize) -> [bool; 8] {
    let mut out = [false; 8];
    for (k, (dy, dx)) in RING.iter().enumerate() {
        out[k] = at(img, y as isize + dy, x as isize + dx);
    }
    out
}

/// Yokoi connectivity number for 8-connected foreground.
fn connectivity_number(n: &[bool; 8]) -> usize {
    let bg = |k: usize| !n[k % 8] as usize;
    [0, 2, 4, 6].iter().map(|&k| bg(k) - bg(k) * bg(k + 1) * bg(k + 2)).sum()
}

/// Topology-preserving thinning of a binary mask.
///
/// Each pass runs four directional sub-iterations (north, south, east, west
/// border pixels). The border candidates of a sub-iteration are taken from
/// the image as it was when the sub-iteration started, so one sub-iteration
/// peels at most one layer. Candidates are then visited in raster order and
/// deleted immediately when they are 8-simple and not line endpoints, with
/// the simplicity test run on the current image. Passes repeat until
/// nothing changes. Returns the surviving pixels in raster order.
pub fn skeletonize(mask: ArrayView2<'_, bool>) -> Vec<(usize, usize)> {
    let mut img = mask.to_owned();
    let (h, w) = img.dim();
    // border direction per sub-iteration: N, S, E, W
    let borders = [(-1isize, 0isize), (1, 0), (0, 1), (0, -1)];
    loop {
        let mut changed = false;
        for &(by, bx) in &borders {
            let snapshot = img.clone();
            for y in 0..h {
                for x in 0..w {
                    if !snapshot[(y, x)] || at(&snapshot, y as isize + by, x as isize + bx) {
                        continue;
                    }
                    let ring = ring_values(&img, y, x);
                    if ring.iter().filter(|&&v| v).count() <= 1 {
                        continue;
                    }
                    if connectivity_number(&ring) == 1 {
                        img[(y, x)] = false;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    img.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect()
}

/// Random-walk scribble inside one mask channel.
///
/// Starts at a uniformly drawn foreground pixel; each of `n_iter` steps adds
/// the current point to the scribble, proposes a move that changes each
/// coordinate independently by -1, 0 or +1, and accepts it only when the
/// target lies inside the canvas and the mask.
pub fn random_walk_scribble(mask: ArrayView2<'_, bool>, n_iter: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let foreground: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect();
    if foreground.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = mask.dim();
    let mut point = foreground[rng.random_range(0..foreground.len())];
    let mut visited = BTreeSet::new();
    visited.insert(point);
    for _ in 0..n_iter {
        let dy = rng.random_range(-1i64..=1);
        let dx = rng.random_range(-1i64..=1);
        let (ny, nx) = (point.0 as i64 + dy, point.1 as i64 + dx);
        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && mask[(ny as usize, nx as usize)] {
            point = (ny as usize, nx as usize);
            visited.insert(point);
        }
    }
    Ok(visited.into_iter().collect())
}

/// How foreground scribbles are synthesized from masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScribbleMethod {
    Skeleton,
    Walk { iters: usize },
}

impl std::str::FromStr for ScribbleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skeleton" => Ok(Self::Skeleton),
            "walk" => Ok(Self::Walk { iters: 2500 }),
            other => Err(Error::Config(format!("unknown scribble method `{other}`"))),
        }
    }
}

/// Synthesizes a full scribble map from a dense mask.
///
/// Foreground classes use `method`; the background class always uses a
/// random walk of `background_iters` steps. Empty channels get no scribble.
pub fn synthesize_scribble(mask: &LabelMask, method: ScribbleMethod, background_iters: usize, seed: u64) -> ScribbleMap {
    let (h, w) = mask.dims();
    let mut out = ScribbleMap::unlabeled(h, w, mask.num_classes());
    for class in 0..mask.num_classes() {
        let channel = mask.channel(class).mapv(|v| v != 0);
        if !channel.iter().any(|&v| v) {
            continue;
        }
        let class_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(class as u64);
        let pixels = match (class, method) {
            (0, _) => random_walk_scribble(channel.view(), background_iters, class_seed),
            (_, ScribbleMethod::Skeleton) => Ok(skeletonize(channel.view())),
            (_, ScribbleMethod::Walk { iters }) => random_walk_scribble(channel.view(), iters, class_seed),
        }
        .expect("channel checked non-empty");
        out.paint(&pixels, class as u8);
    }
    out
}

/// Number of 8-connected components of the foreground.
pub fn count_components(mask: ArrayView2<'_, bool>) -> usize {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut count = 0;
    let mut stack = Vec::new();
    for start in mask.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p) {
        if seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some((y, x)) = stack.pop() {
            for (dy, dx) in RING {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                    continue;
                }
                let q = (ny as usize, nx as usize);
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    count
}
