//! Segmentation metrics, the Wilcoxon signed-rank test, and CSV reports.

use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayView3};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datapipe::LabelMask;
use crate::error::{Error, Result};

/// Hardens a `c × H × W` probability map by per-pixel argmax; ties go to the lower class.
pub fn harden(probs: ArrayView3<'_, f32>) -> LabelMask {
    let (c, h, w) = probs.dim();
    let idx = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if probs[(k, y, x)] > probs[(best, y, x)] {
                best = k;
            }
        }
        best as u8
    });
    LabelMask::from_indices(idx.view(), c).expect("argmax is a valid class")
}

fn check_pair(pred: &LabelMask, truth: &LabelMask) -> Result<()> {
    if pred.num_classes() != truth.num_classes() || pred.dims() != truth.dims() {
        return Err(Error::shape(format!(
            "prediction {}×{:?} vs truth {}×{:?}",
            pred.num_classes(),
            pred.dims(),
            truth.num_classes(),
            truth.dims()
        )));
    }
    Ok(())
}

/// `2|ỹ·y| / (|ỹ| + |y|)` over all foreground channels jointly; 1 when both are empty.
pub fn dice_multiclass(pred: &LabelMask, truth: &LabelMask) -> Result<f64> {
    check_pair(pred, truth)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for k in 1..pred.num_classes() {
        for (&p, &t) in pred.channel(k).iter().zip(truth.channel(k)) {
            inter += (p & t) as usize;
            total += p as usize + t as usize;
        }
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Dice of one foreground class; `empty` marks channels absent from both masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDice {
    pub value: f64,
    pub empty: bool,
}

pub fn dice_per_class(pred: &LabelMask, truth: &LabelMask) -> Result<Vec<ClassDice>> {
    check_pair(pred, truth)?;
    Ok((1..pred.num_classes())
        .map(|k| {
            let (mut inter, mut total) = (0usize, 0usize);
            for (&p, &t) in pred.channel(k).iter().zip(truth.channel(k)) {
                inter += (p & t) as usize;
                total += p as usize + t as usize;
            }
            if total == 0 {
                ClassDice { value: 1.0, empty: true }
            } else {
                ClassDice { value: 2.0 * inter as f64 / total as f64, empty: false }
            }
        })
        .collect())
}

/// Symmetric Hausdorff distance in pixels, or `None` when either set is empty.
///
/// Directed distances use the early-break scan: the inner search over the
/// other set stops as soon as it finds a point closer than the running maximum.
pub fn hausdorff(pred: ArrayView2<'_, bool>, truth: ArrayView2<'_, bool>) -> Option<f64> {
    let points = |m: ArrayView2<'_, bool>| -> Vec<(i64, i64)> {
        m.indexed_iter().filter(|(_, &v)| v).map(|((y, x), _)| (y as i64, x as i64)).collect()
    };
    let (a, b) = (points(pred), points(truth));
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> i64 {
        let mut cmax = 0i64;
        for &(y, x) in from {
            let mut cmin = i64::MAX;
            for &(v, u) in to {
                let d = (y - v).pow(2) + (x - u).pow(2);
                if d < cmin {
                    cmin = d;
                    if cmin <= cmax {
                        break;
                    }
                }
            }
            cmax = cmax.max(cmin);
        }
        cmax
    };
    Some((directed(&a, &b).max(directed(&b, &a)) as f64).sqrt())
}

/// Outcome of a two-sided Wilcoxon signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Smaller of the positive and negative rank sums.
    pub statistic: f64,
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Largest sample size for which the null distribution is enumerated.
pub const WILCOXON_EXACT_MAX: usize = 12;

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::TooFewPairs(n));
    }
    // average ranks of |d|
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let statistic = w_plus.min(total - w_plus);

    if n <= WILCOXON_EXACT_MAX {
        let mut hits = 0u64;
        for pattern in 0u32..(1 << n) {
            let wp: f64 = (0..n).filter(|&k| pattern >> k & 1 == 1).map(|k| ranks[k]).sum();
            if wp.min(total - wp) <= statistic + 1e-9 {
                hits += 1;
            }
        }
        let p_value = (hits as f64 / (1u64 << n) as f64).min(1.0);
        return Ok(WilcoxonResult { statistic, p_value, n, exact: true });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (statistic - mean + 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_value = (2.0 * normal.cdf(z)).min(1.0);
    Ok(WilcoxonResult { statistic, p_value, n, exact: false })
}

/// Metrics of one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub multiclass_dice: f64,
    pub per_class_dice: Vec<ClassDice>,
    pub per_class_hausdorff: Vec<Option<f64>>,
}

impl SampleMetrics {
    pub fn compute(id: impl Into<String>, pred: &LabelMask, truth: &LabelMask) -> Result<Self> {
        let multiclass_dice = dice_multiclass(pred, truth)?;
        let per_class_dice = dice_per_class(pred, truth)?;
        let per_class_hausdorff = (1..pred.num_classes())
            .map(|k| hausdorff(pred.channel(k).mapv(|v| v != 0).view(), truth.channel(k).mapv(|v| v != 0).view()))
            .collect();
        Ok(Self { id: id.into(), multiclass_dice, per_class_dice, per_class_hausdorff })
    }
}

/// Mean and (population) standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Values excluded as undefined (empty Hausdorff sets, both-empty Dice).
    pub excluded: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut excluded = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => excluded += 1,
            }
        }
        if defined.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN, count: 0, excluded };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let std = (defined.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std, count: defined.len(), excluded }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub records: Vec<SampleMetrics>,
    pub class_names: Vec<String>,
}

impl MetricReport {
    pub fn new(records: Vec<SampleMetrics>, class_names: Vec<String>) -> Self {
        Self { records, class_names }
    }

    fn foreground_classes(&self) -> usize {
        self.records.first().map_or(0, |r| r.per_class_dice.len())
    }

    fn class_label(&self, k: usize) -> String {
        self.class_names.get(k + 1).cloned().unwrap_or_else(|| format!("class{}", k + 1))
    }

    pub fn multiclass_dice(&self) -> Aggregate {
        Aggregate::of(self.records.iter().map(|r| Some(r.multiclass_dice)))
    }

    /// Per-class Dice aggregates; channels empty in both masks are excluded.
    pub fn class_dice(&self, k: usize) -> Aggregate {
        Aggregate::of(self.records.iter().map(|r| {
            let d = r.per_class_dice[k];
            (!d.empty).then_some(d.value)
        }))
    }

    pub fn class_hausdorff(&self, k: usize) -> Aggregate {
        Aggregate::of(self.records.iter().map(|r| r.per_class_hausdorff[k]))
    }

    pub fn write_report_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string(), "multiclass_dice".to_string()];
        for k in 0..self.foreground_classes() {
            header.push(format!("dice_{}", self.class_label(k)));
        }
        for k in 0..self.foreground_classes() {
            header.push(format!("hausdorff_{}", self.class_label(k)));
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.id.clone(), format!("{:.6}", r.multiclass_dice)];
            row.extend(r.per_class_dice.iter().map(|d| if d.empty { "empty".into() } else { format!("{:.6}", d.value) }));
            row.extend(r.per_class_hausdorff.iter().map(|h| h.map_or("undefined".into(), |v| format!("{v:.6}"))));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "mean", "std", "count", "excluded"])?;
        let mut rows = vec![("multiclass_dice".to_string(), self.multiclass_dice())];
        for k in 0..self.foreground_classes() {
            rows.push((format!("dice_{}", self.class_label(k)), self.class_dice(k)));
        }
        for k in 0..self.foreground_classes() {
            rows.push((format!("hausdorff_{}", self.class_label(k)), self.class_hausdorff(k)));
        }
        for (name, a) in rows {
            w.write_record([name, format!("{:.6}", a.mean), format!("{:.6}", a.std), a.count.to_string(), a.excluded.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};

    use super::*;

    fn mask(idx: Array2<u8>, c: usize) -> LabelMask {
        LabelMask::from_indices(idx.view(), c).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(array![[0, 1], [1, 2]], 3);
        assert_eq!(dice_multiclass(&a, &a).unwrap(), 1.0);
        let b = mask(array![[1, 0], [0, 0]], 3);
        let c = mask(array![[0, 1], [0, 0]], 3);
        assert_eq!(dice_multiclass(&b, &c).unwrap(), 0.0);

        let p = mask(array![[1, 1, 1, 1, 0, 0]], 2);
        let t = mask(array![[0, 0, 1, 1, 1, 1]], 2);
        assert_eq!(dice_multiclass(&p, &t).unwrap(), 0.5);

        let empty = mask(Array2::zeros((3, 3)), 3);
        assert_eq!(dice_multiclass(&empty, &empty).unwrap(), 1.0);
        assert!(dice_multiclass(&empty, &mask(Array2::zeros((2, 2)), 3)).is_err());
    }

    #[test]
    fn per_class_dice_examples() {
        let t = mask(array![[1, 1], [2, 2]], 3);
        let p = mask(array![[1, 1], [0, 0]], 3);
        let d = dice_per_class(&p, &t).unwrap();
        assert_eq!((d[0].value, d[1].value), (1.0, 0.0));
        let only1 = mask(array![[1, 0]], 3);
        let d = dice_per_class(&only1, &only1).unwrap();
        assert_eq!(d[1], ClassDice { value: 1.0, empty: true });
    }

    #[test]
    fn hausdorff_examples() {
        let mut a = Array2::from_elem((5, 5), false);
        let mut b = Array2::from_elem((5, 5), false);
        a[(0, 0)] = true;
        b[(3, 4)] = true;
        assert_eq!(hausdorff(a.view(), b.view()), Some(5.0));
        assert_eq!(hausdorff(a.view(), a.view()), Some(0.0));
        assert_eq!(hausdorff(a.view(), Array2::from_elem((5, 5), false).view()), None);
    }

    #[test]
    fn wilcoxon_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::AllZeroDifferences)));
        let b = [0.9, 1.8, 2.7, 3.6, 4.5];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_abs_diff_eq!(r.p_value, 0.0625, epsilon = 1e-15);
        let s = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(s.p_value, r.p_value);
        assert!(matches!(wilcoxon_signed_rank(&a[..4], &b[..4]), Err(Error::TooFewPairs(4))));
    }

    #[test]
    fn wilcoxon_normal_branch() {
        // twenty distinct positive differences: W = 0, far in the tail
        let a: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v - 0.01 * (i + 1) as f64).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact);
        // z = (0 - 105 + 0.5) / sqrt(717.5)
        let z: f64 = -104.5 / 717.5f64.sqrt();
        let expected = 2.0 * Normal::new(0.0, 1.0).unwrap().cdf(z);
        assert_abs_diff_eq!(r.p_value, expected, epsilon = 1e-15);
    }

    #[test]
    fn harden_breaks_ties_low() {
        let probs = Array3::from_shape_vec((3, 1, 2), vec![0.4f32, 0.2, 0.4, 0.4, 0.2, 0.4]).unwrap();
        assert_eq!(harden(probs.view()).indices(), array![[0, 1]]);
    }
}
