use std::collections::BTreeSet;

use approx::assert_abs_diff_eq;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scribblegate::datapipe::LabelMask;
use scribblegate::evaluation::{dice_multiclass, dice_per_class, hausdorff, wilcoxon_signed_rank};
use scribblegate::Error;

type Points = BTreeSet<(usize, usize)>;

fn random_mask(rng: &mut ChaCha8Rng, c: usize) -> Array2<u8> {
    Array2::from_shape_fn((8, 8), |_| rng.random_range(0..c as u8))
}

fn class_points(idx: &Array2<u8>, k: u8) -> Points {
    idx.indexed_iter().filter(|(_, &v)| v == k).map(|(p, _)| p).collect()
}

fn oracle_dice(a: &Points, b: &Points) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

fn oracle_hausdorff(a: &Points, b: &Points) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let dist = |p: (usize, usize), q: (usize, usize)| {
        let dy = p.0 as f64 - q.0 as f64;
        let dx = p.1 as f64 - q.1 as f64;
        (dy * dy + dx * dx).sqrt()
    };
    let directed = |s: &Points, t: &Points| s.iter().map(|&p| t.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max);
    Some(directed(a, b).max(directed(b, a)))
}

#[test]
fn metrics_match_set_oracles_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let c = rng.random_range(2..5);
        let (p, t) = (random_mask(&mut rng, c), random_mask(&mut rng, c));
        let (pm, tm) = (LabelMask::from_indices(p.view(), c).unwrap(), LabelMask::from_indices(t.view(), c).unwrap());

        // joint foreground: (class, pixel) pairs over classes 1..c
        let joint = |idx: &Array2<u8>| -> BTreeSet<(u8, (usize, usize))> {
            (1..c as u8).flat_map(|k| class_points(idx, k).into_iter().map(move |q| (k, q))).collect()
        };
        let (jp, jt) = (joint(&p), joint(&t));
        let expected = if jp.is_empty() && jt.is_empty() { 1.0 } else { 2.0 * jp.intersection(&jt).count() as f64 / (jp.len() + jt.len()) as f64 };
        assert_eq!(dice_multiclass(&pm, &tm).unwrap(), expected);

        let per = dice_per_class(&pm, &tm).unwrap();
        for k in 1..c {
            let (a, b) = (class_points(&p, k as u8), class_points(&t, k as u8));
            assert_eq!(per[k - 1].value, oracle_dice(&a, &b));
            assert_eq!(per[k - 1].empty, a.is_empty() && b.is_empty());
            let pa = pm.channel(k).mapv(|v| v != 0);
            let ta = tm.channel(k).mapv(|v| v != 0);
            assert_eq!(hausdorff(pa.view(), ta.view()), oracle_hausdorff(&a, &b));
        }
    }
}

#[test]
fn hausdorff_on_random_point_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let mut a = Array2::from_elem((16, 16), false);
        let mut b = Array2::from_elem((16, 16), false);
        for _ in 0..10 {
            a[(rng.random_range(0..16), rng.random_range(0..16))] = true;
            b[(rng.random_range(0..16), rng.random_range(0..16))] = true;
        }
        let pts = |m: &Array2<bool>| -> Points { m.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect() };
        assert_eq!(hausdorff(a.view(), b.view()), oracle_hausdorff(&pts(&a), &pts(&b)));
    }
}

#[test]
fn hausdorff_of_a_three_four_five_pair() {
    let mut a = Array2::from_elem((5, 5), false);
    let mut b = Array2::from_elem((5, 5), false);
    a[(0, 0)] = true;
    b[(3, 4)] = true;
    assert_eq!(hausdorff(a.view(), b.view()), Some(5.0));
    assert_eq!(hausdorff(a.view(), a.view()), Some(0.0));
    assert_eq!(hausdorff(a.view(), Array2::from_elem((5, 5), false).view()), None);
}

#[test]
fn wilcoxon_small_exact_case() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [0.5, 1.0, 1.5, 2.0, 2.5];
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert!(r.exact);
    assert_abs_diff_eq!(r.p_value, 0.0625, epsilon = 1e-15);
    let s = wilcoxon_signed_rank(&b, &a).unwrap();
    assert_eq!(s.p_value, r.p_value);
    assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::AllZeroDifferences)));
}

/// Exact two-sided p by enumerating all sign patterns over the given ranks.
fn enumerate_p(ranks: &[f64], observed: f64) -> f64 {
    let n = ranks.len();
    let total: f64 = ranks.iter().sum();
    let mut hits = 0u64;
    for pattern in 0u64..(1 << n) {
        let plus: f64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
        if plus.min(total - plus) <= observed + 1e-9 {
            hits += 1;
        }
    }
    (hits as f64 / (1u64 << n) as f64).min(1.0)
}

#[test]
fn wilcoxon_exact_p_matches_enumeration_on_distinct_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 5..=10 {
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        // distinct magnitudes so ranks are 1..n
        let a: Vec<f64> = (0..n).map(|i| b[i] + if rng.random_bool(0.5) { 1.0 } else { -1.0 } * (i as f64 + 1.0) * 0.01).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        let ranks: Vec<f64> = (1..=n).map(|v| v as f64).collect();
        assert_abs_diff_eq!(r.p_value, enumerate_p(&ranks, r.statistic), epsilon = 1e-12);
    }
}

fn mask_pair() -> impl Strategy<Value = (Array2<u8>, Array2<u8>)> {
    let grid = || prop::collection::vec(0u8..3, 36).prop_map(|v| Array2::from_shape_vec((6, 6), v).unwrap());
    (grid(), grid())
}

proptest! {
    #[test]
    fn dice_is_symmetric((p, t) in mask_pair()) {
        let (pm, tm) = (LabelMask::from_indices(p.view(), 3).unwrap(), LabelMask::from_indices(t.view(), 3).unwrap());
        prop_assert_eq!(dice_multiclass(&pm, &tm).unwrap(), dice_multiclass(&tm, &pm).unwrap());
        let (a, b) = (dice_per_class(&pm, &tm).unwrap(), dice_per_class(&tm, &pm).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn hausdorff_symmetric_and_triangle(
        a in prop::collection::vec(any::<bool>(), 36),
        b in prop::collection::vec(any::<bool>(), 36),
        c in prop::collection::vec(any::<bool>(), 36),
    ) {
        let grid = |v: Vec<bool>| Array2::from_shape_vec((6, 6), v).unwrap();
        let (a, b, c) = (grid(a), grid(b), grid(c));
        let h = |x: &Array2<bool>, y: &Array2<bool>| hausdorff(x.view(), y.view());
        prop_assert_eq!(h(&a, &b), h(&b, &a));
        if let (Some(ab), Some(bc), Some(ac)) = (h(&a, &b), h(&b, &c), h(&a, &c)) {
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn growing_overlap_never_lowers_dice(truth in prop::collection::vec(any::<bool>(), 36), order in Just(()).prop_perturb(|_, mut rng| {
        let mut idx: Vec<usize> = (0..36).collect();
        for i in (1..36).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        idx
    })) {
        // prediction grows by adding true-foreground pixels one at a time
        let t = Array2::from_shape_vec((6, 6), truth.iter().map(|&v| v as u8).collect()).unwrap();
        let tm = LabelMask::from_indices(t.view(), 2).unwrap();
        let mut p = Array2::<u8>::zeros((6, 6));
        let mut last = dice_multiclass(&LabelMask::from_indices(p.view(), 2).unwrap(), &tm).unwrap();
        for &i in &order {
            let q = (i / 6, i % 6);
            if t[q] == 1 {
                p[q] = 1;
                let d = dice_multiclass(&LabelMask::from_indices(p.view(), 2).unwrap(), &tm).unwrap();
                prop_assert!(d >= last);
                last = d;
            }
        }
    }
}
