use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use proptest::prelude::*;
use scribblegate::datapipe::LabelMask;
use scribblegate::scribblegen::{
    count_components, random_walk_scribble, skeletonize, synthesize_scribble, ScribbleMethod, UNLABELED,
};

/// Golden file layout: input grid, blank line, expected skeleton grid.
fn read_golden(name: &str) -> (Array2<bool>, Array2<bool>) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let text = std::fs::read_to_string(&path).unwrap();
    let (a, b) = text.split_once("\n\n").unwrap();
    let grid = |s: &str| {
        let rows: Vec<&str> = s.lines().filter(|l| !l.is_empty()).collect();
        Array2::from_shape_fn((rows.len(), rows[0].len()), |(y, x)| rows[y].as_bytes()[x] == b'#')
    };
    (grid(a), grid(b))
}

#[test]
fn golden_skeletons() {
    for name in ["square5", "rect4x8", "ell", "disk4"] {
        let (input, expected) = read_golden(&format!("skeleton_{name}.txt"));
        let got: BTreeSet<(usize, usize)> = skeletonize(input.view()).into_iter().collect();
        let want: BTreeSet<(usize, usize)> = expected.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect();
        assert_eq!(got, want, "skeleton of {name}");
    }
}

#[test]
fn walk_on_twenty_pixel_disk() {
    let mask = Array2::from_shape_fn((20, 20), |(y, x)| (y as f64 - 9.5).powi(2) + (x as f64 - 9.5).powi(2) <= 100.0);
    let area = mask.iter().filter(|&&v| v).count();
    let px = random_walk_scribble(mask.view(), 2500, 0).unwrap();
    assert!(!px.is_empty() && px.len() <= area.min(2500));
    assert!(px.iter().all(|&p| mask[p]));
}

fn small_mask() -> impl Strategy<Value = Array2<bool>> {
    (3usize..14, 3usize..14).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop::bool::weighted(0.55), h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn skeleton_inside_mask_and_same_components(mask in small_mask()) {
        let skel = skeletonize(mask.view());
        prop_assert!(skel.iter().all(|&p| mask[p]));
        let mut img = Array2::from_elem(mask.dim(), false);
        for &p in &skel {
            img[p] = true;
        }
        prop_assert_eq!(count_components(img.view()), count_components(mask.view()));
        prop_assert_eq!(skeletonize(mask.view()), skel);
    }

    #[test]
    fn walk_inside_mask_and_bounded(mask in small_mask(), seed in any::<u64>(), iters in 0usize..300) {
        prop_assume!(mask.iter().any(|&v| v));
        let a = random_walk_scribble(mask.view(), iters, seed).unwrap();
        prop_assert!(!a.is_empty());
        prop_assert!(a.len() <= iters + 1);
        prop_assert!(a.iter().all(|&p| mask[p]));
        prop_assert_eq!(random_walk_scribble(mask.view(), iters, seed).unwrap(), a);
    }

    #[test]
    fn synthesized_labels_sit_in_their_channel(
        labels in prop::collection::vec(0u8..3, 64),
        seed in any::<u64>(),
        walk in any::<bool>(),
    ) {
        let idx = Array2::from_shape_vec((8, 8), labels).unwrap();
        let mask = LabelMask::from_indices(idx.view(), 3).unwrap();
        let method = if walk { ScribbleMethod::Walk { iters: 50 } } else { ScribbleMethod::Skeleton };
        let s = synthesize_scribble(&mask, method, 50, seed);
        for (p, &l) in s.labels().indexed_iter() {
            prop_assert!(l == UNLABELED || l == idx[p]);
        }
        // every class present in the mask gets at least one scribble pixel
        for k in 0..3u8 {
            let present = idx.iter().any(|&v| v == k);
            prop_assert_eq!(present, s.labels().iter().any(|&v| v == k));
        }
    }
}
