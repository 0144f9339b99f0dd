use std::collections::BTreeMap;

use scribblegate::synthdata::{generate_dataset, generate_samples};
use scribblegate::Error;

#[test]
fn foreground_fraction_over_two_hundred_images() {
    let samples = generate_samples(20, 10, 0).unwrap();
    assert_eq!(samples.len(), 200);
    let fg: f64 = samples.iter().map(|s| s.mask.indices().iter().filter(|&&v| v != 0).count() as f64 / 4096.0).sum::<f64>() / 200.0;
    assert!((0.05..=0.30).contains(&fg), "mean foreground fraction {fg}");
}

#[test]
fn classes_stand_out_from_noise() {
    for s in generate_samples(10, 4, 3).unwrap() {
        let idx = s.mask.indices();
        let mut sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
        for (p, &k) in idx.indexed_iter() {
            let e = sums.entry(k).or_default();
            e.0 += s.image.pixels[(p.0, p.1, 0)] as f64 / 255.0;
            e.1 += 1;
        }
        let mean = |k: u8| sums[&k].0 / sums[&k].1 as f64;
        for k in [1u8, 2] {
            assert!((mean(k) - mean(0)).abs() >= 3.0 * s.scene.noise_std, "{}: class {k}", s.image.id);
        }
    }
}

#[test]
fn same_seed_writes_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let rows = generate_dataset(4, 3, 7, a.path()).unwrap();
    generate_dataset(4, 3, 7, b.path()).unwrap();
    let mut files = vec!["index.csv".to_string()];
    for r in &rows {
        files.push(r.image_path.clone());
        files.push(r.mask_path.clone());
    }
    for f in files {
        assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    generate_dataset(4, 3, 8, c.path()).unwrap();
    assert_ne!(std::fs::read(a.path().join(&rows[0].image_path)).unwrap(), std::fs::read(c.path().join(&rows[0].image_path)).unwrap());
}

#[test]
fn masks_nest_and_never_touch_the_border() {
    for s in generate_samples(8, 5, 11).unwrap() {
        let idx = s.mask.indices();
        for ((y, x), &v) in idx.indexed_iter() {
            if y == 0 || x == 0 || y == 63 || x == 63 {
                assert_eq!(v, 0);
            }
            if v == 1 {
                // every disk pixel's 8-neighbours are disk or annulus
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        assert_ne!(idx[((y as i32 + dy) as usize, (x as i32 + dx) as usize)], 0);
                    }
                }
            }
        }
    }
}

#[test]
fn too_few_subjects() {
    assert!(matches!(generate_samples(3, 2, 0), Err(Error::TooFewSubjects(3))));
}
