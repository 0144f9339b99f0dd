use std::path::Path;
use std::process::{Command, Output};

fn scribblegate(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scribblegate"))
        .args(args)
        .env("SCRIBBLEGATE_RUNS", runs)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = scribblegate(tmp.path(), &["train", "--config", "missing.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing.cfg") && err.contains("--help"), "{err}");
}

#[test]
fn bad_invocations_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(scribblegate(tmp.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(scribblegate(tmp.path(), &["synth-data", "--subjects", "2", "--out", "x"]).status.code(), Some(1));
    assert_eq!(scribblegate(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let out = scribblegate(tmp.path(), &["make-scribbles", "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = scribblegate(tmp.path(), &["synth-data", "--seed", "7", "--subjects", "4", "--per-subject", "3", "--out", d.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert_eq!(ta.len(), 1 + 2 * 12);
    assert_eq!(ta, tb);
}

#[test]
fn end_to_end_train_evaluate_plot_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let d = data.to_str().unwrap();
    assert!(scribblegate(tmp.path(), &["synth-data", "--subjects", "8", "--per-subject", "2", "--out", d]).status.success());
    assert!(scribblegate(tmp.path(), &["make-scribbles", "--data", d, "--seed", "3"]).status.success());
    let index = std::fs::read_to_string(data.join("index.csv")).unwrap();
    assert!(index.lines().skip(1).all(|l| l.ends_with(".png")), "{index}");
    assert!(scribblegate(tmp.path(), &["split", "--data", d, "--fractions", "0.5,0.25,0.25"]).status.success());

    let cfg = tmp.path().join("tiny.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# tiny model\nrun_name = tiny\ndata_root = {d}\nimage_size = 32\nnum_classes = 3\ndepths = 2\n\
             encoder_filters = 4,8,8\ndisc_filters = 4,8,8\ndisc_compress_channels = 2\nbatch_size = 2\nmax_epochs = 2\n"
        ),
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let out = scribblegate(tmp.path(), &["train", "--config", c]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("tiny");
    for f in ["config.resolved", "split.csv", "metrics.csv", "best.ckpt", "last.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let resolved = std::fs::read_to_string(run.join("config.resolved")).unwrap();
    assert!(resolved.contains("max_epochs = 2") && resolved.contains("batch_size = 2"));
    assert_eq!(std::fs::read(run.join("split.csv")).unwrap(), std::fs::read(data.join("split.csv")).unwrap());

    let r = run.to_str().unwrap();
    assert!(scribblegate(tmp.path(), &["evaluate", "--run", r]).status.success());
    assert!(run.join("report.csv").exists() && run.join("summary.csv").exists());

    let metrics = run.join("metrics.csv");
    assert!(scribblegate(tmp.path(), &["plot", metrics.to_str().unwrap()]).status.success());
    let png = image::open(run.join("curves.png")).unwrap().to_rgb8();
    assert_eq!(png.dimensions(), (800, 300));
    // both panels carry drawn curves, not just the frame
    let coloured = |x0: u32, x1: u32| (x0..x1).flat_map(|x| (0..300).map(move |y| (x, y))).filter(|&(x, y)| {
        let p = png.get_pixel(x, y).0;
        p[0] != p[1] || p[1] != p[2]
    }).count();
    assert!(coloured(0, 400) > 0 && coloured(400, 800) > 0);

    let unknown = scribblegate(tmp.path(), &["train", "--config", c, "--set", "no_such_key=1"]);
    assert_eq!(unknown.status.code(), Some(1));

    let out = scribblegate(tmp.path(), &["sweep", "--config", c, "--set", "max_epochs=1", "--fractions", "1.0,0.5", "--seeds", "0"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(run.join("sweep.csv")).unwrap();
    let fractions: Vec<f64> = sweep.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(fractions, vec![0.5, 1.0]);
}
