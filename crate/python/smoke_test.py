"""Exercises the Python bindings end to end on a tiny synthetic dataset.

Build first: pip install --no-build-isolation -e crates/py
"""

import math
import tempfile
from pathlib import Path

import scribblegate_py as sg


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok  {what}")


def main():
    check(abs(sg.cyclical_lr(0) - 1e-4) < 1e-12 and abs(sg.cyclical_lr(10) - 1e-5) < 1e-12, "cyclical_lr peak and trough")

    square = [[2 <= y <= 6 and 2 <= x <= 6 for x in range(9)] for y in range(9)]
    skel = sg.skeletonize(square)
    check(skel and all(square[y][x] for y, x in skel), "skeleton inside mask")
    walk = sg.random_walk_scribble(square, 100, 3)
    check(walk == sg.random_walk_scribble(square, 100, 3), "random walk deterministic")

    pred = [[[0.5, 0.5]], [[0.5, 0.5]]]
    value, grad = sg.wpce_loss(pred, [[0, 255]], [1.0, 1.0])
    check(abs(value - math.log(2)) < 1e-9 and grad[0][0][1] == 0.0, "wpce on one annotated pixel")
    check(sg.lsgan_disc_loss([1.0], [-1.0])[0] == 0.0, "lsgan perfect scores")
    check(abs(sg.lsgan_gen_loss([0.0])[0] - 0.5) < 1e-12, "lsgan generator at zero")

    mask = [[0, 1], [2, 1]]
    check(sg.dice_multiclass(mask, mask, 3) == 1.0, "dice of identical masks")
    check(sg.hausdorff([[True, False]], [[False, True]]) == 1.0, "hausdorff of neighbours")
    _, p, exact = sg.wilcoxon_signed_rank([1, 2, 3, 4, 5], [0.5, 1, 1.5, 2, 2.5])
    check(exact and abs(p - 0.0625) < 1e-15, "wilcoxon exact p")
    split = sg.split_dataset([f"p{i}" for i in range(20)], seed=1)
    check([len(split[k]) for k in ("seg_train", "disc_train", "validation", "test")] == [7, 7, 3, 3], "split counts")

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        check(sg.generate_dataset(str(data), n_subjects=8, per_subject=2, seed=0) == 16, "synthetic dataset")
        check(sg.make_scribbles(str(data)) == 16, "scribbles for every image")
        cfg = sg.Config(
            f"data_root = {data}\nimage_size = 32\nnum_classes = 3\ndepths = 2\n"
            "encoder_filters = 4,8,8\ndisc_filters = 4,8,8\ndisc_compress_channels = 2\n"
            "batch_size = 2\nmax_epochs = 2\n"
        )
        cfg.set("split_seed", "3")
        check(cfg.get("max_epochs") == "2", "config round trip")
        run = Path(tmp) / "run"
        result = sg.train(cfg, str(run))
        check(result["epochs"] == 2 and (run / "metrics.csv").exists(), "training run")
        report = sg.evaluate(str(run))
        check(report["images"] > 0 and 0.0 <= report["dice_mean"] <= 1.0, "evaluation report")

        seg = sg.Segmentor.from_checkpoint(str(run / "best.ckpt"))
        image = [[0.0] * 32 for _ in range(32)]
        probs = seg.predict(image)
        check(len(probs) == 3 and abs(sum(probs[k][5][7] for k in range(3)) - 1) < 1e-5, "softmax output")
        labels = seg.segment(image)
        check(len(labels) == 32 and max(max(r) for r in labels) < 3, "hard segmentation")
        disc = sg.Discriminator(cfg, (32, 32), seed=1)
        check(math.isfinite(disc.score([[0] * 32 for _ in range(32)])), "discriminator score")

    try:
        sg.Config("no_such_key = 1")
    except ValueError:
        print("ok  unknown config key rejected")
    else:
        raise SystemExit("FAIL: unknown config key accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
