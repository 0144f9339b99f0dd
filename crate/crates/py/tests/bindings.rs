use std::ffi::CString;

use pyo3::prelude::*;
use scribblegate_py::scribblegate_py;

fn run(code: &str) {
    pyo3::append_to_inittab!(scribblegate_py);
    Python::initialize();
    Python::attach(|py| {
        let code = CString::new(code).unwrap();
        py.run(&code, None, None).map_err(|e| e.display(py)).expect("python snippet failed");
    });
}

#[test]
fn bindings_from_python() {
    run(r#"
import math
import scribblegate_py as sg

assert sg.cyclical_lr(20) == sg.cyclical_lr(0)
v, g = sg.wpce_loss([[[0.25]], [[0.75]]], [[1]], [1.0, 0.5])
assert abs(v + 0.5 * math.log(0.75)) < 1e-9
assert sg.class_weights([[0, 0, 0, 1]], 2) == [0.25, 0.75]
assert sg.dice_per_class([[1, 0]], [[0, 0]], 3) == [(0.0, False), (1.0, True)]
assert sg.hausdorff([[True]], [[False]]) is None
assert sg.dynamic_a0(2.0, 1.0) == 0.5
try:
    sg.wpce_loss([[[0.5]], [[0.5]]], [[255]])
    raise AssertionError("empty scribble accepted")
except ValueError:
    pass
cfg = sg.Config()
assert cfg.get("batch_size") == "12"
cfg.set("image_size", "32")
cfg.set("depths", "2")
cfg.set("encoder_filters", "2,4,4")
cfg.set("num_classes", "3")
seg = sg.Segmentor(cfg, seed=1)
probs = seg.predict([[0.1] * 16 for _ in range(16)])
assert len(probs) == 3 and len(probs[0]) == 16
try:
    seg.predict([[0.1] * 15 for _ in range(15)])
    raise AssertionError("indivisible size accepted")
except ValueError:
    pass
"#);
}
