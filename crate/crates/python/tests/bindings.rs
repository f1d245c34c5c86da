use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &str) {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(fetometry_py::fetometry_module)(py);
        let globals = PyDict::new(py);
        globals.set_item("fm", m).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        py.run(&code, Some(&globals), None).unwrap();
    });
}

#[test]
fn geometry_round_trips() {
    with_module(
        r#"
import math
assert abs(fm.ellipse_circumference(10.0, 10.0) - 20 * math.pi) < 1e-9
e = fm.EllipseParams(32.0, 32.0, 20.0, 12.0, 0.4)
f = fm.fit_ellipse_mask(64, 64, e.rasterize(64, 64))
assert abs(f.a - 20.0) / 20.0 < 0.02 and abs(f.b - 12.0) / 12.0 < 0.02, f
r = fm.min_area_rect([(0.0, 0.0), (10.0, 0.0), (10.0, 4.0), (0.0, 4.0)])
assert abs(r.length - 10.0) < 1e-9 and abs(r.breadth - 4.0) < 1e-9
c = fm.estimate_biometric(64, 64, e.rasterize(64, 64), "brain")
assert abs(c - 0.5 * e.circumference()) / c < 0.02
"#,
    );
}

#[test]
fn errors_map_to_python_exceptions() {
    with_module(
        r#"
for call, exc in [
    (lambda: fm.fit_ellipse_mask(4, 4, [0] * 16), fm.FitError),
    (lambda: fm.fit_ellipse_mask(4, 4, [0] * 3), ValueError),
    (lambda: fm.EllipseParams(0.0, 0.0, -1.0, 1.0, 0.0), ValueError),
    (lambda: fm.estimate_biometric(4, 4, [1] * 16, "spleen"), ValueError),
    (lambda: fm.Model.load("/nonexistent/model.bin"), OSError),
]:
    try:
        call()
    except exc:
        pass
    else:
        raise AssertionError(f"expected {exc}")
assert issubclass(fm.FitError, ValueError)
"#,
    );
}

#[test]
fn model_shapes_and_counts() {
    with_module(
        r#"
m = fm.Model()
assert m.parameter_count == 147228 and m.input_size == 64
t = fm.Model(depth=2, base=2, size=16, seed=1)
seg, cls = t.predict([0.5] * (2 * 16 * 16), 2)
assert len(seg) == 2 * 16 * 16 and len(cls) == 6
assert fm.run_cli(["fit", "--help"]) == 0
"#,
    );
}
