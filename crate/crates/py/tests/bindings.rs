//! Exercises the extension module through an embedded interpreter.

use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

#[test]
fn module_round_trips() {
    Python::initialize();
    Python::attach(|py| {
        let m = wrap_pymodule!(cgd_py::cgd_py)(py);
        let locals = PyDict::new(py);
        locals.set_item("cgd", m).unwrap();
        py.run(
            cr#"
c = cgd.Codec(16, 64.0)
assert c.max_addends() == 511
assert c.decode(c.encode([0.5, -1.25])) == [0.5, -1.25]
s = cgd.share([1, 2, 4294967295], 4, seed=9)
assert cgd.reconstruct(s) == [1, 2, 4294967295]
a = cgd.secure_sum([[1.0, 2.0], [3.0, -4.0], [0.5, 0.5]], seed=1)
b = cgd.secure_sum([[1.0, 2.0], [3.0, -4.0], [0.5, 0.5]], aggregator=True, seed=1)
assert a == b == [4.5, -1.5], a
m = cgd.ConfinedModel(2, [[[1.0, 2.0]], [[3.0], [4.0]]])
m.step([[[1.0, 1.0]], [[2.0], [2.0]]], 0.5)
assert m.layers == [[[0.5, 1.5]], [[2.0], [3.0]]] and m.owner == 2
assert "mode = cgd" in cgd.config(overrides={"mode": "cgd"})
try:
    cgd.config(overrides={"bogus": "1"})
    raise AssertionError("unknown key accepted")
except ValueError:
    pass
"#,
            None,
            Some(&locals),
        )
        .unwrap();
    });
}
