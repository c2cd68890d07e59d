use pyo3::prelude::*;
use pyo3::types::PyDict;
use rstar4d_py::rstar4d_module;

const SCRIPT: &str = r#"
import rstar4d
dims, spacing = [4, 16, 16], [20.0, 20.0, 20.0]
ph = rstar4d.Phantom.thorax()
v = ph.sample(0.0, dims, spacing)
assert v.dims == dims and len(v.data()) == 4 * 16 * 16
assert rstar4d.ssim(v, v) == 1.0
sig = rstar4d.BreathingSignal.synth(mean_period=5.0)
geo = rstar4d.ScanGeometry.desk()
labels = sig.phase_sort(geo.view_times(), 10)
counts = [labels.count(p) for p in range(10)]
try:
    rstar4d.Volume(dims, spacing, [0.0])
    raised = False
except ValueError:
    raised = True
"#;

#[test]
fn module_runs_inside_an_embedded_interpreter() {
    pyo3::append_to_inittab!(rstar4d_module);
    Python::initialize();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        py.run(&std::ffi::CString::new(SCRIPT).unwrap(), Some(&globals), None).unwrap();
        let counts: Vec<usize> = globals.get_item("counts").unwrap().unwrap().extract().unwrap();
        assert_eq!(counts, vec![24; 10]);
        let raised: bool = globals.get_item("raised").unwrap().unwrap().extract().unwrap();
        assert!(raised, "short data must raise ValueError");
    });
}
