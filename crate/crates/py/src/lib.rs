//! Python bindings: fixed-point codec, additive sharing, secure sums,
//! confined models, configured runs and sweeps, and the privacy audit.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use cgd::engine::{cgd_step, ConfinedModel, InitPolicy};
use cgd::harness::{self, RunConfig, SweepAxis};
use cgd::linalg::Matrix;
use cgd::privacy::{self, AuditConfig};
use cgd::ring::{self, FixedPointCodec, ParticipantId, RingVec};
use cgd::transport::{LocalBus, Topology};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn py_err(e: cgd::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Fixed-point encoding of reals into the 32-bit ring.
#[pyclass(name = "Codec", frozen)]
struct PyCodec(FixedPointCodec);

#[pymethods]
impl PyCodec {
    #[new]
    #[pyo3(signature = (frac_bits = 16, clip = 64.0))]
    fn new(frac_bits: u32, clip: f64) -> PyResult<Self> {
        FixedPointCodec::new(frac_bits, clip).map(PyCodec).map_err(py_err)
    }

    #[getter]
    fn frac_bits(&self) -> u32 {
        self.0.frac_bits()
    }

    #[getter]
    fn clip(&self) -> f64 {
        self.0.clip_bound()
    }

    /// Largest number of clipped values whose sum cannot wrap.
    fn max_addends(&self) -> usize {
        self.0.max_addends()
    }

    fn encode(&self, x: Vec<f64>) -> Vec<u32> {
        self.0.encode(&x).into_inner()
    }

    fn decode(&self, v: Vec<u32>) -> Vec<f64> {
        self.0.decode(&RingVec::new(v))
    }
}

/// Splits `secret` into `m` additive shares.
#[pyfunction]
#[pyo3(signature = (secret, m, seed = 0))]
fn share(secret: Vec<u32>, m: u16, seed: u64) -> PyResult<Vec<Vec<u32>>> {
    let recipients: Vec<ParticipantId> = (0..m).map(ParticipantId).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let set = ring::share(&RingVec::new(secret), &recipients, &mut rng).map_err(py_err)?;
    Ok(set.shares().into_iter().map(RingVec::into_inner).collect())
}

#[pyfunction]
fn reconstruct(shares: Vec<Vec<u32>>) -> PyResult<Vec<u32>> {
    let shares: Vec<RingVec> = shares.into_iter().map(RingVec::new).collect();
    ring::reconstruct(&shares).map(RingVec::into_inner).map_err(py_err)
}

/// Runs the secure-sum protocol among `len(inputs)` in-process parties.
#[pyfunction]
#[pyo3(signature = (inputs, codec = None, aggregator = false, seed = 0))]
fn secure_sum(inputs: Vec<Vec<f64>>, codec: Option<&PyCodec>, aggregator: bool, seed: u64) -> PyResult<Vec<f64>> {
    let codec = codec.map_or_else(FixedPointCodec::default, |c| c.0);
    let map: BTreeMap<ParticipantId, Vec<f64>> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, x)| (ParticipantId(i as u16), x))
        .collect();
    let topology = if aggregator {
        Topology::Aggregator(ParticipantId(map.len() as u16))
    } else {
        Topology::AllToAll
    };
    let mut bus = LocalBus::new(seed).with_topology(topology);
    ring::secure_sum(&map, &codec, &mut bus).map_err(py_err)
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Matrix::new(r, c, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// A participant's private model.
#[pyclass(name = "ConfinedModel")]
struct PyModel(ConfinedModel);

#[pymethods]
impl PyModel {
    /// `delta · N(0, 1)` weights from the owner's seeded stream.
    #[staticmethod]
    #[pyo3(signature = (owner, shapes, delta = 0.1, seed = 0))]
    fn init(owner: u16, shapes: Vec<(usize, usize)>, delta: f64, seed: u64) -> PyResult<Self> {
        let policy = InitPolicy::new(delta, seed).map_err(py_err)?;
        Ok(PyModel(policy.init(ParticipantId(owner), &shapes)))
    }

    #[new]
    fn new(owner: u16, layers: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let layers = layers.into_iter().map(to_matrix).collect::<PyResult<Vec<_>>>()?;
        Ok(PyModel(ConfinedModel::new(ParticipantId(owner), layers)))
    }

    #[getter]
    fn owner(&self) -> u16 {
        self.0.owner().0
    }

    #[getter]
    fn layers(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.layers().iter().map(from_matrix).collect()
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.0.shapes()
    }

    fn flatten(&self) -> Vec<f64> {
        self.0.flatten()
    }

    /// `w ← w − alpha · s` with the summed gradient `s`, layer by layer.
    fn step(&mut self, summed: Vec<Vec<Vec<f64>>>, alpha: f64) -> PyResult<()> {
        let summed = summed.into_iter().map(to_matrix).collect::<PyResult<Vec<_>>>()?;
        cgd_step(&mut self.0, &summed, alpha).map_err(py_err)
    }
}

fn resolve(profile: Option<&str>, overrides: Option<BTreeMap<String, String>>) -> PyResult<RunConfig> {
    let pairs: Vec<(String, String)> = overrides.unwrap_or_default().into_iter().collect();
    RunConfig::resolve(profile, None, &pairs).map_err(py_err)
}

/// Trains once; returns `(csv, summary_json)`.
#[pyfunction]
#[pyo3(signature = (profile = None, overrides = None))]
fn run(py: Python<'_>, profile: Option<&str>, overrides: Option<BTreeMap<String, String>>) -> PyResult<(String, String)> {
    let cfg = resolve(profile, overrides)?;
    let report = py.detach(|| harness::run(&cfg)).map_err(py_err)?;
    Ok((report.csv(), report.summary.json()))
}

/// One run per value along `axis` (delta, mu, or grid); returns the merged CSV.
#[pyfunction]
#[pyo3(signature = (axis, values, profile = None, overrides = None))]
fn sweep(
    py: Python<'_>,
    axis: &str,
    values: Vec<String>,
    profile: Option<&str>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<String> {
    let cfg = resolve(profile, overrides)?;
    let axis: SweepAxis = axis.parse().map_err(py_err)?;
    Ok(py.detach(|| harness::sweep(&cfg, axis, &values)).csv)
}

/// Resolved configuration rendered as `key = value` lines.
#[pyfunction]
#[pyo3(signature = (profile = None, overrides = None))]
fn config(profile: Option<&str>, overrides: Option<BTreeMap<String, String>>) -> PyResult<String> {
    Ok(resolve(profile, overrides)?.render())
}

/// Privacy audit on a synthetic federation; returns the verdict as JSON.
#[pyfunction]
#[pyo3(signature = (participants = 5, rounds = 50, seed = 7))]
fn audit(py: Python<'_>, participants: u16, rounds: u32, seed: u64) -> PyResult<String> {
    let cfg = AuditConfig {
        participants,
        rounds,
        seed,
        ..AuditConfig::default()
    };
    py.detach(|| privacy::audit(&cfg)).map(|v| v.json()).map_err(py_err)
}

#[pymodule]
pub fn cgd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCodec>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(share, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(secure_sum, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(config, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    Ok(())
}
