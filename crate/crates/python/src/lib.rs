//! Python bindings: build a screened store from a corpus directory and query
//! peers, leaderboards and bundles as JSON text.

use std::path::PathBuf;

use almanac::entities::reassociate_charters;
use almanac::ingest::load_corpus;
use almanac::model::{AlmanacConfig, EntityId, Store};
use almanac::peers::PeerIndex;
use almanac::quality::screen_outliers;
use almanac::synth::{generate_corpus, SynthConfig};
use almanac::workbook::{leaderboard_for, to_canonical_json, Workbook};
use almanac::AlmanacError;
use pyo3::exceptions::{PyKeyError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: AlmanacError) -> PyErr {
    let m = e.to_string();
    match e {
        AlmanacError::NotFound(_) | AlmanacError::Ineligible { .. } => PyKeyError::new_err(m),
        AlmanacError::Io { .. } | AlmanacError::MissingTable { .. } => PyOSError::new_err(m),
        _ => PyValueError::new_err(m),
    }
}

/// Writes a synthetic corpus; returns the number of injected spikes.
#[pyfunction]
#[pyo3(signature = (out, districts=956, years=10, seed=42))]
fn synth(out: PathBuf, districts: usize, years: usize, seed: u64) -> PyResult<usize> {
    let cfg = SynthConfig { n_districts: districts, n_years: years, seed, ..SynthConfig::default() };
    let truth = generate_corpus(&cfg, &out).map_err(to_py)?;
    Ok(truth.injected_spikes.len())
}

#[pyfunction]
fn pearson_r(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    almanac::metrics::pearson_r(&xs, &ys).map_err(to_py)
}

/// `(median, scale)` of the values.
#[pyfunction]
fn robust_scale(values: Vec<f64>) -> PyResult<(f64, f64)> {
    let s = almanac::quality::robust_scale(&values).map_err(to_py)?;
    Ok((s.median, s.scale))
}

/// A corpus taken through ingest, charter re-association and screening.
#[pyclass(frozen)]
struct Almanac {
    store: Store,
    index: PeerIndex,
    suppressed: usize,
}

#[pymethods]
impl Almanac {
    #[staticmethod]
    fn from_corpus(dir: PathBuf) -> PyResult<Self> {
        let cfg = AlmanacConfig::default();
        let (raw, errors) = load_corpus(&dir, &cfg).map_err(to_py)?;
        if let Some(e) = errors.iter().find(|e| e.kind.is_fatal()) {
            return Err(PyValueError::new_err(format!("{} invalid rows, first: {e}", errors.len())));
        }
        let (resolved, _) = reassociate_charters(&raw).map_err(to_py)?;
        let (store, report) = screen_outliers(&resolved, &cfg);
        let index = PeerIndex::build(&store, &cfg).map_err(to_py)?;
        Ok(Almanac { store, index, suppressed: report.suppression_count })
    }

    #[getter]
    fn suppressed(&self) -> usize {
        self.suppressed
    }

    fn districts(&self) -> Vec<String> {
        self.store.districts().map(|d| d.id.to_string()).collect()
    }

    fn peer_set(&self, district: &str) -> PyResult<String> {
        let set = self.index.peer_set(&EntityId::new(district)).map_err(to_py)?;
        to_canonical_json(&set).map_err(to_py)
    }

    #[pyo3(signature = (district, metric, year, subgroup="all"))]
    fn leaderboard(&self, district: &str, metric: &str, year: i32, subgroup: &str) -> PyResult<String> {
        let metric = almanac::metrics::require_metric(metric).map_err(to_py)?;
        let sg = subgroup.parse().map_err(|_| PyValueError::new_err(format!("unknown subgroup {subgroup}")))?;
        let peers = self.index.peer_set(&EntityId::new(district)).map_err(to_py)?;
        let lb = leaderboard_for(&self.store, &peers, metric, year, sg).map_err(to_py)?;
        to_canonical_json(&lb).map_err(to_py)
    }

    fn bundle(&self, district: &str) -> PyResult<String> {
        let wb = Workbook::new(&self.store, self.store.config()).map_err(to_py)?;
        let b = wb.build(&EntityId::new(district)).map_err(to_py)?;
        to_canonical_json(&b).map_err(to_py)
    }
}

#[pymodule]
pub fn almanac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_r, m)?)?;
    m.add_function(wrap_pyfunction!(robust_scale, m)?)?;
    m.add_class::<Almanac>()?;
    Ok(())
}
