use pyo3::prelude::*;
use pyo3::types::PyModule;

fn module(py: Python<'_>) -> Bound<'_, PyModule> {
    pyo3::wrap_pymodule!(almanac_py::almanac_py)(py).into_bound(py).cast_into().unwrap()
}

#[test]
fn statistics_are_exposed() {
    Python::attach(|py| {
        let m = module(py);
        let r: f64 = m.getattr("pearson_r").unwrap().call1((vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0])).unwrap().extract().unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let (median, scale): (f64, f64) = m.getattr("robust_scale").unwrap().call1((vec![10.0, 20.0, 30.0],)).unwrap().extract().unwrap();
        assert_eq!(median, 20.0);
        assert!((scale - 14.826).abs() < 1e-12);
        let err = m.getattr("pearson_r").unwrap().call1((vec![1.0], vec![1.0])).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
    });
}

#[test]
fn corpus_to_peers() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    Python::attach(|py| {
        let m = module(py);
        let spikes: usize = m.getattr("synth").unwrap().call1((corpus.clone(), 60, 4, 5)).unwrap().extract().unwrap();
        assert!(spikes > 0);
        let a = m.getattr("Almanac").unwrap().call_method1("from_corpus", (corpus,)).unwrap();
        let ids: Vec<String> = a.call_method0("districts").unwrap().extract().unwrap();
        assert_eq!(ids.len(), 60);
        let peers: String = a.call_method1("peer_set", (ids[0].as_str(),)).unwrap().extract().unwrap();
        assert!(peers.starts_with('{') && peers.contains("\"members\""));
        let lb: String = a.call_method1("leaderboard", (ids[0].as_str(), "grad_rate", 2016)).unwrap().extract().unwrap();
        assert!(lb.contains("\"rank\""));
        let err = a.call_method1("peer_set", ("NOPE",)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyKeyError>(py));
    });
}
