#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use almanac::entities::{reassociate_charters, CorrectionLog};
use almanac::ingest::load_corpus;
use almanac::model::{AlmanacConfig, Store};
use almanac::quality::{screen_outliers, QaReport};
use almanac::synth::{generate_corpus, GroundTruth, SynthConfig};

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub corpus_dir: PathBuf,
    pub truth: GroundTruth,
    pub raw: Store,
    pub resolved: Store,
    pub log: CorrectionLog,
    pub screened: Store,
    pub report: QaReport,
}

pub fn small_config() -> SynthConfig {
    SynthConfig {
        n_districts: 120,
        n_years: 6,
        seed: 42,
        ..SynthConfig::default()
    }
}

/// A small corpus run through ingest, re-association and screening once
/// per test binary.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let truth = generate_corpus(&small_config(), &corpus_dir).unwrap();
        let cfg = AlmanacConfig::default();
        let (raw, errors) = load_corpus(&corpus_dir, &cfg).unwrap();
        assert!(errors.is_empty(), "{errors:?}");
        let (resolved, log) = reassociate_charters(&raw).unwrap();
        let (screened, report) = screen_outliers(&resolved, &cfg);
        Fixture {
            _dir: dir,
            corpus_dir,
            truth,
            raw,
            resolved,
            log,
            screened,
            report,
        }
    })
}
