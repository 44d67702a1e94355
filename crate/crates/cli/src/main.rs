//! `almanac`: synth → ingest → resolve → qa → build → serve.
//!
//! Exit status: 0 success, 1 data or validation errors, 2 I/O or
//! environment errors, 3 bad usage.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use almanac::entities::reassociate_charters;
use almanac::ingest::{load_corpus_ordered, OBSERVATION_TABLES};
use almanac::model::{AlmanacConfig, EntityId, Store};
use almanac::peers::PeerIndex;
use almanac::quality::screen_outliers;
use almanac::storedir::{config_hash, load_store, save_store, write_json, Stage};
use almanac::synth::{generate_corpus, SynthConfig};
use almanac::workbook::{bundle_file_name, to_canonical_json, write_bundle, Workbook};
use almanac::AlmanacError;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "almanac", version, about = "District comparative analytics pipeline")]
struct Cli {
    /// Store directory shared by every stage after synth.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// TOML file overriding configuration defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// No summary line on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a ground-truth sidecar.
    Synth(SynthArgs),
    /// Validate a corpus directory and load it into a store.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Move direct-funded charters under their operators.
    Resolve,
    /// Suppress untenable outliers.
    Qa {
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        single_rule_threshold: Option<f64>,
    },
    /// Print one district's peer set as JSON.
    Peers {
        #[arg(long)]
        district: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write workbook bundles.
    Build(BuildArgs),
    /// Serve the store and its bundles over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        ui: Option<PathBuf>,
        /// Defaults to `<store>/bundles`.
        #[arg(long)]
        bundles: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 956)]
    districts: usize,
    #[arg(long, default_value_t = 10)]
    years: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.002)]
    spike_rate: f64,
    #[arg(long, default_value_t = 0.10)]
    charter_share: f64,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "target")]
struct BuildTarget {
    #[arg(long)]
    district: Option<String>,
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    target: BuildTarget,
    /// Defaults to `<store>/bundles`.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Data(String),
    Io(String),
    Usage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => 1,
            Failure::Io(_) => 2,
            Failure::Usage(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Data(m) | Failure::Io(m) | Failure::Usage(m) => m,
        }
    }
}

impl From<AlmanacError> for Failure {
    fn from(e: AlmanacError) -> Self {
        let m = e.to_string();
        match e {
            AlmanacError::Io { .. } | AlmanacError::MissingTable { .. } | AlmanacError::StoreFormat(_) => Failure::Io(m),
            _ => Failure::Data(m),
        }
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    store: Option<PathBuf>,
    config: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn store_dir(&self) -> Result<&Path, Failure> {
        self.store
            .as_deref()
            .ok_or_else(|| Failure::Usage("--store is required for this command".into()))
    }

    /// The config file if given, otherwise `fallback`.
    fn config_or(&self, fallback: &AlmanacConfig) -> Result<AlmanacConfig, Failure> {
        let Some(path) = &self.config else {
            return Ok(fallback.clone());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        let cfg: AlmanacConfig =
            toml::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn load(&self, stage: Stage) -> Result<Store, Failure> {
        let (mut store, manifest) = load_store(self.store_dir()?)?;
        manifest.stage.require(stage)?;
        let cfg = self.config_or(store.config())?;
        store.set_config(cfg);
        Ok(store)
    }

    fn summary<T: Serialize>(&self, value: &T) {
        if !self.quiet {
            if let Ok(text) = serde_json::to_string(value) {
                eprintln!("{text}");
            }
        }
    }
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Outcome {
    let cfg = SynthConfig {
        n_districts: a.districts,
        n_years: a.years,
        seed: a.seed,
        spike_rate: a.spike_rate,
        charter_share: a.charter_share,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let truth = generate_corpus(&cfg, &a.out)?;
    ctx.summary(&serde_json::json!({
        "command": "synth",
        "out": a.out,
        "districts": cfg.n_districts,
        "years": cfg.n_years,
        "injected_spikes": truth.injected_spikes.len(),
        "direct_funded_charters": truth.charter_links.len(),
    }));
    Ok(())
}

fn ingest(ctx: &Ctx, input: &Path) -> Outcome {
    let dir = ctx.store_dir()?;
    let cfg = ctx.config_or(&AlmanacConfig::default())?;
    let outcome = load_corpus_ordered(input, &cfg, &OBSERVATION_TABLES)?;
    for e in &outcome.errors {
        eprintln!("{}{e}", if e.kind.is_fatal() { "" } else { "warning: " });
    }
    let fatal = outcome.fatal_errors().count();
    ctx.summary(&serde_json::json!({
        "command": "ingest",
        "tables": outcome.counts,
        "errors": fatal,
        "warnings": outcome.errors.len() - fatal,
    }));
    if fatal > 0 {
        return Err(Failure::Data(format!("{fatal} invalid rows in {}", input.display())));
    }
    let store = outcome.store.expect("ingest builds a store");
    let violations = almanac::model::validate_store(&store);
    if !violations.is_empty() {
        return Err(Failure::Data(format!("store fails validation: {violations:?}")));
    }
    save_store(dir, &store, Stage::Ingested)?;
    Ok(())
}

fn resolve(ctx: &Ctx) -> Outcome {
    let dir = ctx.store_dir()?;
    let store = ctx.load(Stage::Ingested)?;
    let (resolved, log) = reassociate_charters(&store)?;
    save_store(dir, &resolved, Stage::Resolved)?;
    write_json(dir, "corrections.json", &log)?;
    ctx.summary(&serde_json::json!({
        "command": "resolve",
        "moves": log.moves.len(),
        "affected_cells": log.affected_cells,
    }));
    Ok(())
}

fn qa(ctx: &Ctx, threshold: Option<f64>, single: Option<f64>) -> Outcome {
    let dir = ctx.store_dir()?;
    let mut store = ctx.load(Stage::Resolved)?;
    let mut cfg = store.config().clone();
    if let Some(t) = threshold {
        cfg.outlier_threshold = t;
    }
    if let Some(t) = single {
        cfg.single_rule_threshold = t;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    store.set_config(cfg.clone());
    let (screened, report) = screen_outliers(&store, &cfg);
    save_store(dir, &screened, Stage::Screened)?;
    write_json(dir, "qa_report.json", &report)?;
    ctx.summary(&serde_json::json!({
        "command": "qa",
        "screened_cells": report.screened_cells,
        "suppressed": report.suppression_count,
    }));
    Ok(())
}

fn peers(ctx: &Ctx, district: &str, k: Option<usize>) -> Outcome {
    let store = ctx.load(Stage::Screened)?;
    let index = PeerIndex::build(&store, store.config())?;
    let id = EntityId::new(district);
    let set = match k {
        Some(0) => return Err(Failure::Usage("--k must be at least 1".into())),
        Some(k) => index.peer_set_k(&id, k)?,
        None => index.peer_set(&id)?,
    };
    print!("{}", to_canonical_json(&set)?);
    Ok(())
}

#[derive(Serialize)]
struct IneligibleDistrict {
    district_id: EntityId,
    reason: String,
}

#[derive(Serialize)]
struct BuildReport {
    catalog_version: &'static str,
    config_hash: String,
    eligible_count: usize,
    bundles: Vec<String>,
    ineligible: Vec<IneligibleDistrict>,
}

fn build(ctx: &Ctx, a: &BuildArgs) -> Outcome {
    let dir = ctx.store_dir()?;
    let out = a.out.clone().unwrap_or_else(|| dir.join("bundles"));
    let store = ctx.load(Stage::Screened)?;
    let wb = Workbook::new(&store, store.config())?;
    std::fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;

    let targets: Vec<EntityId> = match &a.target.district {
        Some(d) => vec![EntityId::new(d)],
        None => wb.peer_index().eligible(),
    };
    let written: Vec<String> = targets
        .par_iter()
        .map(|id| {
            let name = bundle_file_name(id);
            write_bundle(&wb.build(id)?, &out.join(&name))?;
            Ok(name)
        })
        .collect::<almanac::Result<_>>()?;

    let ineligible: Vec<IneligibleDistrict> = wb
        .peer_index()
        .ineligible()
        .iter()
        .map(|(d, r)| IneligibleDistrict { district_id: d.clone(), reason: r.clone() })
        .collect();
    if a.target.all {
        let report = BuildReport {
            catalog_version: almanac::model::CATALOG_VERSION,
            config_hash: config_hash(store.config())?,
            eligible_count: wb.peer_index().eligible().len(),
            bundles: written.clone(),
            ineligible,
        };
        write_json(&out, "build_report.json", &report)?;
    }
    ctx.summary(&serde_json::json!({
        "command": "build",
        "out": out,
        "bundles": written.len(),
        "ineligible": wb.peer_index().ineligible().len(),
    }));
    Ok(())
}

fn serve(ctx: &Ctx, port: u16, ui: Option<&Path>, bundles: Option<&Path>) -> Outcome {
    let dir = ctx.store_dir()?;
    let bundles = bundles.map(Path::to_path_buf).unwrap_or_else(|| dir.join("bundles"));
    let snapshot = Arc::new(almanac_service::Snapshot::load(dir, bundles)?);
    let app = almanac_service::router(snapshot, ui);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Io(e.to_string()))?;
    runtime.block_on(async {
        let addr = SocketAddr::from(([127, 0, 0, 1], port));
        let listener = almanac_service::bind(addr)
            .await
            .map_err(|e| Failure::Io(format!("cannot listen on {addr}: {e}")))?;
        ctx.summary(&serde_json::json!({ "command": "serve", "listening": addr.to_string() }));
        almanac_service::serve(listener, app).await.map_err(|e| Failure::Io(e.to_string()))
    })
}

fn run(cli: Cli) -> Outcome {
    let ctx = Ctx {
        store: cli.store,
        config: cli.config,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Ingest { input } => ingest(&ctx, input),
        Command::Resolve => resolve(&ctx),
        Command::Qa { threshold, single_rule_threshold } => qa(&ctx, *threshold, *single_rule_threshold),
        Command::Peers { district, k } => peers(&ctx, district, *k),
        Command::Build(a) => build(&ctx, a),
        Command::Serve { port, ui, bundles } => serve(&ctx, *port, ui.as_deref(), bundles.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind::{DisplayHelp, DisplayVersion};
            let _ = e.print();
            return match e.kind() {
                DisplayHelp | DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(3),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
