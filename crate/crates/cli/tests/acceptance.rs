//! Full-scale acceptance run: 956 districts over ten years, built twice
//! through the `almanac` binary, then checked criterion by criterion.
//!
//! Prints one `PASS`/`FAIL` line per criterion straight to stderr so the
//! lines survive output capture.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use almanac::entities::reassociate_charters;
use almanac::ingest::load_corpus;
use almanac::metrics::{metric_value, ols_fit, pearson_r, per_pupil_revenue, PerPupilMethod};
use almanac::model::{
    metric_catalog, AggregationRule, AlmanacConfig, EntityId, EntityKind, Governance, MetricId, MetricSource,
    ObsKey, ObsStatus, Polarity, Store, Subgroup,
};
use almanac::peers::PeerIndex;
use almanac::quality::screen_outliers;
use almanac::storedir::load_store;
use almanac::synth::{district_year_key, read_ground_truth, GroundTruth};
use almanac::workbook::{leaderboard, parse_bundle, to_canonical_json, WorkbookBundle};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DISTRICTS: &str = "956";
const YEARS: &str = "10";
const SEED: &str = "42";
const PIPELINE_BUDGET: Duration = Duration::from_secs(300);
const PEER_SAMPLE: usize = 50;
const K: usize = 15;
const RATIO_TOLERANCE: f64 = 0.005;
const MIN_RECALL: f64 = 0.95;
const MAX_FALSE_RATE: f64 = 0.01;
const STAT_CASES: usize = 100;
const STAT_TOLERANCE: f64 = 1e-9;
/// Sums of fractional FTE in a different order differ in the last bits.
const CONSERVATION_TOLERANCE: f64 = 1e-12;
const SERVICE_TUPLES: usize = 20;
const VALUE_RECHECK_BUNDLES: usize = 50;
/// Default single-rule threshold over default two-rule threshold.
const SINGLE_RULE_RATIO: f64 = 5.0 / 3.5;

struct Ledger {
    failed: Vec<String>,
}

impl Ledger {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
        let _ = std::io::stderr().write_all(line.as_bytes());
        if !pass {
            self.failed.push(name.to_string());
        }
    }
}

fn almanac(args: &[&str], cwd: &Path) -> bool {
    let out = Command::new(env!("CARGO_BIN_EXE_almanac"))
        .args(args)
        .arg("--quiet")
        .current_dir(cwd)
        .output()
        .expect("run almanac");
    if !out.status.success() {
        let _ = std::io::stderr().write_all(&out.stderr);
    }
    out.status.success()
}

/// Runs every stage; returns whether all exited 0 and the elapsed time.
fn pipeline(dir: &Path) -> (bool, Duration) {
    let start = Instant::now();
    let ok = [
        &["synth", "--out", "corpus", "--districts", DISTRICTS, "--years", YEARS, "--seed", SEED][..],
        &["ingest", "--in", "corpus", "--store", "store"],
        &["resolve", "--store", "store"],
        &["qa", "--store", "store"],
        &["build", "--store", "store", "--all", "--out", "bundles"],
    ]
    .iter()
    .all(|args| almanac(args, dir));
    (ok, start.elapsed())
}

fn bundle_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".bundle.json"))
        .collect();
    files.sort();
    files
}

fn without_timestamp(text: &str) -> String {
    let key = "\"generated_at\":\"";
    match text.find(key) {
        Some(i) => {
            let start = i + key.len();
            let end = start + text[start..].find('"').unwrap();
            format!("{}{}", &text[..start], &text[end..])
        }
        None => text.to_string(),
    }
}

fn m(id: &str) -> MetricId {
    MetricId::lookup(id).unwrap()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Exhaustive nearest-k over every district of the client's grade span,
/// computed from the store without the peer module.
fn brute_force_peers(store: &Store, client: &EntityId, k: usize) -> Vec<EntityId> {
    let year = store.last_year();
    let span = store.district(client).unwrap().grade_span;
    let mut pool: Vec<(EntityId, [f64; 4])> = Vec::new();
    for d in store.districts().filter(|d| d.grade_span == span) {
        let enrollment: f64 = store
            .schools_authorized_by(&d.id)
            .iter()
            .filter(|s| store.school(s).unwrap().governance != Governance::CharterDirectFunded)
            .filter_map(|s| store.value(s, m("students"), year, Subgroup::All))
            .map(f64::round)
            .sum();
        let f = |id: &str| store.value(&d.id, m(id), year, Subgroup::All);
        if let (true, Some(a), Some(b), Some(c)) = (enrollment > 0.0, f("parent_ed_index"), f("pct_el"), f("pct_frpm")) {
            pool.push((d.id.clone(), [enrollment.ln(), a, b, c]));
        }
    }
    let mut center = [0.0; 4];
    let mut scale = [0.0; 4];
    for j in 0..4 {
        let mut col: Vec<f64> = pool.iter().map(|p| p.1[j]).collect();
        center[j] = median(&mut col);
        let mut dev: Vec<f64> = col.iter().map(|x| (x - center[j]).abs()).collect();
        scale[j] = 1.4826 * median(&mut dev);
    }
    let z = |x: &[f64; 4]| -> [f64; 4] {
        std::array::from_fn(|j| if scale[j] > 0.0 { (x[j] - center[j]) / scale[j] } else { 0.0 })
    };
    let cz = z(&pool.iter().find(|p| &p.0 == client).unwrap().1);
    let mut ranked: Vec<(f64, EntityId)> = pool
        .iter()
        .filter(|p| &p.0 != client)
        .map(|p| {
            let pz = z(&p.1);
            ((0..4).map(|j| (cz[j] - pz[j]).powi(2)).sum::<f64>().sqrt(), p.0.clone())
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    ranked.into_iter().take(k).map(|r| r.1).collect()
}

fn sum_metrics() -> Vec<MetricId> {
    metric_catalog().into_iter().filter(|d| d.aggregation == AggregationRule::Sum).map(|d| d.id).collect()
}

/// Statewide total of an additive metric over districts and operators.
fn statewide(store: &Store, metric: MetricId, year: i32, sg: Subgroup) -> f64 {
    let districts = store.districts().map(|d| &d.id);
    let operators = store.other_entities().filter(|e| e.kind == EntityKind::Cmo).map(|e| &e.id);
    districts.chain(operators).filter_map(|e| store.value(e, metric, year, sg)).sum()
}

fn conservation(raw: &Store, resolved: &Store) -> (bool, String) {
    let mut worst: f64 = 0.0;
    let mut slots = 0;
    for metric in sum_metrics() {
        for y in raw.years() {
            for &sg in metric.def().subgroups() {
                let before = statewide(raw, metric, y, sg);
                let after = statewide(resolved, metric, y, sg);
                worst = worst.max((before - after).abs() / before.abs().max(1.0));
                slots += 1;
            }
        }
    }
    (worst <= CONSERVATION_TOLERANCE, format!("{slots} totals, worst relative gap {worst:.1e}"))
}

fn isolation(raw: &Store, resolved: &Store) -> (bool, String) {
    let mut perturbed = raw.clone();
    let keys: Vec<ObsKey> = raw
        .cells()
        .filter(|(k, _)| raw.school(&k.entity).is_some_and(|s| s.governance == Governance::CharterDirectFunded))
        .map(|(k, _)| k.clone())
        .collect();
    for k in &keys {
        let c = perturbed.cell_mut(k).unwrap();
        c.value = c.value * 1.7 + 3.0;
    }
    let (out, _) = reassociate_charters(&perturbed).unwrap();
    let differing = raw
        .districts()
        .filter(|d| !resolved.entity_cells(&d.id).eq(out.entity_cells(&d.id)))
        .count();
    (differing == 0 && !keys.is_empty(), format!("{} charter cells perturbed, {differing} districts changed", keys.len()))
}

fn ratio_check(store: &Store, truth: &GroundTruth) -> (bool, String) {
    let (mut violations, mut strict_misses, mut reported, mut worst) = (0, 0, 0, 0.0f64);
    let mut total = 0;
    for d in store.districts() {
        for y in store.years() {
            let Ok(p) = per_pupil_revenue(store, &d.id, y) else { continue };
            total += 1;
            if p.corrected > p.naive {
                violations += 1;
            }
            if p.method != PerPupilMethod::NoCharters && p.charter_revenue > 0.0 && p.corrected >= p.naive {
                strict_misses += 1;
            }
            if p.method == PerPupilMethod::ReportedCharterRevenue {
                reported += 1;
                let t = truth.true_per_pupil[&district_year_key(&d.id, y)];
                worst = worst.max((p.corrected - t).abs() / t.abs());
            }
        }
    }
    let pass = violations == 0 && strict_misses == 0 && reported > 0 && worst <= RATIO_TOLERANCE;
    (
        pass,
        format!("{total} district-years, {violations} above naive, {strict_misses} not strictly below, {reported} reported-stratum with worst error {:.4}%", worst * 100.0),
    )
}

fn keys_at(store: &Store, tau: f64) -> BTreeSet<ObsKey> {
    let cfg = AlmanacConfig {
        outlier_threshold: tau,
        single_rule_threshold: tau * SINGLE_RULE_RATIO,
        ..AlmanacConfig::default()
    };
    screen_outliers(store, &cfg).1.suppressed.into_iter().map(|c| c.key).collect()
}

fn outlier_suite(resolved: &Store, screened: &Store, truth: &GroundTruth) -> (bool, String) {
    let cfg = AlmanacConfig::default();
    let (_, report) = screen_outliers(resolved, &cfg);
    let flagged: BTreeSet<&ObsKey> = report.suppressed.iter().map(|c| &c.key).collect();
    let spiked: BTreeSet<&ObsKey> = truth.injected_spikes.iter().map(|s| &s.key).collect();
    let recall = spiked.iter().filter(|k| flagged.contains(*k)).count() as f64 / spiked.len() as f64;
    let false_rate = flagged.iter().filter(|k| !spiked.contains(*k)).count() as f64
        / (report.screened_cells - spiked.len()) as f64;

    let (again, _) = screen_outliers(screened, &cfg);
    let idempotent = &again == screened;

    let sets: Vec<BTreeSet<ObsKey>> = [3.0, 3.5, 4.0, 5.0].iter().map(|&t| keys_at(resolved, t)).collect();
    let monotone = sets.windows(2).all(|w| w[1].is_subset(&w[0]));

    let mut moved = resolved.clone();
    let base: Vec<ObsKey> = resolved
        .cells()
        .filter(|(k, c)| k.metric.def().source == MetricSource::Base && c.status != ObsStatus::Missing)
        .map(|(k, _)| k.clone())
        .collect();
    for k in &base {
        let c = moved.cell_mut(k).unwrap();
        c.value = 4.0 * c.value + 1000.0;
    }
    let affine = keys_at(&moved, 3.5) == sets[1];

    let pass = recall >= MIN_RECALL && false_rate <= MAX_FALSE_RATE && idempotent && monotone && affine;
    (
        pass,
        format!(
            "recall {:.2}% of {} spikes, false suppression {:.3}%, idempotent {idempotent}, monotone in tau {monotone} ({} ⊇ {} ⊇ {} ⊇ {}), affine-invariant {affine}",
            recall * 100.0,
            spiked.len(),
            false_rate * 100.0,
            sets[0].len(),
            sets[1].len(),
            sets[2].len(),
            sets[3].len()
        ),
    )
}

fn statistics_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_r, mut worst_b) = (0.0f64, 0.0f64);
    let mut properties = true;
    for _ in 0..STAT_CASES {
        let n = rng.random_range(3..60);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-500.0..500.0)).collect();
        let noise = rng.random_range(0.0..3.0);
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + noise * rng.random_range(-200.0..200.0)).collect();
        let nf = n as f64;
        let mx = x.iter().sum::<f64>() / nf;
        let my = y.iter().sum::<f64>() / nf;
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        let r_oracle = sxy / (sxx * syy).sqrt();
        let b_oracle = sxy / sxx;
        let r = pearson_r(&x, &y).unwrap();
        let (b, _) = ols_fit(&x, &y).unwrap();
        worst_r = worst_r.max((r - r_oracle).abs() / r_oracle.abs().max(f64::MIN_POSITIVE));
        worst_b = worst_b.max((b - b_oracle).abs() / b_oracle.abs().max(f64::MIN_POSITIVE));
        properties &= (-1.0..=1.0).contains(&r) && pearson_r(&y, &x).unwrap() == r;
    }
    (
        worst_r <= STAT_TOLERANCE && worst_b <= STAT_TOLERANCE && properties,
        format!("{STAT_CASES} cases, worst relative error r {worst_r:.1e}, slope {worst_b:.1e}, bounds and symmetry {properties}"),
    )
}

#[derive(Default)]
struct BundleAudit {
    bundles: usize,
    leaderboards: usize,
    round_trip_failures: usize,
    rank_failures: usize,
    closure_failures: usize,
    leaks: usize,
    value_mismatches: usize,
}

fn audit_bundle(text: &str, store: &Store, suppressed: &HashMap<&EntityId, Vec<&ObsKey>>, recheck: bool, a: &mut BundleAudit) {
    let b: WorkbookBundle = match parse_bundle(text) {
        Ok(b) => b,
        Err(_) => {
            a.round_trip_failures += 1;
            return;
        }
    };
    a.bundles += 1;
    a.leaderboards += b.leaderboards.len();
    if to_canonical_json(&b).unwrap() != text {
        a.round_trip_failures += 1;
    }

    let ids: BTreeSet<&EntityId> = b.districts.iter().map(|d| &d.id).collect();
    let metrics: BTreeSet<MetricId> = b.metrics.iter().map(|d| d.id).collect();
    let closed = b.districts.first() == Some(&b.client)
        && b.peer_set.district_ids().iter().all(|d| ids.contains(d))
        && b.leaderboards.iter().all(|l| metrics.contains(&l.metric_id) && l.rows.iter().all(|r| ids.contains(&r.district_id)))
        && b.trend_panels.iter().all(|t| metrics.contains(&t.metric_id))
        && b.scatter_presets.iter().all(|s| {
            metrics.contains(&s.x_metric) && metrics.contains(&s.y_metric) && s.points.iter().all(|p| ids.contains(&p.district_id))
        })
        && b.similarity_panel.rows.iter().all(|r| r.entries.iter().all(|e| ids.contains(&e.district_id)));
    if !closed {
        a.closure_failures += 1;
    }

    for lb in &b.leaderboards {
        let polarity = lb.metric_id.def().polarity;
        // Independent re-sort: best first, ties by id; rank is one plus the
        // number of strictly better rows.
        let mut resorted: Vec<(EntityId, f64)> = lb.rows.iter().map(|r| (r.district_id.clone(), r.value)).collect();
        resorted.sort_by(|x, y| {
            let by_value = match polarity {
                Polarity::LowerBetter => x.1.partial_cmp(&y.1).unwrap(),
                _ => y.1.partial_cmp(&x.1).unwrap(),
            };
            by_value.then_with(|| x.0.cmp(&y.0))
        });
        let ok = lb.rows.iter().zip(&resorted).all(|(r, s)| {
            let better = lb
                .rows
                .iter()
                .filter(|o| match polarity {
                    Polarity::LowerBetter => o.value < r.value,
                    _ => o.value > r.value,
                })
                .count();
            r.district_id == s.0 && r.rank as usize == better + 1 && r.is_client == (r.district_id == b.client.id)
        });
        if !ok {
            a.rank_failures += 1;
        }
        if recheck {
            for d in &b.districts {
                let direct = metric_value(store, &d.id, lb.metric_id, lb.year, lb.subgroup);
                let shown = lb.rows.iter().find(|r| r.district_id == d.id).map(|r| r.value);
                if direct != shown {
                    a.value_mismatches += 1;
                }
            }
        }
    }

    // A suppressed cell may not surface for its district in any view.
    for d in &ids {
        for key in suppressed.get(d).into_iter().flatten() {
            let in_leaderboards = b.leaderboards.iter().any(|l| {
                l.metric_id == key.metric
                    && l.year == key.year
                    && l.subgroup == key.subgroup
                    && l.rows.iter().any(|r| &r.district_id == *d)
            });
            let in_trend = **d == b.client.id
                && key.subgroup == Subgroup::All
                && b.trend_panels.iter().any(|t| t.metric_id == key.metric && t.client.points.iter().any(|p| p.year == key.year));
            let in_scatter = key.subgroup == Subgroup::All
                && b.scatter_presets.iter().any(|s| {
                    (s.x_metric == key.metric || s.y_metric == key.metric)
                        && s.year == key.year
                        && s.points.iter().any(|p| &p.district_id == *d)
                });
            if in_leaderboards || in_trend || in_scatter {
                a.leaks += 1;
            }
        }
    }
}

fn service_fidelity(store_dir: &Path, bundles: &Path, store: &Store) -> (bool, String) {
    use axum::body::Body;
    use axum::http::{Request, StatusCode};
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    let snapshot = Arc::new(almanac_service::Snapshot::load(store_dir, bundles.to_path_buf()).unwrap());
    let app = almanac_service::router(snapshot.clone(), None);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let get = |uri: String| {
        let app = app.clone();
        rt.block_on(async move {
            let res = app.oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
            let status = res.status();
            (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
        })
    };

    let eligible = snapshot.peer_index().eligible();
    let catalog = metric_catalog();
    let years: Vec<i32> = store.years().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let cfg = store.config().clone();
    let mut equal = 0;
    for _ in 0..SERVICE_TUPLES {
        let d = &eligible[rng.random_range(0..eligible.len())];
        let def = &catalog[rng.random_range(0..catalog.len())];
        let sgs = def.subgroups();
        let sg = sgs[rng.random_range(0..sgs.len())];
        let y = years[rng.random_range(0..years.len())];
        let (status, body) = get(format!("/api/v1/districts/{d}/leaderboard?metric={}&year={y}&subgroup={sg}", def.id));
        let direct = leaderboard(store, d, def.id.as_str(), y, sg, &cfg).unwrap();
        let body: serde_json::Value = serde_json::from_slice(&body).unwrap();
        let direct: serde_json::Value = serde_json::from_str(&to_canonical_json(&direct).unwrap()).unwrap();
        let (bstatus, bbody) = get(format!("/api/v1/districts/{d}/bundle"));
        let on_disk = fs::read(bundles.join(almanac::workbook::bundle_file_name(d))).unwrap();
        if status == StatusCode::OK && body == direct && bstatus == StatusCode::OK && bbody == on_disk {
            equal += 1;
        }
    }
    let not_found = ["bundle", "peers", "leaderboard?metric=grad_rate", "scatter?x=pct_el&y=grad_rate"]
        .iter()
        .all(|ep| {
            let (status, body) = get(format!("/api/v1/districts/NO_SUCH_DISTRICT/{ep}"));
            let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
            status == StatusCode::NOT_FOUND && v["code"] == "not_found"
        });
    (
        equal == SERVICE_TUPLES && not_found,
        format!("{equal}/{SERVICE_TUPLES} leaderboard and bundle bodies equal library output, unknown ids 404 {not_found}, no UI assets served"),
    )
}

#[test]
fn acceptance() {
    let mut ledger = Ledger { failed: Vec::new() };
    let root = tempfile::tempdir().unwrap();
    let (run_a, run_b) = (root.path().join("a"), root.path().join("b"));
    fs::create_dir_all(&run_a).unwrap();
    fs::create_dir_all(&run_b).unwrap();

    // End-to-end determinism.
    let (ok_a, elapsed_a) = pipeline(&run_a);
    let (ok_b, elapsed_b) = pipeline(&run_b);
    assert!(ok_a && ok_b, "pipeline stage failed");
    let files_a = bundle_files(&run_a.join("bundles"));
    let files_b = bundle_files(&run_b.join("bundles"));
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    let same_names = names(&files_a) == names(&files_b);
    let identical = same_names
        && files_a.iter().zip(&files_b).all(|(a, b)| {
            without_timestamp(&fs::read_to_string(a).unwrap()) == without_timestamp(&fs::read_to_string(b).unwrap())
        });
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(run_a.join("bundles/build_report.json")).unwrap()).unwrap();
    let report_matches = report["eligible_count"].as_u64() == Some(files_a.len() as u64);
    ledger.record(
        "end_to_end_determinism",
        identical && report_matches && elapsed_a <= PIPELINE_BUDGET && elapsed_b <= PIPELINE_BUDGET,
        format!(
            "{} bundles identical modulo generated_at: {identical}; report count matches: {report_matches}; pipeline {:.0}s and {:.0}s (budget {}s)",
            files_a.len(),
            elapsed_a.as_secs_f64(),
            elapsed_b.as_secs_f64(),
            PIPELINE_BUDGET.as_secs()
        ),
    );

    let truth = read_ground_truth(&run_a.join("corpus/ground_truth.json")).unwrap();
    let (screened, _) = load_store(&run_a.join("store")).unwrap();
    let cfg = AlmanacConfig::default();
    let (raw, errors) = load_corpus(&run_a.join("corpus"), &cfg).unwrap();
    assert!(errors.is_empty());
    let (resolved, _) = reassociate_charters(&raw).unwrap();
    assert!(screen_outliers(&resolved, &cfg).0 == screened, "stored store differs from an in-process run");

    // Peer oracle.
    let index = PeerIndex::build(&screened, &cfg).unwrap();
    let eligible = index.eligible();
    let mut rng = ChaCha8Rng::seed_from_u64(2016);
    let sampled: Vec<&EntityId> = sample(&mut rng, eligible.len(), PEER_SAMPLE).into_iter().map(|i| &eligible[i]).collect();
    let oracle_equal = sampled
        .iter()
        .filter(|d| index.peer_set(d).unwrap().member_ids() == brute_force_peers(&screened, d, K))
        .count();
    let (mut full, mut pure) = (0, 0);
    for d in &eligible {
        let set = index.peer_set(d).unwrap();
        full += usize::from(set.members.len() == K);
        let span = screened.district(d).unwrap().grade_span;
        pure += usize::from(set.members.iter().all(|p| screened.district(&p.district_id).unwrap().grade_span == span));
    }
    ledger.record(
        "peer_oracle",
        oracle_equal == PEER_SAMPLE && full == eligible.len() && pure == eligible.len() && index.ineligible().is_empty(),
        format!(
            "{oracle_equal}/{PEER_SAMPLE} sampled peer sets equal brute force; {full}/{} have {K} members; {pure} span-pure; {} ineligible",
            eligible.len(),
            index.ineligible().len()
        ),
    );

    // Charter conservation and isolation.
    let (conserved, c_detail) = conservation(&raw, &resolved);
    let (isolated, i_detail) = isolation(&raw, &resolved);
    ledger.record("charter_conservation_isolation", conserved && isolated, format!("{c_detail}; {i_detail}"));

    let (pass, detail) = ratio_check(&screened, &truth);
    ledger.record("ratio_correction", pass, detail);

    let (pass, detail) = outlier_suite(&resolved, &screened, &truth);
    ledger.record("outlier_suite", pass, detail);

    let (pass, detail) = statistics_oracles();
    ledger.record("statistics_oracles", pass, detail);

    // Bundle integrity over the full build.
    let mut by_entity: HashMap<&EntityId, Vec<&ObsKey>> = HashMap::new();
    let suppressed_keys: Vec<&ObsKey> = screened
        .cells()
        .filter(|(_, c)| c.status == ObsStatus::SuppressedOutlier)
        .map(|(k, _)| k)
        .collect();
    for k in &suppressed_keys {
        by_entity.entry(&k.entity).or_default().push(k);
    }
    let recheck: BTreeSet<usize> = sample(&mut rng, files_a.len(), VALUE_RECHECK_BUNDLES).into_iter().collect();
    let mut audit = BundleAudit::default();
    for (i, f) in files_a.iter().enumerate() {
        let text = fs::read_to_string(f).unwrap();
        audit_bundle(&text, &screened, &by_entity, recheck.contains(&i), &mut audit);
    }
    let pass = audit.bundles == files_a.len()
        && audit.round_trip_failures == 0
        && audit.rank_failures == 0
        && audit.closure_failures == 0
        && audit.leaks == 0
        && audit.value_mismatches == 0;
    ledger.record(
        "bundle_integrity",
        pass,
        format!(
            "{} bundles, {} leaderboards; round-trip failures {}, rank failures {}, closure failures {}, suppressed values shown {} (of {} suppressed cells), value mismatches in {VALUE_RECHECK_BUNDLES} rechecked bundles {}",
            audit.bundles,
            audit.leaderboards,
            audit.round_trip_failures,
            audit.rank_failures,
            audit.closure_failures,
            audit.leaks,
            suppressed_keys.len(),
            audit.value_mismatches
        ),
    );

    let (pass, detail) = service_fidelity(&run_a.join("store"), &run_a.join("bundles"), &screened);
    ledger.record("service_fidelity", pass, detail);

    assert!(ledger.failed.is_empty(), "failed criteria: {:?}", ledger.failed);
}
