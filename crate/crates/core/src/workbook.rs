//! Per-district workbook: leaderboards, scatter series, trend panels and the
//! similarity panel, serialized as a self-contained bundle.

use std::collections::{BTreeMap, HashMap};
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AlmanacError, Result};
use crate::metrics::{
    ols_fit, pearson_r, trend_panel_with, OverlayWeights, Overlays, TrendPanel, ValueSource,
};
use crate::model::{
    metric_catalog, AlmanacConfig, EntityId, FundingType, GradeSpan, MetricDef, MetricId,
    ObsStatus, Polarity, Store, Subgroup, CATALOG_VERSION,
};
use crate::peers::{contributions, PeerIndex, PeerSet, FEATURE_COUNT, FEATURE_NAMES};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub district_id: EntityId,
    pub value: f64,
    pub rank: u32,
    pub is_client: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub metric_id: MetricId,
    pub year: i32,
    pub subgroup: Subgroup,
    /// Best first.
    pub rows: Vec<LeaderboardRow>,
    /// False for neutral metrics, which are listed in descending order.
    pub polarity_applied: bool,
    /// Client and peers with no usable value.
    pub dropped: usize,
}

/// `Less` when `a` ranks ahead of `b`.
fn better(polarity: Polarity, a: f64, b: f64) -> std::cmp::Ordering {
    match polarity {
        Polarity::LowerBetter => a.total_cmp(&b),
        Polarity::HigherBetter | Polarity::Neutral => b.total_cmp(&a),
    }
}

/// Ranks `(district, value)` pairs best-first with competition ranking;
/// ties are listed by district id.
pub fn rank_rows(values: Vec<(EntityId, f64)>, polarity: Polarity, client: &EntityId) -> Vec<LeaderboardRow> {
    let mut values = values;
    values.sort_by(|a, b| better(polarity, a.1, b.1).then_with(|| a.0.cmp(&b.0)));
    let mut rows: Vec<LeaderboardRow> = Vec::with_capacity(values.len());
    for (i, (id, value)) in values.into_iter().enumerate() {
        let rank = match rows.last() {
            Some(prev) if prev.value == value => prev.rank,
            _ => i as u32 + 1,
        };
        rows.push(LeaderboardRow {
            is_client: &id == client,
            district_id: id,
            value,
            rank,
        });
    }
    rows
}

fn check_cell_args(src: &impl ValueSource, metric: MetricId, year: i32, subgroup: Subgroup) -> Result<()> {
    if !src.years().contains(&year) {
        return Err(AlmanacError::NotFound(format!("year {year}")));
    }
    if !metric.def().subgroups().contains(&subgroup) {
        return Err(AlmanacError::Precondition(format!(
            "{metric} is not reported for subgroup {subgroup}"
        )));
    }
    Ok(())
}

/// Leaderboard of the client and its peers.
pub fn leaderboard_for(
    src: &impl ValueSource,
    peers: &PeerSet,
    metric: MetricId,
    year: i32,
    subgroup: Subgroup,
) -> Result<Leaderboard> {
    check_cell_args(src, metric, year, subgroup)?;
    let ids = peers.district_ids();
    let values: Vec<(EntityId, f64)> = ids
        .iter()
        .filter_map(|id| src.metric_value(id, metric, year, subgroup).map(|v| (id.clone(), v)))
        .collect();
    let polarity = metric.def().polarity;
    Ok(Leaderboard {
        metric_id: metric,
        year,
        subgroup,
        dropped: ids.len() - values.len(),
        rows: rank_rows(values, polarity, &peers.client),
        polarity_applied: polarity != Polarity::Neutral,
    })
}

/// Leaderboard for a metric given by id, matching peers from scratch.
pub fn leaderboard(
    store: &Store,
    client: &EntityId,
    metric: &str,
    year: i32,
    subgroup: Subgroup,
    cfg: &AlmanacConfig,
) -> Result<Leaderboard> {
    let metric = MetricId::lookup(metric).ok_or_else(|| AlmanacError::NotFound(format!("metric {metric}")))?;
    let peers = PeerIndex::build(store, cfg)?.peer_set(client)?;
    leaderboard_for(store, &peers, metric, year, subgroup)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub district_id: EntityId,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSeries {
    pub x_metric: MetricId,
    pub y_metric: MetricId,
    pub year: i32,
    pub subgroup: Subgroup,
    pub points: Vec<ScatterPoint>,
    /// `None` with fewer than 3 points or a constant coordinate.
    pub r: Option<f64>,
    pub fit: Option<LinearFit>,
}

/// Pairs of values for the given districts with correlation and fit.
/// Subgroup applies to whichever axis is reported by subgroup; the other
/// axis uses all students.
pub fn scatter(
    src: &impl ValueSource,
    districts: &[EntityId],
    x_metric: MetricId,
    y_metric: MetricId,
    year: i32,
    subgroup: Subgroup,
) -> ScatterSeries {
    let sg_for = |m: MetricId| {
        if m.def().subgrouped {
            subgroup
        } else {
            Subgroup::All
        }
    };
    let points: Vec<ScatterPoint> = districts
        .iter()
        .filter_map(|d| {
            let x = src.metric_value(d, x_metric, year, sg_for(x_metric))?;
            let y = src.metric_value(d, y_metric, year, sg_for(y_metric))?;
            Some(ScatterPoint { district_id: d.clone(), x, y })
        })
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    let r = pearson_r(&xs, &ys).ok();
    let fit = r.and_then(|_| ols_fit(&xs, &ys)).map(|(slope, intercept)| LinearFit { slope, intercept });
    ScatterSeries {
        x_metric,
        y_metric,
        year,
        subgroup,
        points,
        r,
        fit,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityEntry {
    pub district_id: EntityId,
    pub raw: f64,
    pub standardized: f64,
    pub distance_contribution: f64,
    pub is_client: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub feature: String,
    pub entries: Vec<SimilarityEntry>,
}

/// Per-district total distance, with the log-enrollment share that has no
/// displayed row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTotal {
    pub district_id: EntityId,
    pub distance: f64,
    pub log_enrollment_contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPanel {
    pub rows: Vec<SimilarityRow>,
    pub totals: Vec<SimilarityTotal>,
}

/// Bubble rows for parent education, EL share and FRPM share over the client
/// and its peers.
pub fn similarity_panel(peers: &PeerSet) -> SimilarityPanel {
    let client_z = peers.standardized(&peers.client).expect("client features in peer set");
    let ids = peers.district_ids();
    let mut per_district = Vec::with_capacity(ids.len());
    for id in &ids {
        let raw = peers.features[id].to_array();
        let z = peers.standardized(id).expect("member features in peer set");
        let c = contributions(&client_z, &z, &peers.feature_weights);
        per_district.push((id, raw, z, c));
    }
    let rows = (1..FEATURE_COUNT)
        .map(|f| SimilarityRow {
            feature: FEATURE_NAMES[f].to_string(),
            entries: per_district
                .iter()
                .map(|(id, raw, z, c)| SimilarityEntry {
                    district_id: (*id).clone(),
                    raw: raw[f],
                    standardized: z[f],
                    distance_contribution: c[f],
                    is_client: *id == &peers.client,
                })
                .collect(),
        })
        .collect();
    let totals = per_district
        .iter()
        .map(|(id, _, _, c)| SimilarityTotal {
            district_id: (*id).clone(),
            distance: c.iter().sum::<f64>().sqrt(),
            log_enrollment_contribution: c[0],
        })
        .collect();
    SimilarityPanel { rows, totals }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistrictDescriptor {
    pub id: EntityId,
    pub name: String,
    pub county_id: EntityId,
    pub county_name: String,
    pub grade_span: GradeSpan,
    pub funding_type: FundingType,
}

impl DistrictDescriptor {
    pub fn of(store: &Store, id: &EntityId) -> Option<Self> {
        let d = store.district(id)?;
        Some(DistrictDescriptor {
            id: d.id.clone(),
            name: d.name.clone(),
            county_id: d.county_id.clone(),
            county_name: store.name_of(&d.county_id).unwrap_or_default().to_string(),
            grade_span: d.grade_span,
            funding_type: d.funding_type,
        })
    }
}

/// Cells flagged by screening or rewritten by charter re-association.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QaSummary {
    pub client_suppressed: usize,
    pub client_corrected: usize,
    pub peers_suppressed: usize,
    pub peers_corrected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkbookBundle {
    pub schema_version: String,
    /// Build time, UTC. Not part of bundle identity.
    pub generated_at: String,
    pub catalog_version: String,
    pub client: DistrictDescriptor,
    /// Client followed by its peers.
    pub districts: Vec<DistrictDescriptor>,
    pub years: Vec<i32>,
    pub metrics: Vec<MetricDef>,
    pub config: AlmanacConfig,
    pub peer_set: PeerSet,
    pub leaderboards: Vec<Leaderboard>,
    pub trend_panels: Vec<TrendPanel>,
    pub scatter_presets: Vec<ScatterSeries>,
    pub similarity_panel: SimilarityPanel,
    pub qa_summary: QaSummary,
}

impl WorkbookBundle {
    /// Equality ignoring `generated_at`.
    pub fn same_content(&self, other: &WorkbookBundle) -> bool {
        let mut a = self.clone();
        a.generated_at.clone_from(&other.generated_at);
        &a == other
    }
}

/// Every catalog metric's values for a set of entities, computed once.
#[derive(Debug, Clone)]
pub struct ValueCube {
    years: RangeInclusive<i32>,
    values: HashMap<(EntityId, MetricId, Subgroup), Vec<Option<f64>>>,
}

impl ValueCube {
    pub fn compute<'a>(store: &Store, entities: impl IntoIterator<Item = &'a EntityId>) -> Self {
        let years = store.years();
        let catalog = metric_catalog();
        let mut values = HashMap::new();
        for e in entities {
            for def in &catalog {
                for &sg in def.subgroups() {
                    let series: Vec<Option<f64>> = years
                        .clone()
                        .map(|y| crate::metrics::metric_value(store, e, def.id, y, sg))
                        .collect();
                    if series.iter().any(Option::is_some) {
                        values.insert((e.clone(), def.id, sg), series);
                    }
                }
            }
        }
        ValueCube { years, values }
    }
}

impl ValueSource for ValueCube {
    fn years(&self) -> RangeInclusive<i32> {
        self.years.clone()
    }

    fn metric_value(&self, entity: &EntityId, metric: MetricId, year: i32, subgroup: Subgroup) -> Option<f64> {
        if !self.years.contains(&year) {
            return None;
        }
        let series = self.values.get(&(entity.clone(), metric, subgroup))?;
        series[(year - self.years.start()) as usize]
    }
}

/// Shared, read-only state for building any number of bundles from one
/// store: peer index, value table and county/state overlays.
pub struct Workbook<'a> {
    store: &'a Store,
    cfg: AlmanacConfig,
    index: PeerIndex,
    cube: ValueCube,
    overlays: BTreeMap<MetricId, Overlays>,
}

impl<'a> Workbook<'a> {
    pub fn new(store: &'a Store, cfg: &AlmanacConfig) -> Result<Self> {
        let index = PeerIndex::build(store, cfg)?;
        let ids: Vec<EntityId> = store.districts().map(|d| d.id.clone()).collect();
        let cube = ValueCube::compute(store, &ids);
        let weights = OverlayWeights::compute(store);
        let overlays = metric_catalog()
            .into_iter()
            .map(|m| (m.id, Overlays::compute(store, &cube, &weights, m.id, Subgroup::All)))
            .collect();
        Ok(Workbook {
            store,
            cfg: cfg.clone(),
            index,
            cube,
            overlays,
        })
    }

    pub fn peer_index(&self) -> &PeerIndex {
        &self.index
    }

    pub fn values(&self) -> &ValueCube {
        &self.cube
    }

    pub fn build(&self, client: &EntityId) -> Result<WorkbookBundle> {
        let store = self.store;
        let peers = self.index.peer_set(client)?;
        let ids = peers.district_ids();
        let years: Vec<i32> = store.years().collect();
        let catalog = metric_catalog();

        let mut leaderboards = Vec::new();
        for def in &catalog {
            for &year in &years {
                for &sg in def.subgroups() {
                    let lb = leaderboard_for(&self.cube, &peers, def.id, year, sg)?;
                    if !lb.rows.is_empty() {
                        leaderboards.push(lb);
                    }
                }
            }
        }
        let members = peers.member_ids();
        let trend_panels = catalog
            .iter()
            .map(|def| {
                trend_panel_with(store, &self.cube, client, def.id, Subgroup::All, &members, &self.overlays[&def.id])
            })
            .collect::<Result<Vec<_>>>()?;
        let scatter_presets = self
            .cfg
            .scatter_presets
            .iter()
            .flat_map(|p| years.iter().map(move |&y| (p, y)))
            .map(|(p, y)| scatter(&self.cube, &ids, p.x_metric, p.y_metric, y, Subgroup::All))
            .collect();

        let mut qa = QaSummary::default();
        for id in &ids {
            for (_, cell) in store.entity_cells(id) {
                let is_client = id == client;
                match (cell.status, is_client) {
                    (ObsStatus::SuppressedOutlier, true) => qa.client_suppressed += 1,
                    (ObsStatus::SuppressedOutlier, false) => qa.peers_suppressed += 1,
                    (ObsStatus::Corrected, true) => qa.client_corrected += 1,
                    (ObsStatus::Corrected, false) => qa.peers_corrected += 1,
                    _ => {}
                }
            }
        }

        let descriptor = |id: &EntityId| {
            DistrictDescriptor::of(store, id).ok_or_else(|| AlmanacError::NotFound(format!("district {id}")))
        };
        Ok(WorkbookBundle {
            schema_version: SCHEMA_VERSION.to_string(),
            generated_at: chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            catalog_version: CATALOG_VERSION.to_string(),
            client: descriptor(client)?,
            districts: ids.iter().map(descriptor).collect::<Result<_>>()?,
            years,
            metrics: catalog,
            config: self.cfg.clone(),
            similarity_panel: similarity_panel(&peers),
            peer_set: peers,
            leaderboards,
            trend_panels,
            scatter_presets,
            qa_summary: qa,
        })
    }
}

/// Builds one district's bundle from scratch.
pub fn build_bundle(store: &Store, client: &EntityId, cfg: &AlmanacConfig) -> Result<WorkbookBundle> {
    Workbook::new(store, cfg)?.build(client)
}

pub fn bundle_file_name(district: &EntityId) -> String {
    format!("{district}.bundle.json")
}

/// Canonical text: keys sorted, compact, shortest round-trip numbers, one
/// trailing LF.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's map type is ordered by key, so going through `Value`
    // sorts every object.
    let mut text = serde_json::to_string(&serde_json::to_value(value)?)?;
    text.push('\n');
    Ok(text)
}

pub fn write_bundle(bundle: &WorkbookBundle, path: &Path) -> Result<()> {
    let text = to_canonical_json(bundle)?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| AlmanacError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| AlmanacError::io(path, e))
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(text: &str, e: serde_json::Error) -> AlmanacError {
    AlmanacError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

pub fn parse_bundle(text: &str) -> Result<WorkbookBundle> {
    #[derive(Deserialize)]
    struct Header {
        schema_version: Option<serde_json::Value>,
    }
    let header: Header = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    match header.schema_version {
        Some(serde_json::Value::String(v)) if v == SCHEMA_VERSION => {}
        other => {
            return Err(AlmanacError::SchemaVersion {
                found: other.map(|v| v.to_string()).unwrap_or_else(|| "none".into()),
                expected: SCHEMA_VERSION.into(),
            })
        }
    }
    serde_json::from_str(text).map_err(|e| parse_error(text, e))
}

pub fn read_bundle(path: &Path) -> Result<WorkbookBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| AlmanacError::io(path, e))?;
    parse_bundle(&text)
}
