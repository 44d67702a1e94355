//! Derived metrics, the charter-corrected revenue ratio, trends and
//! correlation statistics.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::entities::{direct_charter_enrollment, governed_enrollment};
use crate::error::{AlmanacError, Result};
use crate::model::{
    metric_catalog, string_enum, EntityId, EntityKind, MetricId, MetricSource, Store, Subgroup,
};
use crate::quality;

string_enum! {
    pub enum PerPupilMethod {
        ReportedCharterRevenue => "reported_charter_revenue",
        ProportionalAllocation => "proportional_allocation",
        NoCharters => "no_charters",
    }
}

/// Revenue per governed student, as published and with direct-funded
/// charter revenue taken out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerPupil {
    pub district_id: EntityId,
    pub year: i32,
    pub naive: f64,
    pub corrected: f64,
    pub method: PerPupilMethod,
    /// Revenue attributed to direct-funded charters.
    pub charter_revenue: f64,
}

fn metric(id: &str) -> MetricId {
    MetricId::lookup(id).unwrap_or_else(|| panic!("catalog lacks `{id}`"))
}

/// Corrects a district's revenue-per-student for charter flow-through.
///
/// The published revenue of an authorizing district includes money that
/// passes through to its direct-funded charters while the published
/// enrollment does not count their students. Charter revenue is taken from
/// the charters' own finance rows where they report one; any unreported
/// remainder is split between the district and those charters in
/// proportion to enrollment.
pub fn per_pupil_revenue(store: &Store, district: &EntityId, year: i32) -> Result<PerPupil> {
    if store.district(district).is_none() {
        return Err(AlmanacError::NotFound(format!("district {district}")));
    }
    let enrollment = governed_enrollment(store, district, year) as f64;
    if enrollment == 0.0 {
        return Err(AlmanacError::UndefinedRatio(format!(
            "{district} has no governed enrollment in {year}"
        )));
    }
    let revenue = store
        .value(district, metric("revenue_total"), year, Subgroup::All)
        .ok_or_else(|| AlmanacError::MissingData(format!("{district} revenue_total {year}")))?;

    let charters = direct_charter_enrollment(store, district, year);
    let naive = revenue / enrollment;
    if charters.is_empty() {
        return Ok(PerPupil {
            district_id: district.clone(),
            year,
            naive,
            corrected: naive,
            method: PerPupilMethod::NoCharters,
            charter_revenue: 0.0,
        });
    }

    let mut reported = 0.0;
    let mut unreported_enrollment = 0.0;
    let mut all_reported = true;
    for (school, e) in &charters {
        match store.value(school, metric("revenue_total"), year, Subgroup::All) {
            Some(r) => reported += r,
            None => {
                all_reported = false;
                unreported_enrollment += e;
            }
        }
    }
    let (charter_revenue, method) = if all_reported {
        (reported, PerPupilMethod::ReportedCharterRevenue)
    } else {
        let share = unreported_enrollment / (enrollment + unreported_enrollment);
        (
            reported + (revenue - reported) * share,
            PerPupilMethod::ProportionalAllocation,
        )
    };
    Ok(PerPupil {
        district_id: district.clone(),
        year,
        naive,
        corrected: (revenue - charter_revenue) / enrollment,
        method,
        charter_revenue,
    })
}

fn ratio(num: Option<f64>, den: Option<f64>, scale: f64) -> Option<f64> {
    match (num, den) {
        (Some(n), Some(d)) if d != 0.0 => Some(n / d * scale),
        _ => None,
    }
}

/// Value of any catalog metric for one cell: stored for base metrics,
/// computed from usable stored cells for derived ones. `None` when an input
/// is missing, suppressed or a denominator is zero.
pub fn metric_value(
    store: &Store,
    entity: &EntityId,
    metric_id: MetricId,
    year: i32,
    subgroup: Subgroup,
) -> Option<f64> {
    let def = metric_id.def();
    if def.source == MetricSource::Base {
        return store.value(entity, metric_id, year, subgroup);
    }
    if !def.subgrouped && subgroup != Subgroup::All {
        return None;
    }
    let v = |id: &str, sg: Subgroup| store.value(entity, metric(id), year, sg);
    let all = |id: &str| v(id, Subgroup::All);
    let is_district = store.kind_of(entity) == Some(EntityKind::District);
    let per_pupil = || {
        if is_district {
            per_pupil_revenue(store, entity, year).ok()
        } else {
            None
        }
    };
    let sg = subgroup;
    match metric_id.as_str() {
        "per_pupil_revenue_naive" => per_pupil().map(|p| p.naive),
        "per_pupil_revenue_corrected" => per_pupil().map(|p| p.corrected),
        "per_pupil_expenditure" => ratio(all("expenditure_total"), all("students"), 1.0),
        "expenditure_to_revenue_ratio" => ratio(all("expenditure_total"), all("revenue_total"), 1.0),
        "charter_revenue_share" => per_pupil().and_then(|p| {
            let r = all("revenue_total")?;
            ratio(Some(p.charter_revenue), Some(r), 100.0)
        }),
        "revenue_per_teacher" => {
            let p = per_pupil()?;
            let governed = p.corrected * governed_enrollment(store, entity, year) as f64;
            ratio(Some(governed), all("teacher_fte"), 1.0)
        }

        "teacher_fte_per_100" => ratio(all("teacher_fte"), all("students"), 100.0),
        "admin_fte_per_100" => ratio(all("admin_fte"), all("students"), 100.0),
        "students_per_teacher" => ratio(all("students"), all("teacher_fte"), 1.0),
        "students_per_admin" => ratio(all("students"), all("admin_fte"), 1.0),
        "teachers_per_admin" => ratio(all("teacher_fte"), all("admin_fte"), 1.0),
        "admin_share_pct" => {
            let staff = Some(all("teacher_fte")? + all("admin_fte")?);
            ratio(all("admin_fte"), staff, 100.0)
        }

        "suspension_rate" => ratio(v("suspensions", sg), v("students", sg), 100.0),
        "expulsion_rate" => ratio(v("expulsions", sg), v("students", sg), 100.0),
        "removal_rate" => {
            let removals = Some(all("suspensions")? + all("expulsions")?);
            ratio(removals, all("students"), 100.0)
        }
        "expulsion_share_pct" => {
            let removals = Some(all("suspensions")? + all("expulsions")?);
            ratio(all("expulsions"), removals, 100.0)
        }
        "suspensions_per_teacher" => ratio(all("suspensions"), all("teacher_fte"), 1.0),
        "expulsions_per_1000" => ratio(all("expulsions"), all("students"), 1000.0),

        "pct_hispanic" => ratio(v("students", Subgroup::Hispanic), all("students"), 100.0),
        "pct_white" => ratio(v("students", Subgroup::White), all("students"), 100.0),
        "pct_african_american" => {
            ratio(v("students", Subgroup::AfricanAmerican), all("students"), 100.0)
        }
        "pct_asian" => ratio(v("students", Subgroup::Asian), all("students"), 100.0),

        "pct_ap_courses" => ratio(all("ap_course_count"), all("total_course_count"), 100.0),
        "ap_courses_per_100" => ratio(all("ap_course_count"), all("students"), 100.0),
        "courses_per_100" => ratio(all("total_course_count"), all("students"), 100.0),
        "courses_per_teacher" => ratio(all("total_course_count"), all("teacher_fte"), 1.0),
        "non_ap_course_count" => Some(all("total_course_count")? - all("ap_course_count")?),
        "ap_courses_per_teacher" => ratio(all("ap_course_count"), all("teacher_fte"), 1.0),

        "non_grad_rate" => v("grad_rate", sg).map(|g| 100.0 - g),
        "retention_rate" => v("dropout_rate", sg).map(|d| 100.0 - d),
        "grad_to_dropout_ratio" => ratio(all("grad_rate"), all("dropout_rate"), 1.0),
        "est_dropouts" => Some(v("dropout_rate", sg)? / 100.0 * v("students", sg)?),
        "grad_rate_relative" => ratio(v("grad_rate", sg), all("grad_rate"), 1.0),
        "dropout_rate_relative" => ratio(v("dropout_rate", sg), all("dropout_rate"), 1.0),
        other => unreachable!("derived metric `{other}` has no formula"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YearValue {
    pub year: i32,
    pub value: f64,
}

/// Usable values of one entity/metric/subgroup, year-ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub entity_id: EntityId,
    pub metric_id: MetricId,
    pub subgroup: Subgroup,
    pub points: Vec<YearValue>,
}

/// Anything that can answer catalog-metric queries: the store itself or a
/// precomputed table of its values.
pub trait ValueSource {
    fn years(&self) -> RangeInclusive<i32>;
    fn metric_value(&self, entity: &EntityId, metric: MetricId, year: i32, subgroup: Subgroup) -> Option<f64>;
}

impl ValueSource for Store {
    fn years(&self) -> RangeInclusive<i32> {
        Store::years(self)
    }

    fn metric_value(&self, entity: &EntityId, metric: MetricId, year: i32, subgroup: Subgroup) -> Option<f64> {
        metric_value(self, entity, metric, year, subgroup)
    }
}

impl Series {
    pub fn collect(src: &impl ValueSource, entity: &EntityId, metric: MetricId, subgroup: Subgroup) -> Self {
        let points = src
            .years()
            .filter_map(|year| {
                src.metric_value(entity, metric, year, subgroup).map(|value| YearValue { year, value })
            })
            .collect();
        Series {
            entity_id: entity.clone(),
            metric_id: metric,
            subgroup,
            points,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateOfChange {
    /// OLS slope of value on year, per year.
    pub slope: Option<f64>,
    /// `(last − first) / |first|`; `None` when the first value is zero.
    pub pct_change: Option<f64>,
    /// Fewer than three points: neither statistic is computed.
    pub insufficient: bool,
}

/// Ordinary least squares fit `y = slope·x + intercept`, or `None` when the
/// inputs are mismatched, shorter than two points or `x` is constant.
pub fn ols_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

pub fn rate_of_change(series: &Series) -> RateOfChange {
    if series.points.len() < 3 {
        return RateOfChange {
            slope: None,
            pct_change: None,
            insufficient: true,
        };
    }
    let xs: Vec<f64> = series.points.iter().map(|p| p.year as f64).collect();
    let ys: Vec<f64> = series.points.iter().map(|p| p.value).collect();
    let first = ys[0];
    let last = ys[ys.len() - 1];
    RateOfChange {
        slope: ols_fit(&xs, &ys).map(|(s, _)| s),
        pct_change: (first != 0.0).then(|| (last - first) / first.abs()),
        insufficient: false,
    }
}

/// Sample Pearson correlation.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(AlmanacError::Precondition(format!(
            "pearson_r needs equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(AlmanacError::Precondition("pearson_r needs at least 3 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AlmanacError::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// County and state enrollment-weighted means of one metric/subgroup over
/// districts, keyed by year.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overlays {
    pub county: BTreeMap<(EntityId, i32), f64>,
    pub state: BTreeMap<i32, f64>,
}

/// District weights for overlays: governed enrollment per (district, year).
#[derive(Debug, Clone)]
pub struct OverlayWeights(BTreeMap<(EntityId, i32), f64>);

impl OverlayWeights {
    pub fn compute(store: &Store) -> Self {
        let mut w = BTreeMap::new();
        for d in store.districts() {
            for year in store.years() {
                w.insert((d.id.clone(), year), governed_enrollment(store, &d.id, year) as f64);
            }
        }
        OverlayWeights(w)
    }
}

impl Overlays {
    pub fn compute(
        store: &Store,
        src: &impl ValueSource,
        weights: &OverlayWeights,
        metric: MetricId,
        subgroup: Subgroup,
    ) -> Self {
        let mut county: BTreeMap<(EntityId, i32), (f64, f64)> = BTreeMap::new();
        let mut state: BTreeMap<i32, (f64, f64)> = BTreeMap::new();
        for d in store.districts() {
            for year in store.years() {
                let w = weights.0.get(&(d.id.clone(), year)).copied().unwrap_or(0.0);
                if w <= 0.0 {
                    continue;
                }
                let Some(v) = src.metric_value(&d.id, metric, year, subgroup) else {
                    continue;
                };
                let c = county.entry((d.county_id.clone(), year)).or_default();
                c.0 += w * v;
                c.1 += w;
                let s = state.entry(year).or_default();
                s.0 += w * v;
                s.1 += w;
            }
        }
        Overlays {
            county: county.into_iter().map(|(k, (n, d))| (k, n / d)).collect(),
            state: state.into_iter().map(|(k, (n, d))| (k, n / d)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPanel {
    pub metric_id: MetricId,
    pub subgroup: Subgroup,
    pub client: Series,
    pub peer_median: Vec<YearValue>,
    pub county_mean: Vec<YearValue>,
    pub state_mean: Vec<YearValue>,
    pub rate_of_change: RateOfChange,
}

/// Client series with peer-median, county and state overlays.
pub fn trend_series(
    store: &Store,
    entity: &EntityId,
    metric: MetricId,
    subgroup: Subgroup,
    peers: &[EntityId],
) -> Result<TrendPanel> {
    let overlays = Overlays::compute(store, store, &OverlayWeights::compute(store), metric, subgroup);
    trend_panel_with(store, store, entity, metric, subgroup, peers, &overlays)
}

/// [`trend_series`] with precomputed overlays.
pub fn trend_panel_with(
    store: &Store,
    src: &impl ValueSource,
    entity: &EntityId,
    metric: MetricId,
    subgroup: Subgroup,
    peers: &[EntityId],
    overlays: &Overlays,
) -> Result<TrendPanel> {
    if store.kind_of(entity).is_none() {
        return Err(AlmanacError::NotFound(format!("entity {entity}")));
    }
    let client = Series::collect(src, entity, metric, subgroup);
    let mut peer_median = Vec::new();
    for year in store.years() {
        let values: Vec<f64> = peers
            .iter()
            .filter_map(|p| src.metric_value(p, metric, year, subgroup))
            .collect();
        if let Ok(m) = quality::median(&values) {
            peer_median.push(YearValue { year, value: m });
        }
    }
    let county_id = store.district(entity).map(|d| d.county_id.clone());
    let county_mean = match &county_id {
        Some(c) => store
            .years()
            .filter_map(|y| overlays.county.get(&(c.clone(), y)).map(|&value| YearValue { year: y, value }))
            .collect(),
        None => Vec::new(),
    };
    let state_mean = overlays
        .state
        .iter()
        .map(|(&year, &value)| YearValue { year, value })
        .collect();
    let rate_of_change = rate_of_change(&client);
    Ok(TrendPanel {
        metric_id: metric,
        subgroup,
        client,
        peer_median,
        county_mean,
        state_mean,
        rate_of_change,
    })
}

/// Looks up a metric by id, reporting unknown ids as not found.
pub fn require_metric(id: &str) -> Result<MetricId> {
    MetricId::lookup(id).ok_or_else(|| AlmanacError::NotFound(format!("metric {id}")))
}

/// Every derived metric has a formula; used by tests and startup checks.
pub fn derived_metric_ids() -> Vec<MetricId> {
    metric_catalog()
        .into_iter()
        .filter(|m| m.source == MetricSource::Derived)
        .map(|m| m.id)
        .collect()
}
