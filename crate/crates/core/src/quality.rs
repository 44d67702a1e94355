//! Robust outlier screening.
//!
//! A cell is judged against two reference series: the entity's own history
//! for the same metric and subgroup (longitudinal) and the same-year values
//! of comparable entities (cross-sectional). Transient spikes stand out in
//! both; a district that is unusual but stable stands out only in the
//! second, and is kept unless it clears the stricter single-rule threshold.
//! Suppression flags the cell and records the original value; it never
//! deletes or rewrites values.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{AlmanacError, Result};
use crate::model::{
    string_enum, AlmanacConfig, EntityId, EntityKind, GradeSpan, MetricId, MetricSource, ObsKey,
    ObsStatus, Provenance, Store, Subgroup,
};

/// Makes 1.4826 × MAD consistent with the standard deviation under normality.
pub const MAD_CONSISTENCY: f64 = 1.4826;
/// Interquartile range of the standard normal.
pub const IQR_CONSISTENCY: f64 = 1.349;

string_enum! {
    pub enum ScaleBasis {
        Mad => "mad",
        Iqr => "iqr",
        Degenerate => "degenerate",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustScale {
    pub median: f64,
    pub scale: f64,
    pub basis: ScaleBasis,
}

impl RobustScale {
    /// Robust z of `x`, or `None` when the scale is degenerate.
    pub fn z(&self, x: f64) -> Option<f64> {
        (self.scale > 0.0).then(|| (x - self.median) / self.scale)
    }

    /// Whether `x` lies beyond `threshold` robust deviations. With a
    /// degenerate scale any departure from the median counts.
    pub fn exceeds(&self, x: f64, threshold: f64) -> bool {
        match self.z(x) {
            Some(z) => z.abs() > threshold,
            None => x != self.median,
        }
    }
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Linear-interpolation quantile (Hyndman–Fan type 7) of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Exact sample median.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(AlmanacError::Precondition("median of empty input".into()));
    }
    Ok(median_sorted(&sorted_copy(values)))
}

/// Median and MAD-based scale, falling back to IQR/1.349 and then zero.
pub fn robust_scale(values: &[f64]) -> Result<RobustScale> {
    if values.is_empty() {
        return Err(AlmanacError::Precondition("robust_scale of empty input".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AlmanacError::Precondition("robust_scale input must be finite".into()));
    }
    let sorted = sorted_copy(values);
    let median = median_sorted(&sorted);
    let deviations = sorted_copy(&sorted.iter().map(|x| (x - median).abs()).collect::<Vec<_>>());
    let mad = median_sorted(&deviations);
    if mad > 0.0 {
        return Ok(RobustScale {
            median,
            scale: MAD_CONSISTENCY * mad,
            basis: ScaleBasis::Mad,
        });
    }
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    if iqr > 0.0 {
        return Ok(RobustScale {
            median,
            scale: iqr / IQR_CONSISTENCY,
            basis: ScaleBasis::Iqr,
        });
    }
    Ok(RobustScale {
        median,
        scale: 0.0,
        basis: ScaleBasis::Degenerate,
    })
}

/// Modified z-score `(x − median) / scale`.
pub fn modified_z(x: f64, s: &RobustScale) -> Result<f64> {
    s.z(x).ok_or_else(|| {
        AlmanacError::DegenerateScale(format!("scale is zero around median {}", s.median))
    })
}

string_enum! {
    /// Which test suppressed a cell.
    pub enum SuppressionRule {
        Both => "both",
        LongitudinalOnly => "longitudinal_only",
        CrossSectionalOnly => "cross_sectional_only",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressedCell {
    pub key: ObsKey,
    pub original: f64,
    /// `None` when the series was too short or had a degenerate scale.
    #[serde(rename = "zL")]
    pub z_longitudinal: Option<f64>,
    #[serde(rename = "zC")]
    pub z_cross_sectional: Option<f64>,
    pub rule: SuppressionRule,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub screened_cells: usize,
    pub suppression_count: usize,
    pub suppressed: Vec<SuppressedCell>,
}

type SeriesKey = (EntityId, MetricId, Subgroup);
type PoolKey = (MetricId, i32, Subgroup, EntityKind, Option<GradeSpan>);

/// Flags untenable outliers as `suppressed_outlier`.
///
/// Statistics are taken over every non-missing value irrespective of
/// status, so screening an already screened store changes nothing.
pub fn screen_outliers(store: &Store, cfg: &AlmanacConfig) -> (Store, QaReport) {
    let mut series: HashMap<SeriesKey, Vec<f64>> = HashMap::new();
    let mut pools: HashMap<PoolKey, Vec<f64>> = HashMap::new();
    let mut candidates: Vec<(&ObsKey, f64, PoolKey)> = Vec::new();

    for (key, cell) in store.cells() {
        if cell.status == ObsStatus::Missing || key.metric.def().source != MetricSource::Base {
            continue;
        }
        let (kind, span) = match store.kind_of(&key.entity) {
            Some(EntityKind::District) => (
                EntityKind::District,
                store.district(&key.entity).map(|d| d.grade_span),
            ),
            Some(EntityKind::Cmo) => (EntityKind::Cmo, None),
            _ => continue,
        };
        let pool_key = (key.metric, key.year, key.subgroup, kind, span);
        series
            .entry((key.entity.clone(), key.metric, key.subgroup))
            .or_default()
            .push(cell.value);
        pools.entry(pool_key).or_default().push(cell.value);
        candidates.push((key, cell.value, pool_key));
    }

    let scale_of = |values: &Vec<f64>, min_len: usize| -> Option<RobustScale> {
        if values.len() < min_len {
            return None;
        }
        robust_scale(values).ok()
    };
    let series_scales: HashMap<&SeriesKey, Option<RobustScale>> = series
        .iter()
        .map(|(k, v)| (k, scale_of(v, cfg.min_longitudinal_points.max(1))))
        .collect();
    let pool_scales: HashMap<&PoolKey, Option<RobustScale>> = pools
        .iter()
        .map(|(k, v)| (k, scale_of(v, cfg.min_cross_sectional_entities.max(1))))
        .collect();

    let mut report = QaReport {
        screened_cells: candidates.len(),
        ..QaReport::default()
    };
    for (key, x, pool_key) in candidates {
        let long = series_scales[&(key.entity.clone(), key.metric, key.subgroup)];
        let cross = pool_scales[&pool_key];
        let rule = match (long, cross) {
            (Some(l), Some(c)) => (l.exceeds(x, cfg.outlier_threshold)
                && c.exceeds(x, cfg.outlier_threshold))
            .then_some(SuppressionRule::Both),
            (Some(l), None) => l
                .exceeds(x, cfg.single_rule_threshold)
                .then_some(SuppressionRule::LongitudinalOnly),
            (None, Some(c)) => c
                .exceeds(x, cfg.single_rule_threshold)
                .then_some(SuppressionRule::CrossSectionalOnly),
            (None, None) => None,
        };
        if let Some(rule) = rule {
            report.suppressed.push(SuppressedCell {
                key: key.clone(),
                original: x,
                z_longitudinal: long.and_then(|s| s.z(x)),
                z_cross_sectional: cross.and_then(|s| s.z(x)),
                rule,
            });
        }
    }
    report.suppressed.sort_by(|a, b| a.key.cmp(&b.key));
    report.suppression_count = report.suppressed.len();

    let mut out = store.clone();
    for s in &report.suppressed {
        let cell = out.cell_mut(&s.key).expect("suppressed key exists");
        if cell.status != ObsStatus::SuppressedOutlier {
            cell.provenance = Provenance::new(format!(
                "{}; suppressed_outlier original={}",
                cell.provenance, cell.value
            ));
            cell.status = ObsStatus::SuppressedOutlier;
        }
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_with_outlier() {
        // median 3; |x-3| = 2,1,0,1,97 -> MAD 1
        let s = robust_scale(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(s.median, 3.0);
        assert_eq!(s.scale, 1.4826);
        assert_eq!(s.basis, ScaleBasis::Mad);
    }

    #[test]
    fn scale_of_three_points() {
        // median 20; deviations 10,0,10 -> MAD 10
        let s = robust_scale(&[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(s.median, 20.0);
        assert!((s.scale - 14.826).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_degenerate() {
        let s = robust_scale(&[5.0; 4]).unwrap();
        assert_eq!(s.median, 5.0);
        assert_eq!(s.scale, 0.0);
        assert_eq!(s.basis, ScaleBasis::Degenerate);
        assert!(matches!(modified_z(6.0, &s), Err(AlmanacError::DegenerateScale(_))));
        assert!(s.exceeds(5.0001, 1e9));
        assert!(!s.exceeds(5.0, 0.0));
    }

    #[test]
    fn iqr_fallback_when_mad_is_zero() {
        // MAD = 0 (three of four at the median) but Q3 interpolates to 6.
        let s = robust_scale(&[5.0, 5.0, 5.0, 9.0]).unwrap();
        assert_eq!(s.basis, ScaleBasis::Iqr);
        assert!((s.scale - 1.0 / 1.349).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_a_precondition_error() {
        assert!(matches!(robust_scale(&[]), Err(AlmanacError::Precondition(_))));
    }

    #[test]
    fn modified_z_values() {
        let s = robust_scale(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(modified_z(3.0, &s).unwrap(), 0.0);
        let z = modified_z(100.0, &s).unwrap();
        assert!((z - 97.0 / 1.4826).abs() < 1e-12);
        assert!((z - 65.43).abs() < 0.01);
        assert_eq!(modified_z(3.0 + 2.5, &s).unwrap(), -modified_z(3.0 - 2.5, &s).unwrap());
    }
}
