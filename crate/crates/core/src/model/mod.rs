//! Shared domain types: entities, observations, configuration and the
//! metric catalog.

mod catalog;
mod store;
mod validate;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{AlmanacError, Result};

pub use catalog::{
    metric_catalog, metric_def, AggregationRule, MetricCategory, MetricDef, MetricId,
    MetricSource, Polarity, Unit, CATALOG_VERSION,
};
pub use store::{Cell, Entity, Observation, ObsKey, Provenance, Store};
pub use validate::{validate_store, ValidationReport, Violation};

/// Declares a closed string-valued enumeration with a stable wire name per
/// variant.
macro_rules! string_enum {
    ($(#[$meta:meta])* $vis:vis enum $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        $vis enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "`{}` is not a valid {} (expected one of: {})",
                        other,
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl ::serde::Serialize for $name {
            fn serialize<S: ::serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> ::serde::Deserialize<'de> for $name {
            fn deserialize<D: ::serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = <String as ::serde::Deserialize>::deserialize(d)?;
                s.parse().map_err(::serde::de::Error::custom)
            }
        }
    };
}
pub(crate) use string_enum;

/// Opaque entity identifier. Cheap to clone.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(Arc<str>);

impl EntityId {
    pub fn new(id: impl AsRef<str>) -> Self {
        EntityId(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        EntityId::new(s)
    }
}

impl Serialize for EntityId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for EntityId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.is_empty() {
            return Err(serde::de::Error::custom("entity id must be non-empty"));
        }
        Ok(EntityId::new(s))
    }
}

string_enum! {
    pub enum EntityKind {
        District => "district",
        School => "school",
        Cmo => "cmo",
        County => "county",
        State => "state",
    }
}

string_enum! {
    pub enum GradeSpan {
        ElemK6 => "elem_k6",
        ElemK8 => "elem_k8",
        High9_12 => "high_9_12",
        UnifiedK12 => "unified_k12",
    }
}

impl GradeSpan {
    pub fn serves_grade(self, grade: u8) -> bool {
        match self {
            GradeSpan::ElemK6 => grade <= 6,
            GradeSpan::ElemK8 => grade <= 8,
            GradeSpan::High9_12 => (9..=12).contains(&grade),
            GradeSpan::UnifiedK12 => grade <= 12,
        }
    }
}

string_enum! {
    pub enum FundingType {
        StateFormula => "state_formula",
        BasicAid => "basic_aid",
    }
}

string_enum! {
    pub enum Governance {
        DistrictOperated => "district_operated",
        CharterDistrictFunded => "charter_district_funded",
        CharterDirectFunded => "charter_direct_funded",
    }
}

impl Governance {
    pub fn is_charter(self) -> bool {
        !matches!(self, Governance::DistrictOperated)
    }
}

string_enum! {
    /// Student populations for which subgrouped metrics are reported.
    pub enum Subgroup {
        All => "all",
        EnglishLearner => "english_learner",
        Frpm => "frpm",
        Hispanic => "hispanic",
        White => "white",
        AfricanAmerican => "african_american",
        Asian => "asian",
    }
}

string_enum! {
    pub enum ObsStatus {
        Reported => "reported",
        SuppressedOutlier => "suppressed_outlier",
        Corrected => "corrected",
        Missing => "missing",
    }
}

impl ObsStatus {
    /// Whether downstream consumers may use the value.
    pub fn is_usable(self) -> bool {
        matches!(self, ObsStatus::Reported | ObsStatus::Corrected)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct District {
    pub id: EntityId,
    pub name: String,
    pub county_id: EntityId,
    pub grade_span: GradeSpan,
    pub funding_type: FundingType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct School {
    pub id: EntityId,
    pub name: String,
    pub authorizer_district_id: EntityId,
    pub governance: Governance,
    pub cmo_id: Option<EntityId>,
}

/// Year used to pick the demographic snapshot for peer matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchYear {
    #[default]
    Latest,
    Year(i32),
}

impl Serialize for MatchYear {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MatchYear::Latest => s.serialize_str("latest"),
            MatchYear::Year(y) => s.serialize_i32(*y),
        }
    }
}

impl<'de> Deserialize<'de> for MatchYear {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Year(i32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Year(y) => Ok(MatchYear::Year(y)),
            Raw::Text(t) if t == "latest" => Ok(MatchYear::Latest),
            Raw::Text(t) => t
                .parse()
                .map(MatchYear::Year)
                .map_err(|_| serde::de::Error::custom(format!("bad match_year `{t}`"))),
        }
    }
}

/// A configured pair of metrics plotted against each other in every bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScatterPreset {
    pub x_metric: MetricId,
    pub y_metric: MetricId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlmanacConfig {
    pub k_peers: usize,
    pub outlier_threshold: f64,
    pub single_rule_threshold: f64,
    /// Weights for log enrollment, parent education, EL share, FRPM share.
    pub feature_weights: [f64; 4],
    pub match_year: MatchYear,
    pub min_longitudinal_points: usize,
    pub min_cross_sectional_entities: usize,
    pub scatter_presets: Vec<ScatterPreset>,
}

impl Default for AlmanacConfig {
    fn default() -> Self {
        let preset = |x: &str, y: &str| ScatterPreset {
            x_metric: MetricId::lookup(x).expect("preset metric in catalog"),
            y_metric: MetricId::lookup(y).expect("preset metric in catalog"),
        };
        AlmanacConfig {
            k_peers: 15,
            outlier_threshold: 3.5,
            single_rule_threshold: 5.0,
            feature_weights: [1.0; 4],
            match_year: MatchYear::Latest,
            min_longitudinal_points: 5,
            min_cross_sectional_entities: 8,
            scatter_presets: vec![
                preset("per_pupil_revenue_corrected", "math_score_g8"),
                preset("per_pupil_revenue_corrected", "grad_rate"),
                preset("students_per_teacher", "ela_score_g6"),
                preset("pct_frpm", "math_score_g6"),
                preset("pct_ap_courses", "grad_rate"),
                preset("suspension_rate", "ela_score_g8"),
            ],
        }
    }
}

impl AlmanacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_peers < 1 {
            return Err(AlmanacError::config("k_peers", "must be at least 1"));
        }
        if !(self.outlier_threshold > 0.0 && self.outlier_threshold.is_finite()) {
            return Err(AlmanacError::config("outlier_threshold", "must be positive"));
        }
        if !(self.single_rule_threshold >= self.outlier_threshold
            && self.single_rule_threshold.is_finite())
        {
            return Err(AlmanacError::config(
                "single_rule_threshold",
                "must be at least outlier_threshold",
            ));
        }
        if self
            .feature_weights
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(AlmanacError::config(
                "feature_weights",
                "weights must be finite and non-negative",
            ));
        }
        if self.feature_weights.iter().all(|w| *w == 0.0) {
            return Err(AlmanacError::config(
                "feature_weights",
                "at least one weight must be positive",
            ));
        }
        Ok(())
    }
}
