use std::collections::HashMap;
use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::string_enum;

/// Bumped whenever a metric is added, removed or redefined.
pub const CATALOG_VERSION: &str = "2016.1";

string_enum! {
    pub enum MetricCategory {
        Finance => "finance",
        Staffing => "staffing",
        Discipline => "discipline",
        StudentDemography => "student_demography",
        CourseOfferings => "course_offerings",
        Assessments => "assessments",
        GraduationDropout => "graduation_dropout",
    }
}

string_enum! {
    pub enum Unit {
        Count => "count",
        Percent => "percent",
        CurrencyPerStudent => "currency_per_student",
        Currency => "currency",
        Ratio => "ratio",
        Score => "score",
    }
}

string_enum! {
    pub enum Polarity {
        HigherBetter => "higher_better",
        LowerBetter => "lower_better",
        Neutral => "neutral",
    }
}

string_enum! {
    /// Whether a metric is read from a raw table or computed from other cells.
    pub enum MetricSource {
        Base => "base",
        Derived => "derived",
    }
}

string_enum! {
    /// How school-level cells roll up into a parent entity.
    pub enum AggregationRule {
        Sum => "sum",
        EnrollmentWeighted => "enrollment_weighted",
        ReportedOnly => "reported_only",
        Computed => "computed",
    }
}

/// Catalog-backed metric identifier. Only ids present in the catalog can be
/// constructed, so holding a `MetricId` proves the metric exists.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MetricId(&'static str);

impl MetricId {
    pub fn lookup(id: &str) -> Option<MetricId> {
        INDEX.get(id).map(|&i| CATALOG[i].id)
    }

    pub fn as_str(self) -> &'static str {
        self.0
    }

    pub fn def(self) -> &'static MetricDef {
        &CATALOG[INDEX[self.0]]
    }
}

impl fmt::Debug for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

impl Serialize for MetricId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.0)
    }
}

impl<'de> Deserialize<'de> for MetricId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        MetricId::lookup(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricDef {
    pub id: MetricId,
    pub display_name: String,
    pub category: MetricCategory,
    pub unit: Unit,
    pub polarity: Polarity,
    pub subgrouped: bool,
    pub source: MetricSource,
    pub aggregation: AggregationRule,
}

impl MetricDef {
    /// Closed interval a stored value must fall in, if constrained.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        match (self.unit, self.id.as_str()) {
            (Unit::Percent, _) => Some((0.0, 100.0)),
            (_, "parent_ed_index") => Some((1.0, 5.0)),
            (Unit::Count | Unit::Currency, _) => Some((0.0, f64::INFINITY)),
            _ => None,
        }
    }

    pub fn subgroups(&self) -> &'static [super::Subgroup] {
        if self.subgrouped {
            super::Subgroup::ALL
        } else {
            &[super::Subgroup::All]
        }
    }

    /// Grade served by an assessment metric (`math_score_g8` → 8).
    pub fn assessed_grade(&self) -> Option<u8> {
        if self.category != MetricCategory::Assessments {
            return None;
        }
        self.id.as_str().rsplit("_g").next()?.parse().ok()
    }
}

use AggregationRule::{Computed, EnrollmentWeighted, ReportedOnly, Sum};
use MetricCategory::*;
use Polarity::{HigherBetter as Hi, LowerBetter as Lo, Neutral as Ne};
use Unit::*;

type Row = (
    &'static str,
    &'static str,
    MetricCategory,
    Unit,
    Polarity,
    bool,
    AggregationRule,
);

#[rustfmt::skip]
const ROWS: [Row; 56] = [
    ("revenue_total", "Total revenue", Finance, Currency, Ne, false, ReportedOnly),
    ("expenditure_total", "Total expenditure", Finance, Currency, Ne, false, ReportedOnly),
    ("per_pupil_revenue_naive", "Revenue per student (as published)", Finance, CurrencyPerStudent, Hi, false, Computed),
    ("per_pupil_revenue_corrected", "Revenue per student (charter-corrected)", Finance, CurrencyPerStudent, Hi, false, Computed),
    ("per_pupil_expenditure", "Expenditure per student", Finance, CurrencyPerStudent, Ne, false, Computed),
    ("expenditure_to_revenue_ratio", "Expenditure to revenue", Finance, Ratio, Ne, false, Computed),
    ("charter_revenue_share", "Direct-funded charter share of revenue", Finance, Percent, Ne, false, Computed),
    ("revenue_per_teacher", "Revenue per teacher FTE", Finance, Currency, Ne, false, Computed),

    ("teacher_fte", "Teacher FTE", Staffing, Count, Ne, false, Sum),
    ("admin_fte", "Administrator FTE", Staffing, Count, Ne, false, Sum),
    ("teacher_fte_per_100", "Teachers per 100 students", Staffing, Ratio, Hi, false, Computed),
    ("admin_fte_per_100", "Administrators per 100 students", Staffing, Ratio, Ne, false, Computed),
    ("students_per_teacher", "Students per teacher", Staffing, Ratio, Lo, false, Computed),
    ("students_per_admin", "Students per administrator", Staffing, Ratio, Ne, false, Computed),
    ("teachers_per_admin", "Teachers per administrator", Staffing, Ratio, Ne, false, Computed),
    ("admin_share_pct", "Administrators as share of staff", Staffing, Percent, Lo, false, Computed),

    ("suspensions", "Suspensions", Discipline, Count, Lo, true, Sum),
    ("expulsions", "Expulsions", Discipline, Count, Lo, true, Sum),
    ("suspension_rate", "Suspension rate", Discipline, Percent, Lo, true, Computed),
    ("expulsion_rate", "Expulsion rate", Discipline, Percent, Lo, true, Computed),
    ("removal_rate", "Suspensions and expulsions per 100 students", Discipline, Ratio, Lo, false, Computed),
    ("expulsion_share_pct", "Expulsions as share of removals", Discipline, Percent, Lo, false, Computed),
    ("suspensions_per_teacher", "Suspensions per teacher", Discipline, Ratio, Lo, false, Computed),
    ("expulsions_per_1000", "Expulsions per 1000 students", Discipline, Ratio, Lo, false, Computed),

    ("students", "Enrollment", StudentDemography, Count, Ne, true, Sum),
    ("pct_el", "English learners", StudentDemography, Percent, Ne, false, EnrollmentWeighted),
    ("pct_frpm", "Free or reduced-price meal eligible", StudentDemography, Percent, Ne, false, EnrollmentWeighted),
    ("parent_ed_index", "Parent education index", StudentDemography, Score, Ne, false, EnrollmentWeighted),
    ("pct_hispanic", "Hispanic students", StudentDemography, Percent, Ne, false, Computed),
    ("pct_white", "White students", StudentDemography, Percent, Ne, false, Computed),
    ("pct_african_american", "African American students", StudentDemography, Percent, Ne, false, Computed),
    ("pct_asian", "Asian students", StudentDemography, Percent, Ne, false, Computed),

    ("ap_course_count", "AP courses offered", CourseOfferings, Count, Hi, false, Sum),
    ("total_course_count", "Courses offered", CourseOfferings, Count, Hi, false, Sum),
    ("pct_ap_courses", "AP share of courses", CourseOfferings, Percent, Hi, false, Computed),
    ("ap_courses_per_100", "AP courses per 100 students", CourseOfferings, Ratio, Hi, false, Computed),
    ("courses_per_100", "Courses per 100 students", CourseOfferings, Ratio, Hi, false, Computed),
    ("courses_per_teacher", "Courses per teacher", CourseOfferings, Ratio, Ne, false, Computed),
    ("non_ap_course_count", "Non-AP courses offered", CourseOfferings, Count, Ne, false, Computed),
    ("ap_courses_per_teacher", "AP courses per teacher", CourseOfferings, Ratio, Hi, false, Computed),

    ("math_score_g6", "Math scale score, grade 6", Assessments, Score, Hi, true, EnrollmentWeighted),
    ("math_score_g7", "Math scale score, grade 7", Assessments, Score, Hi, true, EnrollmentWeighted),
    ("math_score_g8", "Math scale score, grade 8", Assessments, Score, Hi, true, EnrollmentWeighted),
    ("ela_score_g6", "ELA scale score, grade 6", Assessments, Score, Hi, true, EnrollmentWeighted),
    ("ela_score_g7", "ELA scale score, grade 7", Assessments, Score, Hi, true, EnrollmentWeighted),
    ("ela_score_g8", "ELA scale score, grade 8", Assessments, Score, Hi, true, EnrollmentWeighted),
    ("math_score_g11", "Math scale score, grade 11", Assessments, Score, Hi, true, EnrollmentWeighted),
    ("ela_score_g11", "ELA scale score, grade 11", Assessments, Score, Hi, true, EnrollmentWeighted),

    ("grad_rate", "Graduation rate", GraduationDropout, Percent, Hi, true, EnrollmentWeighted),
    ("dropout_rate", "Dropout rate", GraduationDropout, Percent, Lo, true, EnrollmentWeighted),
    ("non_grad_rate", "Non-graduation rate", GraduationDropout, Percent, Lo, true, Computed),
    ("retention_rate", "Retention rate", GraduationDropout, Percent, Hi, true, Computed),
    ("grad_to_dropout_ratio", "Graduates per dropout", GraduationDropout, Ratio, Hi, false, Computed),
    ("est_dropouts", "Estimated dropouts", GraduationDropout, Count, Lo, true, Computed),
    ("grad_rate_relative", "Graduation rate relative to all students", GraduationDropout, Ratio, Hi, true, Computed),
    ("dropout_rate_relative", "Dropout rate relative to all students", GraduationDropout, Ratio, Lo, true, Computed),
];

static CATALOG: LazyLock<Vec<MetricDef>> = LazyLock::new(|| {
    ROWS.iter()
        .map(|&(id, name, category, unit, polarity, subgrouped, aggregation)| MetricDef {
            id: MetricId(id),
            display_name: name.to_string(),
            category,
            unit,
            polarity,
            subgrouped,
            source: if aggregation == Computed {
                MetricSource::Derived
            } else {
                MetricSource::Base
            },
            aggregation,
        })
        .collect()
});

static INDEX: LazyLock<HashMap<&'static str, usize>> =
    LazyLock::new(|| ROWS.iter().enumerate().map(|(i, r)| (r.0, i)).collect());

/// The versioned metric catalog, in display order.
pub fn metric_catalog() -> Vec<MetricDef> {
    CATALOG.clone()
}

/// Borrowed catalog entry for `id`, if it exists.
pub fn metric_def(id: &str) -> Option<&'static MetricDef> {
    INDEX.get(id).map(|&i| &CATALOG[i])
}

pub(crate) fn catalog_slice() -> &'static [MetricDef] {
    &CATALOG
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, HashSet};

    #[test]
    fn catalog_has_56_metrics_8_per_category() {
        let cat = metric_catalog();
        assert_eq!(cat.len(), 56);
        let mut per: BTreeMap<MetricCategory, usize> = BTreeMap::new();
        for m in &cat {
            *per.entry(m.category).or_default() += 1;
        }
        assert_eq!(per.len(), 7);
        assert!(per.values().all(|&n| n == 8));
    }

    #[test]
    fn catalog_ids_unique_and_stable() {
        let cat = metric_catalog();
        let ids: HashSet<_> = cat.iter().map(|m| m.id).collect();
        assert_eq!(ids.len(), cat.len());
        assert_eq!(cat, metric_catalog());
    }

    #[test]
    fn lookup_and_grade() {
        let m = MetricId::lookup("math_score_g11").unwrap();
        assert_eq!(m.def().assessed_grade(), Some(11));
        assert_eq!(metric_def("grad_rate").unwrap().assessed_grade(), None);
        assert!(MetricId::lookup("nope").is_none());
        let j = serde_json::to_string(&m).unwrap();
        assert_eq!(j, "\"math_score_g11\"");
        assert!(serde_json::from_str::<MetricId>("\"nope\"").is_err());
    }

    #[test]
    fn percent_metrics_are_range_constrained() {
        for m in metric_catalog() {
            if m.unit == Unit::Percent {
                assert_eq!(m.valid_range(), Some((0.0, 100.0)), "{}", m.id);
            }
        }
    }
}
