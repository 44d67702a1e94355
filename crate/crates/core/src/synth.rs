//! Deterministic synthetic corpora shaped like the state's raw tables, with
//! a ground-truth sidecar describing every defect that was planted.
//!
//! Districts draw their demography from county-level latent factors so that
//! similar districts cluster. Raw district rows are what the state would
//! publish: aggregates over every school the district authorizes, including
//! direct-funded charters. Transient spikes are planted only in district
//! rows that charter re-association leaves as published.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entities::{aggregate_schools, reassociate_charters};
use crate::error::{AlmanacError, Result};
use crate::ingest::{schema, ColumnType, TABLES};
use crate::model::{
    metric_catalog, AggregationRule, AlmanacConfig, Cell, District, Entity, EntityId, EntityKind,
    FundingType, Governance, GradeSpan, MetricCategory, MetricId, MetricSource, ObsKey, ObsStatus,
    Provenance, School, Store, Subgroup,
};
use crate::quality::robust_scale;

/// Last year of every synthetic corpus.
pub const FINAL_YEAR: i32 = 2016;

/// Minimum robust z a planted spike must reach in each of its reference
/// series.
const SPIKE_MIN_Z: f64 = 5.0;
/// Minimum distance of a spike from its true value, in robust deviations of
/// the entity's clean series.
const SPIKE_MIN_DEVIATIONS: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_districts: usize,
    pub n_years: usize,
    pub seed: u64,
    pub spike_rate: f64,
    pub charter_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_districts: 956,
            n_years: 10,
            seed: 42,
            spike_rate: 0.002,
            charter_share: 0.10,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_districts < 20 {
            return Err(AlmanacError::config("n_districts", "must be at least 20"));
        }
        if self.n_years < 3 {
            return Err(AlmanacError::config("n_years", "must be at least 3"));
        }
        if !(0.0..=1.0).contains(&self.spike_rate) {
            return Err(AlmanacError::config("spike_rate", "must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.charter_share) {
            return Err(AlmanacError::config("charter_share", "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        (FINAL_YEAR - self.n_years as i32 + 1)..=FINAL_YEAR
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedSpike {
    pub key: ObsKey,
    pub true_value: f64,
    pub spiked_value: f64,
}

/// Revenue of one district-year split by who governs the students.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevenueSplit {
    pub district_operated: f64,
    pub direct_funded_charter: f64,
    pub reported_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub injected_spikes: Vec<InjectedSpike>,
    /// Every direct-funded charter and its CMO, if it has one.
    pub charter_links: BTreeMap<EntityId, Option<EntityId>>,
    /// Keyed by `district|year`.
    pub true_revenue_split: BTreeMap<String, RevenueSplit>,
    /// Revenue of district-governed schools over their enrollment, keyed by
    /// `district|year`.
    pub true_per_pupil: BTreeMap<String, f64>,
}

pub fn district_year_key(district: &EntityId, year: i32) -> String {
    format!("{district}|{year}")
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    /// Raw observations as they will be written, spikes included.
    pub store: Store,
    pub truth: GroundTruth,
}

fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

fn half_units(x: f64) -> f64 {
    ((x * 2.0).round() / 2.0).max(0.5)
}

fn metric(id: &str) -> MetricId {
    MetricId::lookup(id).unwrap_or_else(|| panic!("catalog lacks `{id}`"))
}

const PLACES: [&str; 24] = [
    "Alder", "Bay", "Cedar", "Delta", "Elm", "Foothill", "Granite", "Harbor", "Indian Wells",
    "Juniper", "Kings", "Laurel", "Mesa", "North Fork", "Oak Grove", "Pine", "Quail Hollow",
    "Redwood", "Sierra", "Tule", "Valley", "Willow", "Yucca", "Sequoia",
];

/// Subgroup-specific offsets, in `Subgroup::ALL` order.
const SCORE_OFFSET: [f64; 7] = [0.0, -45.0, -25.0, -20.0, 15.0, -30.0, 35.0];
const GRAD_OFFSET: [f64; 7] = [0.0, -8.0, -4.0, -3.0, 2.0, -6.0, 4.0];
const SUSPENSION_FACTOR: [f64; 7] = [1.0, 1.1, 1.3, 1.1, 0.8, 2.0, 0.4];

#[derive(Debug, Clone)]
struct DistrictLatent {
    ses: f64,
    el: f64,
    enrollment: f64,
    revenue_rate: f64,
}

#[derive(Debug, Clone)]
struct SchoolLatent {
    id: EntityId,
    span: GradeSpan,
    base_enrollment: f64,
    growth: f64,
    /// english_learner, frpm, hispanic, white, african_american, asian.
    shares: [f64; 6],
    parent_ed: f64,
    students_per_teacher: f64,
    suspension_rate: f64,
    ap_share: f64,
    score_effect: f64,
    grad_effect: f64,
    /// Revenue multiple of the authorizer's per-student rate; `None` for
    /// schools without a finance row of their own.
    reported_revenue_factor: Option<f64>,
}

struct Generator {
    cfg: SynthConfig,
    years: Vec<i32>,
    store: Store,
    districts: Vec<(District, DistrictLatent)>,
    schools: Vec<SchoolLatent>,
    truth: GroundTruth,
}

/// Generates a corpus in memory.
pub fn synthesize(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut g = Generator {
        cfg: cfg.clone(),
        years: cfg.years().collect(),
        store: Store::new(cfg.years(), AlmanacConfig::default()),
        districts: Vec::new(),
        schools: Vec::new(),
        truth: GroundTruth::default(),
    };
    g.entities();
    g.schools();
    g.enrollment();
    g.demography();
    g.staffing();
    g.discipline();
    g.courses();
    g.assessments();
    g.graduation();
    g.district_rows();
    g.finance();
    g.spikes()?;
    Ok(Corpus {
        store: g.store,
        truth: g.truth,
    })
}

/// Generates a corpus and writes its tables and `ground_truth.json`.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<GroundTruth> {
    let corpus = synthesize(cfg)?;
    write_corpus(&corpus, out_dir)?;
    Ok(corpus.truth)
}

impl Generator {
    fn put(&mut self, entity: &EntityId, m: MetricId, year: i32, sg: Subgroup, value: f64, table: &str) {
        self.store.put_observation(
            ObsKey::new(entity, m, year, sg),
            Cell::reported(value, Provenance::new(table)),
        );
    }

    fn entities(&mut self) {
        let mut rng = substream(self.cfg.seed, "entities");
        let n = self.cfg.n_districts;
        self.store.insert_entity(Entity {
            id: "CA".into(),
            kind: EntityKind::State,
            name: "State of California".into(),
        });
        let n_counties = (n / 16).clamp(3, 58);
        let mut counties = Vec::with_capacity(n_counties);
        for c in 0..n_counties {
            let id = EntityId::new(format!("C{:02}", c + 1));
            self.store.insert_entity(Entity {
                id: id.clone(),
                kind: EntityKind::County,
                name: format!("{} County", PLACES[c % PLACES.len()]),
            });
            counties.push((id, normal(&mut rng), normal(&mut rng), normal(&mut rng)));
        }

        let floor = 16.min(n / 4);
        let mut counts: Vec<usize> = [0.10, 0.40, 0.15, 0.35]
            .iter()
            .map(|q| ((q * n as f64).round() as usize).max(floor))
            .collect();
        let excess = counts.iter().sum::<usize>() as isize - n as isize;
        counts[1] = (counts[1] as isize - excess) as usize;
        let mut spans: Vec<GradeSpan> = GradeSpan::ALL
            .iter()
            .zip(&counts)
            .flat_map(|(s, &k)| std::iter::repeat_n(*s, k))
            .collect();
        spans.shuffle(&mut rng);

        for (i, span) in spans.into_iter().enumerate() {
            let (county, c_ses, c_el, c_size) = counties[rng.random_range(0..n_counties)].clone();
            let ses = 0.8 * c_ses + 0.6 * normal(&mut rng);
            let el = 0.8 * c_el + 0.6 * normal(&mut rng);
            let size = 0.5 * c_size + 0.9 * normal(&mut rng);
            let basic_aid = rng.random::<f64>() < 0.10;
            let suffix = match span {
                GradeSpan::ElemK6 | GradeSpan::ElemK8 => "Elementary",
                GradeSpan::High9_12 => "Union High",
                GradeSpan::UnifiedK12 => "Unified",
            };
            let district = District {
                id: EntityId::new(format!("D{:04}", i + 1)),
                name: format!("{} {suffix}", PLACES[rng.random_range(0..PLACES.len())]),
                county_id: county,
                grade_span: span,
                funding_type: if basic_aid { FundingType::BasicAid } else { FundingType::StateFormula },
            };
            let latent = DistrictLatent {
                ses,
                el,
                enrollment: (2500f64.ln() + 1.1 * size).exp().clamp(150.0, 80_000.0),
                revenue_rate: (9_500.0 + if basic_aid { 3_000.0 } else { 0.0 } - 600.0 * ses
                    + 500.0 * normal(&mut rng))
                .max(6_000.0),
            };
            self.store.insert_district(district.clone());
            self.districts.push((district, latent));
        }
    }

    fn school_latent(&self, rng: &mut ChaCha8Rng, id: EntityId, d: &DistrictLatent, span: GradeSpan, enrollment: f64, spread: f64) -> SchoolLatent {
        let ses = d.ses + spread * normal(rng);
        let el_share = (logistic(-1.3 + 0.9 * d.el) + 0.03 * normal(rng)).clamp(0.01, 0.8);
        let frpm = logistic(0.1 - 1.0 * ses + 0.2 * normal(rng)).clamp(0.03, 0.97);
        let hispanic = (0.1 + 0.7 * el_share + 0.08 * normal(rng)).clamp(0.02, 0.9);
        let rest = 1.0 - hispanic;
        let white = rest * logistic(0.3 + 0.8 * ses + 0.3 * normal(rng));
        let remaining = rest - white;
        let asian = remaining * rng.random_range(0.2..0.6);
        let african_american = remaining * rng.random_range(0.1..0.4);
        let serves_high = span.serves_grade(11);
        SchoolLatent {
            id,
            span,
            base_enrollment: enrollment,
            growth: 0.015 * normal(rng),
            shares: [el_share, frpm, hispanic, white, african_american, asian],
            parent_ed: (3.0 + 0.6 * ses - 0.3 * d.el + 0.15 * normal(rng)).clamp(1.2, 4.8),
            students_per_teacher: (21.0 - 1.5 * ses + normal(rng)).clamp(14.0, 32.0),
            suspension_rate: (4.0 - 1.5 * ses + 0.8 * normal(rng)).clamp(0.3, 15.0),
            ap_share: if serves_high {
                (0.08 + 0.04 * ses + 0.02 * normal(rng)).clamp(0.0, 0.3)
            } else {
                0.0
            },
            score_effect: 45.0 * ses + 8.0 * normal(rng),
            grad_effect: 5.0 * ses + 1.5 * normal(rng),
            reported_revenue_factor: None,
        }
    }

    fn schools(&mut self) {
        let mut rng = substream(self.cfg.seed, "schools");
        let mut next = 1usize;
        let mut school_id = || {
            let id = EntityId::new(format!("S{next:05}"));
            next += 1;
            id
        };
        let mut operated = 0usize;
        let districts = self.districts.clone();
        for (d, lat) in &districts {
            let n = ((lat.enrollment / 700.0).round() as usize).clamp(1, 6);
            for k in 0..n {
                let id = school_id();
                let governance = if k > 0 && rng.random::<f64>() < 0.05 {
                    Governance::CharterDistrictFunded
                } else {
                    Governance::DistrictOperated
                };
                let e = (lat.enrollment / n as f64 * (0.25 * normal(&mut rng)).exp()).max(40.0);
                let latent = self.school_latent(&mut rng, id.clone(), lat, d.grade_span, e, 0.2);
                self.store.insert_school(School {
                    id,
                    name: format!("{} School {}", d.name, k + 1),
                    authorizer_district_id: d.id.clone(),
                    governance,
                    cmo_id: None,
                });
                self.schools.push(latent);
                operated += 1;
            }
        }

        // Direct-funded charters make up `charter_share` of all schools.
        let share = self.cfg.charter_share;
        let n_charters = (share * operated as f64 / (1.0 - share)).round() as usize;
        let n_cmos = (n_charters / 5).max(2);
        let cmos: Vec<EntityId> = (1..=n_cmos).map(|i| EntityId::new(format!("M{i:03}"))).collect();
        for (i, id) in cmos.iter().enumerate() {
            self.store.insert_entity(Entity {
                id: id.clone(),
                kind: EntityKind::Cmo,
                name: format!("{} Charter Network {}", PLACES[i % PLACES.len()], i + 1),
            });
        }
        for _ in 0..n_charters {
            let (d, lat) = &districts[rng.random_range(0..districts.len())];
            let id = school_id();
            let cmo = (rng.random::<f64>() < 0.8).then(|| cmos[rng.random_range(0..cmos.len())].clone());
            let e = rng.random_range(150.0..600.0);
            let mut latent = self.school_latent(&mut rng, id.clone(), lat, d.grade_span, e, 0.5);
            if rng.random::<f64>() < 0.5 {
                latent.reported_revenue_factor = Some(rng.random_range(0.85..1.05));
            }
            self.truth.charter_links.insert(id.clone(), cmo.clone());
            self.store.insert_school(School {
                id,
                name: format!("{} Charter Academy", PLACES[rng.random_range(0..PLACES.len())]),
                authorizer_district_id: d.id.clone(),
                governance: Governance::CharterDirectFunded,
                cmo_id: cmo,
            });
            self.schools.push(latent);
        }
    }

    fn students(&self, school: &EntityId, year: i32, sg: Subgroup) -> f64 {
        self.store.value(school, metric("students"), year, sg).unwrap_or(0.0)
    }

    fn enrollment(&mut self) {
        let mut rng = substream(self.cfg.seed, "enrollment");
        let m = metric("students");
        for s in self.schools.clone() {
            for (t, &year) in self.years.clone().iter().enumerate() {
                let all = (s.base_enrollment * (1.0 + s.growth).powi(t as i32) * (0.02 * normal(&mut rng)).exp())
                    .round()
                    .max(20.0);
                self.put(&s.id, m, year, Subgroup::All, all, "enrollment");
                for (i, &sg) in Subgroup::ALL[1..].iter().enumerate() {
                    let n = (all * s.shares[i] * (0.04 * normal(&mut rng)).exp()).round().min(all);
                    self.put(&s.id, m, year, sg, n, "enrollment");
                }
            }
        }
    }

    fn demography(&mut self) {
        let mut rng = substream(self.cfg.seed, "demography");
        for s in self.schools.clone() {
            for year in self.years.clone() {
                let all = self.students(&s.id, year, Subgroup::All);
                let el = 100.0 * self.students(&s.id, year, Subgroup::EnglishLearner) / all;
                let frpm = 100.0 * self.students(&s.id, year, Subgroup::Frpm) / all;
                let parent_ed = (s.parent_ed + 0.03 * normal(&mut rng)).clamp(1.0, 5.0);
                self.put(&s.id, metric("pct_el"), year, Subgroup::All, round_to(el, 2), "demography");
                self.put(&s.id, metric("pct_frpm"), year, Subgroup::All, round_to(frpm, 2), "demography");
                self.put(&s.id, metric("parent_ed_index"), year, Subgroup::All, round_to(parent_ed, 2), "demography");
            }
        }
    }

    fn staffing(&mut self) {
        let mut rng = substream(self.cfg.seed, "staffing");
        for s in self.schools.clone() {
            for year in self.years.clone() {
                let all = self.students(&s.id, year, Subgroup::All);
                let teachers = half_units(all / s.students_per_teacher * (0.03 * normal(&mut rng)).exp());
                let admin = half_units(all / 220.0 * (0.08 * normal(&mut rng)).exp());
                self.put(&s.id, metric("teacher_fte"), year, Subgroup::All, teachers, "staffing");
                self.put(&s.id, metric("admin_fte"), year, Subgroup::All, admin, "staffing");
            }
        }
    }

    fn discipline(&mut self) {
        let mut rng = substream(self.cfg.seed, "discipline");
        for s in self.schools.clone() {
            for year in self.years.clone() {
                let noise = (0.08 * normal(&mut rng)).exp();
                for (i, &sg) in Subgroup::ALL.iter().enumerate() {
                    let n = self.students(&s.id, year, sg);
                    let rate = s.suspension_rate * SUSPENSION_FACTOR[i] * noise;
                    let suspensions = (n * rate / 100.0).round();
                    let expulsions = (n * rate / 100.0 * 0.06 * (0.2 * normal(&mut rng)).exp()).round();
                    self.put(&s.id, metric("suspensions"), year, sg, suspensions, "discipline");
                    self.put(&s.id, metric("expulsions"), year, sg, expulsions, "discipline");
                }
            }
        }
    }

    fn courses(&mut self) {
        let mut rng = substream(self.cfg.seed, "courses");
        for s in self.schools.clone() {
            for year in self.years.clone() {
                let all = self.students(&s.id, year, Subgroup::All);
                let total = (all / 9.0 * (0.05 * normal(&mut rng)).exp()).round().max(5.0);
                let ap = (total * s.ap_share * (0.1 * normal(&mut rng)).exp()).round().min(total);
                self.put(&s.id, metric("ap_course_count"), year, Subgroup::All, ap, "courses");
                self.put(&s.id, metric("total_course_count"), year, Subgroup::All, total, "courses");
            }
        }
    }

    fn assessments(&mut self) {
        let mut rng = substream(self.cfg.seed, "assessments");
        let tested: Vec<MetricId> = metric_catalog()
            .iter()
            .filter(|m| m.category == MetricCategory::Assessments)
            .map(|m| m.id)
            .collect();
        for s in self.schools.clone() {
            for (t, &year) in self.years.clone().iter().enumerate() {
                for &m in &tested {
                    let grade = m.def().assessed_grade().expect("assessment grade");
                    if !s.span.serves_grade(grade) {
                        continue;
                    }
                    let subject = if m.as_str().starts_with("math") { -10.0 } else { 5.0 };
                    let base = 2450.0 + 8.0 * f64::from(grade) + subject + s.score_effect + 1.5 * t as f64;
                    for (i, &sg) in Subgroup::ALL.iter().enumerate() {
                        if self.students(&s.id, year, sg) < 1.0 {
                            continue;
                        }
                        let score = base + SCORE_OFFSET[i] + 8.0 * normal(&mut rng);
                        self.put(&s.id, m, year, sg, round_to(score, 1), "assessments");
                    }
                }
            }
        }
    }

    fn graduation(&mut self) {
        let mut rng = substream(self.cfg.seed, "graduation");
        for s in self.schools.clone() {
            if !s.span.serves_grade(12) {
                continue;
            }
            for year in self.years.clone() {
                for (i, &sg) in Subgroup::ALL.iter().enumerate() {
                    if self.students(&s.id, year, sg) < 1.0 {
                        continue;
                    }
                    let grad = (86.0 + s.grad_effect + GRAD_OFFSET[i] + 1.5 * normal(&mut rng)).clamp(30.0, 99.5);
                    let dropout =
                        (9.0 - 0.6 * s.grad_effect - GRAD_OFFSET[i] / 2.0 + normal(&mut rng)).clamp(0.2, 50.0);
                    self.put(&s.id, metric("grad_rate"), year, sg, round_to(grad, 1), "graduation");
                    self.put(&s.id, metric("dropout_rate"), year, sg, round_to(dropout, 1), "graduation");
                }
            }
        }
    }

    /// Published district rows aggregate every school the district
    /// authorizes.
    fn district_rows(&mut self) {
        let metrics: Vec<MetricId> = metric_catalog()
            .iter()
            .filter(|m| {
                m.source == MetricSource::Base
                    && matches!(m.aggregation, AggregationRule::Sum | AggregationRule::EnrollmentWeighted)
            })
            .map(|m| m.id)
            .collect();
        let districts: Vec<EntityId> = self.districts.iter().map(|(d, _)| d.id.clone()).collect();
        for d in &districts {
            let schools = self.store.schools_authorized_by(d);
            let mut slots = BTreeSet::new();
            for s in &schools {
                for (k, _) in self.store.entity_cells(s) {
                    if metrics.contains(&k.metric) {
                        slots.insert((k.metric, k.year, k.subgroup));
                    }
                }
            }
            for (m, year, sg) in slots {
                if let (Some(v), _) = aggregate_schools(&self.store, &schools, m, year, sg) {
                    self.put(d, m, year, sg, v, table_of(m));
                }
            }
        }
    }

    fn finance(&mut self) {
        let mut rng = substream(self.cfg.seed, "finance");
        let revenue = metric("revenue_total");
        let expenditure = metric("expenditure_total");
        let by_id: HashMap<EntityId, SchoolLatent> =
            self.schools.iter().map(|s| (s.id.clone(), s.clone())).collect();
        for (d, lat) in self.districts.clone() {
            let schools = self.store.schools_authorized_by(&d.id);
            for (t, &year) in self.years.clone().iter().enumerate() {
                let rate = lat.revenue_rate * 1.025f64.powi(t as i32) * (0.01 * normal(&mut rng)).exp();
                let (mut operated, mut charter, mut governed) = (0.0, 0.0, 0.0);
                for s in &schools {
                    let n = self.students(s, year, Subgroup::All);
                    let direct = self.store.school(s).expect("school").governance == Governance::CharterDirectFunded;
                    if !direct {
                        operated += (rate * n).round();
                        governed += n;
                        continue;
                    }
                    match by_id[s].reported_revenue_factor {
                        Some(f) => {
                            let r = (rate * f * n).round();
                            let x = (r * rng.random_range(0.95..1.03)).round();
                            self.put(s, revenue, year, Subgroup::All, r, "finance");
                            self.put(s, expenditure, year, Subgroup::All, x, "finance");
                            charter += r;
                        }
                        None => charter += (rate * n).round(),
                    }
                }
                let total = operated + charter;
                self.put(&d.id, revenue, year, Subgroup::All, total, "finance");
                let spent = (total * rng.random_range(0.95..1.03)).round();
                self.put(&d.id, expenditure, year, Subgroup::All, spent, "finance");
                let key = district_year_key(&d.id, year);
                self.truth.true_revenue_split.insert(
                    key.clone(),
                    RevenueSplit {
                        district_operated: operated,
                        direct_funded_charter: charter,
                        reported_total: total,
                    },
                );
                if governed > 0.0 {
                    self.truth.true_per_pupil.insert(key, operated / governed);
                }
            }
        }
    }

    /// Plants transient spikes in published district rows that charter
    /// re-association keeps, checking each against the series screening
    /// will judge it by.
    fn spikes(&mut self) -> Result<()> {
        let target = (self.cfg.spike_rate * self.store.observation_count() as f64).round() as usize;
        if target == 0 {
            return Ok(());
        }
        let mut rng = substream(self.cfg.seed, "spikes");
        let (resolved, _) = reassociate_charters(&self.store)?;
        let with_charters: BTreeSet<EntityId> = self
            .store
            .schools()
            .filter(|s| s.governance == Governance::CharterDirectFunded)
            .map(|s| s.authorizer_district_id.clone())
            .collect();
        let span: HashMap<EntityId, GradeSpan> =
            self.store.districts().map(|d| (d.id.clone(), d.grade_span)).collect();

        type SeriesKey = (EntityId, MetricId, Subgroup);
        type PoolKey = (MetricId, i32, Subgroup, GradeSpan);
        let mut series: HashMap<SeriesKey, BTreeMap<i32, f64>> = HashMap::new();
        let mut pools: HashMap<PoolKey, BTreeMap<EntityId, f64>> = HashMap::new();
        let mut candidates = Vec::new();
        for (k, cell) in resolved.cells() {
            let Some(&sp) = span.get(&k.entity) else { continue };
            if cell.status == ObsStatus::Missing || k.metric.def().source != MetricSource::Base {
                continue;
            }
            series.entry((k.entity.clone(), k.metric, k.subgroup)).or_default().insert(k.year, cell.value);
            pools.entry((k.metric, k.year, k.subgroup, sp)).or_default().insert(k.entity.clone(), cell.value);
            if !with_charters.contains(&k.entity) && k.metric != metric("revenue_total") {
                candidates.push(k.clone());
            }
        }
        candidates.shuffle(&mut rng);

        let mut spiked_series: BTreeSet<SeriesKey> = BTreeSet::new();
        let mut spiked_pools: HashMap<PoolKey, usize> = HashMap::new();
        let mut spikes = Vec::new();
        for key in candidates {
            if spikes.len() == target {
                break;
            }
            let skey = (key.entity.clone(), key.metric, key.subgroup);
            let pkey = (key.metric, key.year, key.subgroup, span[&key.entity]);
            let pool_len = pools[&pkey].len();
            if spiked_series.contains(&skey) || spiked_pools.get(&pkey).copied().unwrap_or(0) * 10 >= pool_len {
                continue;
            }
            let v = series[&skey][&key.year];
            let long: Vec<f64> = series[&skey].values().copied().collect();
            let cross: Vec<f64> = pools[&pkey].values().copied().collect();
            let clean_scale = robust_scale(&long)?.scale;
            let cross_scale = robust_scale(&cross)?.scale;
            let magnitude = (SPIKE_MIN_DEVIATIONS * clean_scale)
                .max(6.0 * cross_scale)
                .max(v.abs() * 0.5)
                .max(1.0)
                * rng.random_range(1.0..2.0);
            let up_first = rng.random::<bool>();
            let def = key.metric.def();
            let chosen = [up_first, !up_first].into_iter().find_map(|up| {
                let x = round_like(key.metric, if up { v + magnitude } else { v - magnitude });
                if let Some((lo, hi)) = def.valid_range() {
                    if x < lo || x > hi {
                        return None;
                    }
                }
                if (x - v).abs() < SPIKE_MIN_DEVIATIONS * clean_scale {
                    return None;
                }
                let exceeds = |values: &[f64], old: f64| {
                    let mut with: Vec<f64> = values.to_vec();
                    if let Some(p) = with.iter().position(|&y| y == old) {
                        with[p] = x;
                    }
                    robust_scale(&with).map(|s| s.exceeds(x, SPIKE_MIN_Z)).unwrap_or(false)
                };
                (exceeds(&long, v) && exceeds(&cross, v)).then_some(x)
            });
            let Some(x) = chosen else { continue };
            series.get_mut(&skey).expect("series").insert(key.year, x);
            pools.get_mut(&pkey).expect("pool").insert(key.entity.clone(), x);
            spiked_series.insert(skey);
            *spiked_pools.entry(pkey).or_default() += 1;
            let provenance = self.store.cell(&key).expect("candidate cell").provenance.clone();
            self.store.put_observation(key.clone(), Cell::reported(x, provenance));
            spikes.push(InjectedSpike {
                key,
                true_value: v,
                spiked_value: x,
            });
        }
        spikes.sort_by(|a, b| a.key.cmp(&b.key));
        self.truth.injected_spikes = spikes;
        Ok(())
    }
}

/// Rounds a value to the precision its table column carries.
fn round_like(m: MetricId, x: f64) -> f64 {
    match m.as_str() {
        "teacher_fte" | "admin_fte" => half_units(x),
        id if column_type(id) == Some(ColumnType::Integer) => x.round(),
        _ => round_to(x, 2),
    }
}

fn column_type(metric: &str) -> Option<ColumnType> {
    TABLES.iter().filter_map(|t| schema(t)).find_map(|s| {
        s.columns.iter().find(|c| c.name == metric).map(|c| c.ty)
    })
}

/// Table a base metric is published in.
pub fn table_of(m: MetricId) -> &'static str {
    if m.def().category == MetricCategory::Assessments {
        return "assessments";
    }
    TABLES
        .iter()
        .find(|t| schema(t).is_some_and(|s| s.value_columns().iter().any(|(_, c)| *c == m)))
        .copied()
        .unwrap_or_else(|| panic!("no table publishes {m}"))
}

fn format_value(v: f64) -> String {
    format!("{v}")
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> AlmanacError + '_ {
    move |e| AlmanacError::io(path, e)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AlmanacError + '_ {
    move |e| AlmanacError::io(path, std::io::Error::other(e))
}

/// Writes the ten corpus tables and `ground_truth.json`.
pub fn write_corpus(corpus: &Corpus, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let store = &corpus.store;

    let path = out_dir.join("entities.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(schema("entities").expect("schema").header()).map_err(csv_err(&path))?;
    let mut rows: Vec<[String; 6]> = store
        .other_entities()
        .map(|e| [e.id.to_string(), e.kind.to_string(), e.name.clone(), String::new(), String::new(), String::new()])
        .collect();
    rows.extend(store.districts().map(|d| {
        [
            d.id.to_string(),
            EntityKind::District.to_string(),
            d.name.clone(),
            d.county_id.to_string(),
            d.grade_span.to_string(),
            d.funding_type.to_string(),
        ]
    }));
    rows.sort();
    for r in rows {
        w.write_record(&r).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out_dir.join("schools.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(schema("schools").expect("schema").header()).map_err(csv_err(&path))?;
    for s in store.schools() {
        w.write_record([
            s.id.as_str(),
            &s.name,
            s.authorizer_district_id.as_str(),
            s.governance.as_str(),
            s.cmo_id.as_ref().map(EntityId::as_str).unwrap_or(""),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    // Bucket cells into table rows keyed by (entity, year, subgroup[, metric]).
    type RowKey = (EntityId, i32, Subgroup, Option<MetricId>);
    let mut tables: BTreeMap<&str, BTreeMap<RowKey, BTreeMap<MetricId, f64>>> = BTreeMap::new();
    for (k, cell) in store.cells() {
        let table = table_of(k.metric);
        let long = table == "assessments";
        tables
            .entry(table)
            .or_default()
            .entry((k.entity.clone(), k.year, k.subgroup, long.then_some(k.metric)))
            .or_default()
            .insert(k.metric, cell.value);
    }
    for table in &TABLES[2..] {
        let s = schema(table).expect("schema");
        let path = out_dir.join(s.file_name());
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(s.header()).map_err(csv_err(&path))?;
        let value_columns = s.value_columns();
        for ((entity, year, sg, long), values) in tables.remove(table).unwrap_or_default() {
            let mut record = vec![entity.to_string(), year.to_string()];
            if s.has_subgroup() {
                record.push(sg.to_string());
            }
            match long {
                Some(m) => {
                    record.push(m.to_string());
                    record.push(format_value(values[&m]));
                }
                None => {
                    for (_, m) in &value_columns {
                        record.push(values.get(m).map(|v| format_value(*v)).unwrap_or_default());
                    }
                }
            }
            w.write_record(&record).map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }

    let path = out_dir.join("ground_truth.json");
    let mut text = serde_json::to_string_pretty(&corpus.truth)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
