//! Peer matching: the districts whose students most resemble a client's.
//!
//! Four demographic features are standardized with median/MAD over every
//! eligible district of the same grade span, and peers are the nearest
//! districts in weighted Euclidean distance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::entities::governed_enrollment;
use crate::error::{AlmanacError, Result};
use crate::model::{AlmanacConfig, EntityId, GradeSpan, MatchYear, MetricId, Store, Subgroup};
use crate::quality::{robust_scale, RobustScale, ScaleBasis};

pub const FEATURE_COUNT: usize = 4;
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] =
    ["log_enrollment", "parent_ed_index", "pct_el", "pct_frpm"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub log_enrollment: f64,
    pub parent_ed_index: f64,
    pub pct_el: f64,
    pub pct_frpm: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [self.log_enrollment, self.parent_ed_index, self.pct_el, self.pct_frpm]
    }

    pub fn from_array(a: [f64; FEATURE_COUNT]) -> Self {
        FeatureVector {
            log_enrollment: a[0],
            parent_ed_index: a[1],
            pct_el: a[2],
            pct_frpm: a[3],
        }
    }
}

/// Features of a district in one year, from the cleaned store.
pub fn feature_vector(store: &Store, district: &EntityId, year: i32) -> Result<FeatureVector> {
    let ineligible = |reason: String| AlmanacError::Ineligible {
        district: district.to_string(),
        reason,
    };
    if store.district(district).is_none() {
        return Err(AlmanacError::NotFound(format!("district {district}")));
    }
    let enrollment = governed_enrollment(store, district, year);
    if enrollment == 0 {
        return Err(ineligible(format!("no effective enrollment in {year}")));
    }
    let feature = |id: &str| {
        let metric = MetricId::lookup(id).expect("demography metric in catalog");
        store
            .value(district, metric, year, Subgroup::All)
            .filter(|v| v.is_finite())
            .ok_or_else(|| ineligible(format!("{id} unavailable in {year}")))
    };
    Ok(FeatureVector {
        log_enrollment: (enrollment as f64).ln(),
        parent_ed_index: feature("parent_ed_index")?,
        pct_el: feature("pct_el")?,
        pct_frpm: feature("pct_frpm")?,
    })
}

/// Per-feature location and scale used for standardization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub median: f64,
    pub scale: f64,
    /// Zero dispersion: the feature is standardized to 0 for every district.
    pub degenerate: bool,
}

impl From<RobustScale> for FeatureScale {
    fn from(s: RobustScale) -> Self {
        FeatureScale {
            median: s.median,
            scale: s.scale,
            degenerate: s.basis == ScaleBasis::Degenerate,
        }
    }
}

impl FeatureScale {
    pub fn standardize(&self, x: f64) -> f64 {
        if self.degenerate {
            0.0
        } else {
            (x - self.median) / self.scale
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub vectors: Vec<[f64; FEATURE_COUNT]>,
    pub scales: [FeatureScale; FEATURE_COUNT],
}

/// Robust z-scores of each feature over the pool.
pub fn robust_standardize(pool: &[FeatureVector]) -> Result<Standardized> {
    if pool.len() < 2 {
        return Err(AlmanacError::InsufficientPool(format!(
            "standardization needs at least 2 districts, got {}",
            pool.len()
        )));
    }
    let mut scales = [FeatureScale { median: 0.0, scale: 0.0, degenerate: true }; FEATURE_COUNT];
    for (i, slot) in scales.iter_mut().enumerate() {
        let column: Vec<f64> = pool.iter().map(|f| f.to_array()[i]).collect();
        *slot = robust_scale(&column)?.into();
    }
    let vectors = pool
        .iter()
        .map(|f| {
            let a = f.to_array();
            std::array::from_fn(|i| scales[i].standardize(a[i]))
        })
        .collect();
    Ok(Standardized { vectors, scales })
}

/// Weighted squared differences, one per feature.
pub fn contributions(
    a: &[f64; FEATURE_COUNT],
    b: &[f64; FEATURE_COUNT],
    weights: &[f64; FEATURE_COUNT],
) -> [f64; FEATURE_COUNT] {
    std::array::from_fn(|i| {
        let d = a[i] - b[i];
        weights[i] * d * d
    })
}

pub fn distance(a: &[f64; FEATURE_COUNT], b: &[f64; FEATURE_COUNT], weights: &[f64; FEATURE_COUNT]) -> f64 {
    contributions(a, b, weights).iter().sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerMember {
    pub district_id: EntityId,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerSet {
    pub client: EntityId,
    pub grade_span: GradeSpan,
    pub match_year: i32,
    pub members: Vec<PeerMember>,
    /// Raw features of the client and every member.
    pub features: BTreeMap<EntityId, FeatureVector>,
    pub short_pool: bool,
    /// Number of eligible districts of this grade span, client included.
    pub pool_size: usize,
    pub feature_weights: [f64; FEATURE_COUNT],
    /// Standardization of each feature, keyed by feature name.
    pub scales: BTreeMap<String, FeatureScale>,
}

impl PeerSet {
    pub fn member_ids(&self) -> Vec<EntityId> {
        self.members.iter().map(|m| m.district_id.clone()).collect()
    }

    /// Client followed by members in peer order.
    pub fn district_ids(&self) -> Vec<EntityId> {
        std::iter::once(self.client.clone()).chain(self.member_ids()).collect()
    }

    pub fn scale_array(&self) -> [FeatureScale; FEATURE_COUNT] {
        std::array::from_fn(|i| self.scales[FEATURE_NAMES[i]])
    }

    pub fn standardized(&self, district: &EntityId) -> Option<[f64; FEATURE_COUNT]> {
        let scales = self.scale_array();
        let raw = self.features.get(district)?.to_array();
        Some(std::array::from_fn(|i| scales[i].standardize(raw[i])))
    }
}

#[derive(Debug, Clone)]
struct Pool {
    ids: Vec<EntityId>,
    raw: Vec<FeatureVector>,
    std: Standardized,
}

/// Eligibility and standardized features for every district at the match
/// year; answers peer queries without recomputing pools.
#[derive(Debug, Clone)]
pub struct PeerIndex {
    match_year: i32,
    k: usize,
    weights: [f64; FEATURE_COUNT],
    span_of: BTreeMap<EntityId, GradeSpan>,
    pools: BTreeMap<GradeSpan, Pool>,
    ineligible: BTreeMap<EntityId, String>,
}

pub fn resolve_match_year(store: &Store, cfg: &AlmanacConfig) -> i32 {
    match cfg.match_year {
        MatchYear::Latest => store.last_year(),
        MatchYear::Year(y) => y,
    }
}

impl PeerIndex {
    pub fn build(store: &Store, cfg: &AlmanacConfig) -> Result<Self> {
        cfg.validate()?;
        let match_year = resolve_match_year(store, cfg);
        let mut span_of = BTreeMap::new();
        let mut raw: BTreeMap<GradeSpan, (Vec<EntityId>, Vec<FeatureVector>)> = BTreeMap::new();
        let mut ineligible = BTreeMap::new();
        for d in store.districts() {
            span_of.insert(d.id.clone(), d.grade_span);
            if !store.years().contains(&match_year) {
                ineligible.insert(d.id.clone(), format!("match year {match_year} not in store"));
                continue;
            }
            match feature_vector(store, &d.id, match_year) {
                Ok(f) => {
                    let entry = raw.entry(d.grade_span).or_default();
                    entry.0.push(d.id.clone());
                    entry.1.push(f);
                }
                Err(AlmanacError::Ineligible { reason, .. }) => {
                    ineligible.insert(d.id.clone(), reason);
                }
                Err(e) => return Err(e),
            }
        }
        let mut pools = BTreeMap::new();
        for (span, (ids, features)) in raw {
            match robust_standardize(&features) {
                Ok(std) => {
                    pools.insert(span, Pool { ids, raw: features, std });
                }
                Err(AlmanacError::InsufficientPool(_)) => {
                    for id in ids {
                        ineligible.insert(id, format!("no other eligible {span} district"));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Ok(PeerIndex {
            match_year,
            k: cfg.k_peers,
            weights: cfg.feature_weights,
            span_of,
            pools,
            ineligible,
        })
    }

    pub fn match_year(&self) -> i32 {
        self.match_year
    }

    /// Districts that cannot be matched, with the reason.
    pub fn ineligible(&self) -> &BTreeMap<EntityId, String> {
        &self.ineligible
    }

    /// Eligible district ids in id order.
    pub fn eligible(&self) -> Vec<EntityId> {
        let mut ids: Vec<EntityId> = self.pools.values().flat_map(|p| p.ids.iter().cloned()).collect();
        ids.sort();
        ids
    }

    pub fn peer_set(&self, district: &EntityId) -> Result<PeerSet> {
        self.peer_set_k(district, self.k)
    }

    pub fn peer_set_k(&self, district: &EntityId, k: usize) -> Result<PeerSet> {
        let span = *self
            .span_of
            .get(district)
            .ok_or_else(|| AlmanacError::NotFound(format!("district {district}")))?;
        if let Some(reason) = self.ineligible.get(district) {
            return Err(AlmanacError::Ineligible {
                district: district.to_string(),
                reason: reason.clone(),
            });
        }
        let pool = &self.pools[&span];
        let ci = pool.ids.iter().position(|id| id == district).expect("eligible district in its pool");
        let client_z = &pool.std.vectors[ci];
        let mut ranked: Vec<(f64, usize)> = (0..pool.ids.len())
            .filter(|&i| i != ci)
            .map(|i| (distance(client_z, &pool.std.vectors[i], &self.weights), i))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| pool.ids[a.1].cmp(&pool.ids[b.1])));
        let short_pool = ranked.len() < k;
        ranked.truncate(k);

        let mut features = BTreeMap::new();
        features.insert(district.clone(), pool.raw[ci]);
        let members = ranked
            .into_iter()
            .map(|(d, i)| {
                features.insert(pool.ids[i].clone(), pool.raw[i]);
                PeerMember {
                    district_id: pool.ids[i].clone(),
                    distance: d,
                }
            })
            .collect();
        Ok(PeerSet {
            client: district.clone(),
            grade_span: span,
            match_year: self.match_year,
            members,
            features,
            short_pool,
            pool_size: pool.ids.len(),
            feature_weights: self.weights,
            scales: FEATURE_NAMES
                .iter()
                .zip(pool.std.scales)
                .map(|(n, s)| (n.to_string(), s))
                .collect(),
        })
    }
}

/// The `cfg.k_peers` most similar districts of the same grade span.
pub fn peer_set(store: &Store, district: &EntityId, cfg: &AlmanacConfig) -> Result<PeerSet> {
    PeerIndex::build(store, cfg)?.peer_set(district)
}
