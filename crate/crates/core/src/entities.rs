//! Re-attribution of direct-funded charter schools.
//!
//! The state files a charter school under the district that authorized it.
//! Direct-funded charters are not governed by that district, so their
//! students, staff and results are taken out of the district's aggregates
//! and rolled up under the charter management organization that runs them
//! (or under a one-school stand-in when no CMO is on record).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{AlmanacError, Result};
use crate::model::{
    string_enum, AggregationRule, Cell, Entity, EntityId, EntityKind, Governance, MetricId,
    ObsKey, ObsStatus, Provenance, Store, Subgroup,
};

string_enum! {
    pub enum ParentKind {
        Cmo => "cmo",
        IndependentCharter => "independent_charter",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharterMove {
    pub school_id: EntityId,
    pub from_district_id: EntityId,
    pub to_parent_id: EntityId,
    pub parent_kind: ParentKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionLog {
    /// Sorted by school id.
    pub moves: Vec<CharterMove>,
    pub affected_cells: usize,
}

/// Id of the stand-in parent for a charter without a CMO.
pub fn independent_charter_id(school: &EntityId) -> EntityId {
    EntityId::new(format!("IND-{school}"))
}

fn students() -> MetricId {
    MetricId::lookup("students").expect("catalog has students")
}

/// Rolls one metric cell up over `schools`.
///
/// Sums add every usable school value (an empty sum is zero). Weighted
/// metrics average usable values weighted by the same subgroup's enrollment;
/// with no positive weight the result is `None`. Returns the number of
/// contributing schools alongside the value.
pub(crate) fn aggregate_schools(
    store: &Store,
    schools: &[EntityId],
    metric: MetricId,
    year: i32,
    subgroup: Subgroup,
) -> (Option<f64>, usize) {
    let def = metric.def();
    match def.aggregation {
        AggregationRule::Sum => {
            let mut total = 0.0;
            let mut n = 0;
            for s in schools {
                if let Some(v) = store.value(s, metric, year, subgroup) {
                    total += v;
                    n += 1;
                }
            }
            (Some(total), n)
        }
        AggregationRule::EnrollmentWeighted => {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut n = 0;
            for s in schools {
                let (Some(v), Some(w)) = (
                    store.value(s, metric, year, subgroup),
                    store.value(s, students(), year, subgroup),
                ) else {
                    continue;
                };
                if w > 0.0 {
                    num += w * v;
                    den += w;
                    n += 1;
                }
            }
            if den > 0.0 {
                let mut mean = num / den;
                if let Some((lo, hi)) = def.valid_range() {
                    mean = mean.clamp(lo, hi);
                }
                (Some(mean), n)
            } else {
                (None, 0)
            }
        }
        AggregationRule::ReportedOnly | AggregationRule::Computed => (None, 0),
    }
}

fn aggregatable(metric: MetricId) -> bool {
    matches!(
        metric.def().aggregation,
        AggregationRule::Sum | AggregationRule::EnrollmentWeighted
    )
}

/// Cell keys (metric, year, subgroup) that any of `entities` carries for
/// aggregatable metrics.
fn aggregatable_slots(store: &Store, entities: &[EntityId]) -> BTreeSet<(MetricId, i32, Subgroup)> {
    let mut slots = BTreeSet::new();
    for e in entities {
        for (k, _) in store.entity_cells(e) {
            if aggregatable(k.metric) {
                slots.insert((k.metric, k.year, k.subgroup));
            }
        }
    }
    slots
}

/// Moves direct-funded charters out of their authorizers' aggregates and
/// under their operators.
pub fn reassociate_charters(store: &Store) -> Result<(Store, CorrectionLog)> {
    let mut out = store.clone();
    let mut log = CorrectionLog::default();

    for school in store.schools() {
        if school.governance != Governance::CharterDirectFunded
            || store.reassignments().contains_key(&school.id)
        {
            continue;
        }
        let (parent, kind) = match &school.cmo_id {
            Some(cmo) => {
                if store.kind_of(cmo) != Some(EntityKind::Cmo) {
                    return Err(AlmanacError::DanglingReference(format!(
                        "school {} references unknown CMO {}",
                        school.id, cmo
                    )));
                }
                (cmo.clone(), ParentKind::Cmo)
            }
            None => {
                let id = independent_charter_id(&school.id);
                out.insert_entity(Entity {
                    id: id.clone(),
                    kind: EntityKind::Cmo,
                    name: format!("{} (independent charter)", school.name),
                });
                (id, ParentKind::IndependentCharter)
            }
        };
        out.reassign(school.id.clone(), parent.clone());
        log.moves.push(CharterMove {
            school_id: school.id.clone(),
            from_district_id: school.authorizer_district_id.clone(),
            to_parent_id: parent,
            parent_kind: kind,
        });
    }
    log.moves.sort_by(|a, b| a.school_id.cmp(&b.school_id));
    if log.moves.is_empty() {
        return Ok((out, log));
    }

    let districts: BTreeSet<&EntityId> = log.moves.iter().map(|m| &m.from_district_id).collect();
    for district in districts {
        let remaining: Vec<EntityId> = out
            .schools_authorized_by(district)
            .into_iter()
            .filter(|s| !out.reassignments().contains_key(s))
            .collect();
        let mut slots = aggregatable_slots(store, std::slice::from_ref(district));
        slots.extend(aggregatable_slots(store, &remaining));
        for (metric, year, subgroup) in slots {
            let key = ObsKey::new(district, metric, year, subgroup);
            let original = store.cell(&key);
            let (value, contributors) = aggregate_schools(&out, &remaining, metric, year, subgroup);
            if original.is_none() && contributors == 0 {
                continue;
            }
            let source = original
                .map(|c| c.provenance.to_string())
                .unwrap_or_else(|| "absent".to_string());
            let original_value = original
                .map(|c| c.value.to_string())
                .unwrap_or_else(|| "none".to_string());
            let cell = match value {
                Some(v) => Cell {
                    value: v,
                    status: ObsStatus::Corrected,
                    provenance: Provenance::new(format!(
                        "{source}; charter_reassociation original={original_value}"
                    )),
                },
                None => Cell {
                    value: f64::NAN,
                    status: ObsStatus::Missing,
                    provenance: Provenance::new(format!(
                        "{source}; charter_reassociation no remaining enrollment original={original_value}"
                    )),
                },
            };
            out.put_observation(key, cell);
            log.affected_cells += 1;
        }
    }

    let parents: BTreeSet<&EntityId> = log.moves.iter().map(|m| &m.to_parent_id).collect();
    for parent in parents {
        let attached = out.schools_attached_to(parent);
        let provenance = Provenance::new(format!("aggregate of {} schools", attached.len()));
        for (metric, year, subgroup) in aggregatable_slots(store, &attached) {
            if let (Some(v), n) = aggregate_schools(&out, &attached, metric, year, subgroup) {
                if n > 0 {
                    out.put_observation(
                        ObsKey::new(parent, metric, year, subgroup),
                        Cell::reported(v, provenance.clone()),
                    );
                    log.affected_cells += 1;
                }
            }
        }
    }
    Ok((out, log))
}

/// Enrollment over the district-operated and district-funded charter
/// schools a district governs.
pub fn effective_enrollment(store: &Store, district: &EntityId, year: i32) -> Result<u64> {
    if store.district(district).is_none() {
        return Err(AlmanacError::NotFound(format!("district {district}")));
    }
    if !store.years().contains(&year) {
        return Err(AlmanacError::NotFound(format!("year {year}")));
    }
    Ok(governed_enrollment(store, district, year))
}

pub(crate) fn governed_enrollment(store: &Store, district: &EntityId, year: i32) -> u64 {
    store
        .schools_authorized_by(district)
        .iter()
        .filter(|s| {
            store
                .school(s)
                .is_some_and(|s| s.governance != Governance::CharterDirectFunded)
        })
        .filter_map(|s| store.value(s, students(), year, Subgroup::All))
        .map(|v| v.max(0.0).round() as u64)
        .sum()
}

/// Enrollment of the direct-funded charters a district authorizes.
pub(crate) fn direct_charter_enrollment(
    store: &Store,
    district: &EntityId,
    year: i32,
) -> BTreeMap<EntityId, f64> {
    store
        .schools_authorized_by(district)
        .into_iter()
        .filter(|s| {
            store
                .school(s)
                .is_some_and(|s| s.governance == Governance::CharterDirectFunded)
        })
        .map(|s| {
            let e = store.value(&s, students(), year, Subgroup::All).unwrap_or(0.0);
            (s, e)
        })
        .collect()
}
