use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{EntityKind, ObsStatus, Store, Subgroup};

/// One broken invariant, with enough context to find the offending row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    pub key: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, invariant: &str, key: impl ToString, message: impl Into<String>) {
        self.violations.push(Violation {
            invariant: invariant.to_string(),
            key: key.to_string(),
            message: message.into(),
        });
    }
}

/// Checks type invariants and referential integrity of a store.
pub fn validate_store(store: &Store) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = BTreeSet::new();

    for d in store.districts() {
        if d.id.as_str().is_empty() {
            report.push("non_empty_id", "", "district with empty id");
        }
        seen.insert(d.id.clone());
        if store.kind_of(&d.county_id) != Some(EntityKind::County) {
            report.push(
                "district_county",
                &d.id,
                format!("county_id {} is not a county", d.county_id),
            );
        }
    }
    for s in store.schools() {
        if s.id.as_str().is_empty() {
            report.push("non_empty_id", "", "school with empty id");
        }
        if !seen.insert(s.id.clone()) {
            report.push("unique_id", &s.id, "id used by more than one entity");
        }
        if store.district(&s.authorizer_district_id).is_none() {
            report.push(
                "school_authorizer",
                &s.id,
                format!("authorizer {} is not a district", s.authorizer_district_id),
            );
        }
        if let Some(cmo) = &s.cmo_id {
            if !s.governance.is_charter() {
                report.push("school_cmo", &s.id, "cmo_id set on a district-operated school");
            }
            if store.kind_of(cmo) != Some(EntityKind::Cmo) {
                report.push("school_cmo", &s.id, format!("cmo_id {cmo} is not a CMO"));
            }
        }
    }
    let mut states = 0;
    for e in store.other_entities() {
        if e.id.as_str().is_empty() {
            report.push("non_empty_id", "", "entity with empty id");
        }
        if !seen.insert(e.id.clone()) {
            report.push("unique_id", &e.id, "id used by more than one entity");
        }
        match e.kind {
            EntityKind::State => states += 1,
            EntityKind::District | EntityKind::School => {
                report.push("entity_kind", &e.id, "districts and schools have dedicated tables")
            }
            _ => {}
        }
    }
    if states != 1 {
        report.push("single_state", "", format!("expected exactly one state, found {states}"));
    }
    for (school, parent) in store.reassignments() {
        if store.school(school).is_none() {
            report.push("reassignment", school, "reassigned id is not a school");
        }
        if store.kind_of(parent) != Some(EntityKind::Cmo) {
            report.push("reassignment", school, format!("parent {parent} is not a CMO"));
        }
    }

    let years = store.years();
    let mut years_seen = BTreeSet::new();
    for (key, cell) in store.cells() {
        if store.kind_of(&key.entity).is_none() {
            report.push(
                "observation_entity",
                key,
                format!("unknown entity id {}", key.entity),
            );
        }
        if !years.contains(&key.year) {
            report.push("observation_year", key, format!("year {} outside store range", key.year));
        }
        years_seen.insert(key.year);
        let def = key.metric.def();
        if !def.subgrouped && key.subgroup != Subgroup::All {
            report.push("subgroup", key, format!("{} is not reported by subgroup", key.metric));
        }
        if cell.status == ObsStatus::Missing {
            continue;
        }
        if !cell.value.is_finite() {
            report.push("finite_value", key, "non-missing value is not finite");
            continue;
        }
        if let Some((lo, hi)) = def.valid_range() {
            if cell.value < lo || cell.value > hi {
                report.push(
                    "value_range",
                    key,
                    format!("value {} outside [{lo}, {hi}]", cell.value),
                );
            }
        }
    }
    if store.observation_count() > 0 {
        for y in years {
            if !years_seen.contains(&y) {
                report.push("contiguous_years", y, format!("no observations for year {y}"));
            }
        }
    }
    report
}
