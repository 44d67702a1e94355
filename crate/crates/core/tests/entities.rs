mod common;

use std::collections::BTreeMap;

use almanac::entities::{independent_charter_id, reassociate_charters, ParentKind};
use almanac::model::{AggregationRule, EntityId, Governance, MetricId, ObsKey, Subgroup};

fn sum_metrics() -> Vec<MetricId> {
    almanac::model::metric_catalog()
        .into_iter()
        .filter(|d| d.aggregation == AggregationRule::Sum)
        .map(|d| d.id)
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn moves_follow_the_charter_records() {
    let f = common::fixture();
    assert_eq!(f.log.moves.len(), f.truth.charter_links.len());
    for m in &f.log.moves {
        let expected = match &f.truth.charter_links[&m.school_id] {
            Some(cmo) => (cmo.clone(), ParentKind::Cmo),
            None => (independent_charter_id(&m.school_id), ParentKind::IndependentCharter),
        };
        assert_eq!((m.to_parent_id.clone(), m.parent_kind), expected);
        assert_eq!(f.resolved.effective_parent(&m.school_id), Some(m.to_parent_id.clone()));
    }
    assert!(f.log.moves.windows(2).all(|w| w[0].school_id < w[1].school_id));
}

#[test]
fn additive_totals_are_conserved() {
    let f = common::fixture();
    let years: Vec<i32> = f.raw.years().collect();
    let mut touched: BTreeMap<EntityId, ()> = BTreeMap::new();
    for m in &f.log.moves {
        touched.insert(m.from_district_id.clone(), ());
    }
    let parents: Vec<EntityId> = {
        let mut p: Vec<_> = f.log.moves.iter().map(|m| m.to_parent_id.clone()).collect();
        p.sort();
        p.dedup();
        p
    };
    let mut checked = 0;
    for metric in sum_metrics() {
        for &y in &years {
            for &sg in metric.def().subgroups() {
                // Every school the touched districts authorized, before the move.
                let before: f64 = touched
                    .keys()
                    .flat_map(|d| f.raw.schools_authorized_by(d))
                    .filter_map(|s| f.raw.value(&s, metric, y, sg))
                    .sum();
                let after: f64 = touched
                    .keys()
                    .chain(parents.iter())
                    .filter_map(|e| f.resolved.value(e, metric, y, sg))
                    .sum();
                assert!(close(before, after), "{metric} {y} {sg}: {before} vs {after}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn charter_values_do_not_leak_into_districts() {
    let f = common::fixture();
    let mut perturbed = f.raw.clone();
    let charter_keys: Vec<ObsKey> = f
        .raw
        .cells()
        .filter(|(k, _)| {
            f.raw
                .school(&k.entity)
                .is_some_and(|s| s.governance == Governance::CharterDirectFunded)
        })
        .map(|(k, _)| k.clone())
        .collect();
    assert!(!charter_keys.is_empty());
    for k in &charter_keys {
        let c = perturbed.cell_mut(k).unwrap();
        c.value = c.value * 1.5 + 1.0;
    }
    let (out, _) = reassociate_charters(&perturbed).unwrap();
    for d in f.raw.districts() {
        let a: Vec<_> = f.resolved.entity_cells(&d.id).collect();
        let b: Vec<_> = out.entity_cells(&d.id).collect();
        assert_eq!(a, b, "{}", d.id);
    }
}

#[test]
fn untouched_districts_keep_raw_rows() {
    let f = common::fixture();
    for d in f.raw.districts() {
        if f.log.moves.iter().any(|m| m.from_district_id == d.id) {
            continue;
        }
        let a: Vec<_> = f.raw.entity_cells(&d.id).collect();
        let b: Vec<_> = f.resolved.entity_cells(&d.id).collect();
        assert_eq!(a, b, "{}", d.id);
    }
}

#[test]
fn second_pass_is_a_no_op() {
    let f = common::fixture();
    let (again, log) = reassociate_charters(&f.resolved).unwrap();
    assert!(log.moves.is_empty());
    assert_eq!(log.affected_cells, 0);
    assert_eq!(again, f.resolved);
}

#[test]
fn governed_enrollment_excludes_direct_charters() {
    let f = common::fixture();
    let students = MetricId::lookup("students").unwrap();
    for d in f.resolved.districts() {
        for y in f.resolved.years() {
            let oracle: u64 = f
                .raw
                .schools_authorized_by(&d.id)
                .iter()
                .filter(|s| f.raw.school(s).unwrap().governance != Governance::CharterDirectFunded)
                .filter_map(|s| f.raw.value(s, students, y, Subgroup::All))
                .map(|v| v.round() as u64)
                .sum();
            let got = almanac::entities::effective_enrollment(&f.resolved, &d.id, y).unwrap();
            assert_eq!(got, oracle);
        }
    }
}
