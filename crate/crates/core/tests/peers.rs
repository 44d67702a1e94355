mod common;

use almanac::model::{
    AlmanacConfig, Cell, District, EntityId, FundingType, GradeSpan, Governance, MetricId, ObsKey,
    ObsStatus, Provenance, School, Store, Subgroup,
};
use almanac::peers::{feature_vector, PeerIndex};
use almanac::AlmanacError;
use proptest::prelude::*;

fn m(id: &str) -> MetricId {
    MetricId::lookup(id).unwrap()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
}

/// Brute-force nearest neighbours straight from the store.
fn oracle_peers(store: &Store, client: &EntityId, k: usize) -> Vec<EntityId> {
    let year = store.last_year();
    let span = store.district(client).unwrap().grade_span;
    let mut pool: Vec<(EntityId, [f64; 4])> = Vec::new();
    for d in store.districts().filter(|d| d.grade_span == span) {
        let enrollment: f64 = store
            .schools_authorized_by(&d.id)
            .iter()
            .filter(|s| store.school(s).unwrap().governance != Governance::CharterDirectFunded)
            .filter_map(|s| store.value(s, m("students"), year, Subgroup::All))
            .map(f64::round)
            .sum();
        let f = |id: &str| store.value(&d.id, m(id), year, Subgroup::All);
        if enrollment <= 0.0 {
            continue;
        }
        if let (Some(a), Some(b), Some(c)) = (f("parent_ed_index"), f("pct_el"), f("pct_frpm")) {
            pool.push((d.id.clone(), [enrollment.ln(), a, b, c]));
        }
    }
    let mut center = [0.0; 4];
    let mut scale = [0.0; 4];
    for j in 0..4 {
        let mut col: Vec<f64> = pool.iter().map(|p| p.1[j]).collect();
        center[j] = median(&mut col);
        let mut dev: Vec<f64> = col.iter().map(|x| (x - center[j]).abs()).collect();
        let mad = median(&mut dev);
        assert!(mad > 0.0);
        scale[j] = 1.4826 * mad;
    }
    let z = |x: &[f64; 4]| -> [f64; 4] { std::array::from_fn(|j| (x[j] - center[j]) / scale[j]) };
    let cz = z(&pool.iter().find(|p| &p.0 == client).unwrap().1);
    let mut ranked: Vec<(f64, EntityId)> = pool
        .iter()
        .filter(|p| &p.0 != client)
        .map(|p| {
            let pz = z(&p.1);
            ((0..4).map(|j| (cz[j] - pz[j]).powi(2)).sum::<f64>().sqrt(), p.0.clone())
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    ranked.into_iter().take(k).map(|r| r.1).collect()
}

#[test]
fn index_matches_brute_force() {
    let f = common::fixture();
    let index = PeerIndex::build(&f.screened, &AlmanacConfig::default()).unwrap();
    assert!(index.ineligible().is_empty());
    for d in index.eligible() {
        let set = index.peer_set(&d).unwrap();
        assert_eq!(set.member_ids(), oracle_peers(&f.screened, &d, 15), "{d}");
    }
}

#[test]
fn peer_sets_are_well_formed() {
    let f = common::fixture();
    let index = PeerIndex::build(&f.screened, &AlmanacConfig::default()).unwrap();
    for d in index.eligible() {
        let set = index.peer_set(&d).unwrap();
        let span = f.screened.district(&d).unwrap().grade_span;
        assert_eq!(set.members.len(), 15.min(set.pool_size - 1));
        assert_eq!(set.short_pool, set.pool_size - 1 < 15);
        assert!(set.members.iter().all(|p| p.district_id != d));
        assert!(set.members.iter().all(|p| f.screened.district(&p.district_id).unwrap().grade_span == span));
        assert!(set.members.windows(2).all(|w| w[0].distance <= w[1].distance));
        let mut ids = set.member_ids();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), set.members.len());
    }
}

fn synthetic_store(features: &[(f64, f64, f64, f64)]) -> Store {
    let mut s = Store::new(2016..=2016, AlmanacConfig::default());
    for (i, &(students, ped, el, frpm)) in features.iter().enumerate() {
        let id = EntityId::new(format!("D{i:04}"));
        let school = EntityId::new(format!("S{i:05}"));
        s.insert_district(District {
            id: id.clone(),
            name: format!("District {i}"),
            county_id: "C01".into(),
            grade_span: GradeSpan::ElemK8,
            funding_type: FundingType::StateFormula,
        });
        s.insert_school(School {
            id: school.clone(),
            name: format!("School {i}"),
            authorizer_district_id: id.clone(),
            governance: Governance::DistrictOperated,
            cmo_id: None,
        });
        let put = |s: &mut Store, e: &EntityId, metric: &str, v: f64| {
            s.insert_observation(ObsKey::new(e, m(metric), 2016, Subgroup::All), Cell::reported(v, Provenance::new("t")));
        };
        put(&mut s, &school, "students", students);
        put(&mut s, &id, "parent_ed_index", ped);
        put(&mut s, &id, "pct_el", el);
        put(&mut s, &id, "pct_frpm", frpm);
    }
    s
}

#[test]
fn identical_districts_break_ties_by_id() {
    let s = synthetic_store(&[(1000.0, 3.0, 0.2, 0.5); 20]);
    let index = PeerIndex::build(&s, &AlmanacConfig::default()).unwrap();
    let set = index.peer_set(&"D0007".into()).unwrap();
    let expected: Vec<EntityId> = (0..20).filter(|&i| i != 7).take(15).map(|i| EntityId::new(format!("D{i:04}"))).collect();
    assert_eq!(set.member_ids(), expected);
    assert!(set.members.iter().all(|p| p.distance == 0.0));
}

#[test]
fn small_pool_is_flagged_short() {
    let rows: Vec<_> = (0..6).map(|i| (500.0 + 100.0 * i as f64, 2.0 + 0.1 * i as f64, 0.1, 0.4 + 0.01 * i as f64)).collect();
    let set = PeerIndex::build(&synthetic_store(&rows), &AlmanacConfig::default()).unwrap().peer_set(&"D0000".into()).unwrap();
    assert!(set.short_pool);
    assert_eq!(set.members.len(), 5);
}

#[test]
fn features_of_a_known_district() {
    let s = synthetic_store(&[(1000.0, 3.1, 0.25, 0.6), (2000.0, 2.0, 0.1, 0.3)]);
    let f = feature_vector(&s, &"D0000".into(), 2016).unwrap();
    assert!((f.log_enrollment - 1000f64.ln()).abs() < 1e-12);
    assert_eq!((f.parent_ed_index, f.pct_el, f.pct_frpm), (3.1, 0.25, 0.6));
}

#[test]
fn suppressed_feature_makes_a_district_ineligible() {
    let mut s = synthetic_store(&[(1000.0, 3.1, 0.25, 0.6), (2000.0, 2.0, 0.1, 0.3), (1500.0, 2.5, 0.2, 0.4)]);
    s.cell_mut(&ObsKey::new(&"D0001".into(), m("pct_el"), 2016, Subgroup::All)).unwrap().status = ObsStatus::SuppressedOutlier;
    assert!(matches!(feature_vector(&s, &"D0001".into(), 2016), Err(AlmanacError::Ineligible { .. })));
    let index = PeerIndex::build(&s, &AlmanacConfig::default()).unwrap();
    assert!(index.ineligible().contains_key(&EntityId::new("D0001")));
    assert!(matches!(index.peer_set(&"D0001".into()), Err(AlmanacError::Ineligible { .. })));
    assert_eq!(index.peer_set(&"D0000".into()).unwrap().member_ids(), vec![EntityId::new("D0002")]);
    assert!(matches!(index.peer_set(&"D9999".into()), Err(AlmanacError::NotFound(_))));
}

fn feature_rows() -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
    prop::collection::vec(
        (100u32..20000, 10u32..50, 0u32..64, 0u32..64).prop_map(|(e, p, el, fr)| {
            (f64::from(e), f64::from(p) / 10.0, f64::from(el) / 64.0, f64::from(fr) / 64.0)
        }),
        17..30,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn rescaling_a_feature_keeps_the_peer_set(rows in feature_rows(), a in prop::sample::select(vec![0.5, 2.0, 4.0]), b in -4i32..4) {
        let moved: Vec<_> = rows.iter().map(|&(e, p, el, fr)| (e, p, a * el + f64::from(b), fr)).collect();
        let i1 = PeerIndex::build(&synthetic_store(&rows), &AlmanacConfig::default()).unwrap();
        let i2 = PeerIndex::build(&synthetic_store(&moved), &AlmanacConfig::default()).unwrap();
        for d in i1.eligible() {
            prop_assert_eq!(i1.peer_set(&d).unwrap().member_ids(), i2.peer_set(&d).unwrap().member_ids());
        }
    }

    #[test]
    fn peer_count_and_purity(rows in feature_rows(), k in 1usize..20) {
        let index = PeerIndex::build(&synthetic_store(&rows), &AlmanacConfig::default()).unwrap();
        for d in index.eligible() {
            let set = index.peer_set_k(&d, k).unwrap();
            prop_assert_eq!(set.members.len(), k.min(rows.len() - 1));
            prop_assert!(!set.member_ids().contains(&d));
        }
    }
}
