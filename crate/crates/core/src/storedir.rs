//! On-disk store between pipeline stages: normalized tables plus a
//! manifest naming the last completed stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AlmanacError, Result};
use crate::model::{
    string_enum, AlmanacConfig, Cell, District, Entity, EntityId, EntityKind, MetricId, ObsKey,
    ObsStatus, Provenance, School, Store, CATALOG_VERSION,
};

string_enum! {
    pub enum Stage {
        Ingested => "ingested",
        Resolved => "resolved",
        Screened => "screened",
    }
}

impl Stage {
    /// Fails unless the store is exactly at `expected`.
    pub fn require(self, expected: Stage) -> Result<()> {
        if self == expected {
            Ok(())
        } else {
            Err(AlmanacError::Precondition(format!(
                "store is at stage `{self}`, this step needs `{expected}`"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub catalog_version: String,
    /// SHA-256 of the canonical config JSON.
    pub config_hash: String,
    pub years: [i32; 2],
    pub row_counts: BTreeMap<String, usize>,
}

const MANIFEST: &str = "manifest.json";
const CONFIG: &str = "config.json";
const ENTITIES: &str = "entities.csv";
const SCHOOLS: &str = "schools.csv";
const OBSERVATIONS: &str = "observations.csv";

pub fn config_hash(cfg: &AlmanacConfig) -> Result<String> {
    let text = serde_json::to_string(&serde_json::to_value(cfg)?)?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AlmanacError + '_ {
    move |e| match e.kind() {
        csv::ErrorKind::Io(_) => AlmanacError::io(path, std::io::Error::other(e.to_string())),
        _ => AlmanacError::StoreFormat(format!("{}: {e}", path.display())),
    }
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| AlmanacError::io(&path, e))?;
    Ok(path)
}

pub fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| AlmanacError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| AlmanacError::StoreFormat(format!("{}: {e}", path.display())))
}

/// Writes the store and its manifest, replacing any previous contents of
/// those files.
pub fn save_store(dir: &Path, store: &Store, stage: Stage) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| AlmanacError::io(dir, e))?;
    let mut row_counts = BTreeMap::new();

    let path = dir.join(ENTITIES);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["id", "kind", "name", "county_id", "grade_span", "funding_type"])
        .map_err(csv_err(&path))?;
    let mut n = 0;
    for e in store.other_entities() {
        w.write_record([e.id.as_str(), e.kind.as_str(), &e.name, "", "", ""]).map_err(csv_err(&path))?;
        n += 1;
    }
    for d in store.districts() {
        w.write_record([
            d.id.as_str(),
            EntityKind::District.as_str(),
            &d.name,
            d.county_id.as_str(),
            d.grade_span.as_str(),
            d.funding_type.as_str(),
        ])
        .map_err(csv_err(&path))?;
        n += 1;
    }
    w.flush().map_err(|e| AlmanacError::io(&path, e))?;
    row_counts.insert("entities".to_string(), n);

    let path = dir.join(SCHOOLS);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["id", "name", "authorizer_district_id", "governance", "cmo_id", "effective_parent"])
        .map_err(csv_err(&path))?;
    let mut n = 0;
    for s in store.schools() {
        let parent = store.reassignments().get(&s.id);
        w.write_record([
            s.id.as_str(),
            &s.name,
            s.authorizer_district_id.as_str(),
            s.governance.as_str(),
            s.cmo_id.as_ref().map(EntityId::as_str).unwrap_or(""),
            parent.map(EntityId::as_str).unwrap_or(""),
        ])
        .map_err(csv_err(&path))?;
        n += 1;
    }
    w.flush().map_err(|e| AlmanacError::io(&path, e))?;
    row_counts.insert("schools".to_string(), n);

    let path = dir.join(OBSERVATIONS);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["entity_id", "metric_id", "year", "subgroup", "value", "status", "provenance"])
        .map_err(csv_err(&path))?;
    let mut n = 0;
    for (k, c) in store.cells() {
        let value = if c.value.is_nan() { String::new() } else { format!("{}", c.value) };
        w.write_record([
            k.entity.as_str(),
            k.metric.as_str(),
            &k.year.to_string(),
            k.subgroup.as_str(),
            &value,
            c.status.as_str(),
            c.provenance.as_str(),
        ])
        .map_err(csv_err(&path))?;
        n += 1;
    }
    w.flush().map_err(|e| AlmanacError::io(&path, e))?;
    row_counts.insert("observations".to_string(), n);

    write_json(dir, CONFIG, store.config())?;
    let manifest = Manifest {
        stage,
        catalog_version: CATALOG_VERSION.to_string(),
        config_hash: config_hash(store.config())?,
        years: [store.first_year(), store.last_year()],
        row_counts,
    };
    write_json(dir, MANIFEST, &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    if !dir.join(MANIFEST).is_file() {
        return Err(AlmanacError::io(
            dir.join(MANIFEST),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no store manifest"),
        ));
    }
    read_json(dir, MANIFEST)
}

fn parse<T: std::str::FromStr>(path: &Path, line: u64, what: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| AlmanacError::StoreFormat(format!("{}:{line}: bad {what} `{raw}`: {e}", path.display())))
}

fn records(path: &Path) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        out.push((line, rec));
    }
    Ok(out)
}

/// Loads a store directory written by [`save_store`].
pub fn load_store(dir: &Path) -> Result<(Store, Manifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.catalog_version != CATALOG_VERSION {
        return Err(AlmanacError::StoreFormat(format!(
            "store built with catalog {}, this build has {CATALOG_VERSION}",
            manifest.catalog_version
        )));
    }
    let config: AlmanacConfig = read_json(dir, CONFIG)?;
    let [first, last] = manifest.years;
    let mut store = Store::new(first..=last, config);

    let path = dir.join(ENTITIES);
    for (line, r) in records(&path)? {
        let kind: EntityKind = parse(&path, line, "kind", &r[1])?;
        let id = EntityId::new(&r[0]);
        if kind == EntityKind::District {
            store.insert_district(District {
                id,
                name: r[2].to_string(),
                county_id: EntityId::new(&r[3]),
                grade_span: parse(&path, line, "grade_span", &r[4])?,
                funding_type: parse(&path, line, "funding_type", &r[5])?,
            });
        } else {
            store.insert_entity(Entity {
                id,
                kind,
                name: r[2].to_string(),
            });
        }
    }

    let path = dir.join(SCHOOLS);
    for (line, r) in records(&path)? {
        let id = EntityId::new(&r[0]);
        store.insert_school(School {
            id: id.clone(),
            name: r[1].to_string(),
            authorizer_district_id: EntityId::new(&r[2]),
            governance: parse(&path, line, "governance", &r[3])?,
            cmo_id: (!r[4].is_empty()).then(|| EntityId::new(&r[4])),
        });
        if !r[5].is_empty() {
            store.reassign(id, EntityId::new(&r[5]));
        }
    }

    let path = dir.join(OBSERVATIONS);
    let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    let mut rec = csv::StringRecord::new();
    let mut provenances: BTreeMap<String, Provenance> = BTreeMap::new();
    while r.read_record(&mut rec).map_err(csv_err(&path))? {
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let metric = MetricId::lookup(&rec[1])
            .ok_or_else(|| AlmanacError::StoreFormat(format!("{}:{line}: unknown metric `{}`", path.display(), &rec[1])))?;
        let key = ObsKey::new(
            &EntityId::new(&rec[0]),
            metric,
            parse(&path, line, "year", &rec[2])?,
            parse(&path, line, "subgroup", &rec[3])?,
        );
        let value = if rec[4].is_empty() { f64::NAN } else { parse(&path, line, "value", &rec[4])? };
        let status: ObsStatus = parse(&path, line, "status", &rec[5])?;
        // Many cells share a provenance string; keep one allocation each.
        let provenance = match provenances.get(&rec[6]) {
            Some(p) => p.clone(),
            None => {
                let p = Provenance::new(&rec[6]);
                provenances.insert(rec[6].to_string(), p.clone());
                p
            }
        };
        store.put_observation(key, Cell { value, status, provenance });
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FundingType, GradeSpan, Governance, Subgroup};

    #[test]
    fn round_trip() {
        let mut s = Store::new(2015..=2016, AlmanacConfig::default());
        s.insert_entity(Entity { id: "CA".into(), kind: EntityKind::State, name: "State".into() });
        s.insert_entity(Entity { id: "C1".into(), kind: EntityKind::County, name: "One, County".into() });
        s.insert_entity(Entity { id: "M1".into(), kind: EntityKind::Cmo, name: "Net \"A\"".into() });
        s.insert_district(District {
            id: "D1".into(),
            name: "D".into(),
            county_id: "C1".into(),
            grade_span: GradeSpan::ElemK8,
            funding_type: FundingType::BasicAid,
        });
        s.insert_school(School {
            id: "S1".into(),
            name: "S".into(),
            authorizer_district_id: "D1".into(),
            governance: Governance::CharterDirectFunded,
            cmo_id: Some("M1".into()),
        });
        s.reassign("S1".into(), "M1".into());
        let m = MetricId::lookup("pct_el").unwrap();
        s.put_observation(ObsKey::new(&"D1".into(), m, 2015, Subgroup::All), Cell::reported(0.1 + 0.2, Provenance::new("x, y")));
        s.put_observation(
            ObsKey::new(&"D1".into(), m, 2016, Subgroup::All),
            Cell { value: f64::NAN, status: ObsStatus::Missing, provenance: Provenance::new("gone") },
        );
        let dir = tempfile::tempdir().unwrap();
        let written = save_store(dir.path(), &s, Stage::Resolved).unwrap();
        let (back, manifest) = load_store(dir.path()).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(back, s);
        assert_eq!(manifest.row_counts["observations"], 2);
    }

    #[test]
    fn stage_order() {
        assert!(Stage::Ingested.require(Stage::Ingested).is_ok());
        assert!(Stage::Ingested.require(Stage::Screened).is_err());
    }
}
