use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{AlmanacConfig, District, EntityId, EntityKind, MetricId, ObsStatus, School, Subgroup};

/// Unique key of an observation cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObsKey {
    pub entity: EntityId,
    pub metric: MetricId,
    pub year: i32,
    pub subgroup: Subgroup,
}

impl ObsKey {
    pub fn new(entity: &EntityId, metric: MetricId, year: i32, subgroup: Subgroup) -> Self {
        ObsKey {
            entity: entity.clone(),
            metric,
            year,
            subgroup,
        }
    }
}

impl fmt::Display for ObsKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|{}|{}|{}",
            self.entity, self.metric, self.year, self.subgroup
        )
    }
}

impl FromStr for ObsKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('|').collect();
        let [entity, metric, year, subgroup] = parts[..] else {
            return Err(format!("observation key `{s}` must have 4 `|`-separated parts"));
        };
        if entity.is_empty() {
            return Err(format!("observation key `{s}` has an empty entity id"));
        }
        Ok(ObsKey {
            entity: EntityId::new(entity),
            metric: MetricId::lookup(metric).ok_or_else(|| format!("unknown metric `{metric}`"))?,
            year: year.parse().map_err(|_| format!("bad year `{year}`"))?,
            subgroup: subgroup.parse()?,
        })
    }
}

impl Serialize for ObsKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ObsKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Where a cell's value came from. Shared between cells of the same table.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Provenance(Arc<str>);

impl Provenance {
    pub fn new(text: impl AsRef<str>) -> Self {
        Provenance(Arc::from(text.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub value: f64,
    pub status: ObsStatus,
    pub provenance: Provenance,
}

impl Cell {
    pub fn reported(value: f64, provenance: Provenance) -> Self {
        Cell {
            value,
            status: ObsStatus::Reported,
            provenance,
        }
    }

    /// The value, if downstream consumers may use it.
    pub fn usable(&self) -> Option<f64> {
        self.status.is_usable().then_some(self.value)
    }
}

impl PartialEq for Cell {
    // Bitwise so that "identical" means identical, NaN included.
    fn eq(&self, other: &Self) -> bool {
        self.value.to_bits() == other.value.to_bits()
            && self.status == other.status
            && self.provenance == other.provenance
    }
}

/// Flattened, owned view of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub entity_id: EntityId,
    pub metric_id: MetricId,
    pub year: i32,
    pub subgroup: Subgroup,
    pub value: f64,
    pub status: ObsStatus,
    pub provenance: String,
}

/// Non-district, non-school entity (county, CMO, the state).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub kind: EntityKind,
    pub name: String,
}

#[derive(Debug, Default)]
struct SchoolIndex {
    by_authorizer: BTreeMap<EntityId, Vec<EntityId>>,
    by_parent: BTreeMap<EntityId, Vec<EntityId>>,
}

/// Immutable-by-convention snapshot of all entities and observations.
///
/// Pipeline stages take a `Store` by reference and return a new one.
#[derive(Debug, Clone)]
pub struct Store {
    districts: BTreeMap<EntityId, District>,
    schools: BTreeMap<EntityId, School>,
    others: BTreeMap<EntityId, Entity>,
    reassignments: BTreeMap<EntityId, EntityId>,
    observations: BTreeMap<ObsKey, Cell>,
    years: (i32, i32),
    config: AlmanacConfig,
    index: OnceLock<Arc<SchoolIndex>>,
}

impl PartialEq for Store {
    fn eq(&self, o: &Self) -> bool {
        self.districts == o.districts
            && self.schools == o.schools
            && self.others == o.others
            && self.reassignments == o.reassignments
            && self.observations == o.observations
            && self.years == o.years
            && self.config == o.config
    }
}

impl Store {
    pub fn new(years: RangeInclusive<i32>, config: AlmanacConfig) -> Self {
        Store {
            districts: BTreeMap::new(),
            schools: BTreeMap::new(),
            others: BTreeMap::new(),
            reassignments: BTreeMap::new(),
            observations: BTreeMap::new(),
            years: (*years.start(), *years.end()),
            config,
            index: OnceLock::new(),
        }
    }

    pub fn config(&self) -> &AlmanacConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: AlmanacConfig) {
        self.config = config;
    }

    pub fn years(&self) -> RangeInclusive<i32> {
        self.years.0..=self.years.1
    }

    pub fn set_years(&mut self, years: RangeInclusive<i32>) {
        self.years = (*years.start(), *years.end());
    }

    pub fn first_year(&self) -> i32 {
        self.years.0
    }

    pub fn last_year(&self) -> i32 {
        self.years.1
    }

    pub fn insert_district(&mut self, d: District) {
        self.districts.insert(d.id.clone(), d);
    }

    pub fn insert_school(&mut self, s: School) {
        self.index = OnceLock::new();
        self.schools.insert(s.id.clone(), s);
    }

    pub fn insert_entity(&mut self, e: Entity) {
        self.others.insert(e.id.clone(), e);
    }

    /// Records that `school` is now governed by `parent`.
    pub fn reassign(&mut self, school: EntityId, parent: EntityId) {
        self.index = OnceLock::new();
        self.reassignments.insert(school, parent);
    }

    /// Inserts a cell unless its key is already present. Returns whether the
    /// cell was inserted.
    pub fn insert_observation(&mut self, key: ObsKey, cell: Cell) -> bool {
        use std::collections::btree_map::Entry;
        match self.observations.entry(key) {
            Entry::Vacant(v) => {
                v.insert(cell);
                true
            }
            Entry::Occupied(_) => false,
        }
    }

    /// Inserts or replaces a cell.
    pub fn put_observation(&mut self, key: ObsKey, cell: Cell) {
        self.observations.insert(key, cell);
    }

    pub fn cell_mut(&mut self, key: &ObsKey) -> Option<&mut Cell> {
        self.observations.get_mut(key)
    }

    pub fn districts(&self) -> impl Iterator<Item = &District> {
        self.districts.values()
    }

    pub fn district(&self, id: &EntityId) -> Option<&District> {
        self.districts.get(id)
    }

    pub fn district_count(&self) -> usize {
        self.districts.len()
    }

    pub fn schools(&self) -> impl Iterator<Item = &School> {
        self.schools.values()
    }

    pub fn school(&self, id: &EntityId) -> Option<&School> {
        self.schools.get(id)
    }

    /// Counties, CMOs and the state.
    pub fn other_entities(&self) -> impl Iterator<Item = &Entity> {
        self.others.values()
    }

    pub fn entity(&self, id: &EntityId) -> Option<&Entity> {
        self.others.get(id)
    }

    pub fn reassignments(&self) -> &BTreeMap<EntityId, EntityId> {
        &self.reassignments
    }

    pub fn kind_of(&self, id: &EntityId) -> Option<EntityKind> {
        if self.districts.contains_key(id) {
            Some(EntityKind::District)
        } else if self.schools.contains_key(id) {
            Some(EntityKind::School)
        } else {
            self.others.get(id).map(|e| e.kind)
        }
    }

    pub fn name_of(&self, id: &EntityId) -> Option<&str> {
        if let Some(d) = self.districts.get(id) {
            Some(&d.name)
        } else if let Some(s) = self.schools.get(id) {
            Some(&s.name)
        } else {
            self.others.get(id).map(|e| e.name.as_str())
        }
    }

    pub fn cell(&self, key: &ObsKey) -> Option<&Cell> {
        self.observations.get(key)
    }

    /// Usable (reported or corrected) value of a cell.
    pub fn value(
        &self,
        entity: &EntityId,
        metric: MetricId,
        year: i32,
        subgroup: Subgroup,
    ) -> Option<f64> {
        self.observations
            .get(&ObsKey::new(entity, metric, year, subgroup))
            .and_then(Cell::usable)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&ObsKey, &Cell)> {
        self.observations.iter()
    }

    pub fn observation_count(&self) -> usize {
        self.observations.len()
    }

    /// All cells of one entity, in key order.
    pub fn entity_cells<'a>(
        &'a self,
        entity: &'a EntityId,
    ) -> impl Iterator<Item = (&'a ObsKey, &'a Cell)> + 'a {
        // Keys of one entity are contiguous; start at the first and stop at
        // the first foreign key.
        self.observations
            .range(
                ObsKey {
                    entity: entity.clone(),
                    metric: super::catalog::catalog_slice()
                        .iter()
                        .map(|m| m.id)
                        .min()
                        .expect("catalog is non-empty"),
                    year: i32::MIN,
                    subgroup: Subgroup::All,
                }..,
            )
            .take_while(move |(k, _)| &k.entity == entity)
    }

    pub fn observations(&self) -> impl Iterator<Item = Observation> + '_ {
        self.observations.iter().map(|(k, c)| Observation {
            entity_id: k.entity.clone(),
            metric_id: k.metric,
            year: k.year,
            subgroup: k.subgroup,
            value: c.value,
            status: c.status,
            provenance: c.provenance.to_string(),
        })
    }

    fn index(&self) -> Arc<SchoolIndex> {
        self.index
            .get_or_init(|| {
                let mut idx = SchoolIndex::default();
                for s in self.schools.values() {
                    idx.by_authorizer
                        .entry(s.authorizer_district_id.clone())
                        .or_default()
                        .push(s.id.clone());
                }
                for (school, parent) in &self.reassignments {
                    idx.by_parent
                        .entry(parent.clone())
                        .or_default()
                        .push(school.clone());
                }
                Arc::new(idx)
            })
            .clone()
    }

    /// Every school a district authorizes, regardless of governance.
    pub fn schools_authorized_by(&self, district: &EntityId) -> Vec<EntityId> {
        self.index()
            .by_authorizer
            .get(district)
            .cloned()
            .unwrap_or_default()
    }

    /// Schools re-attached to a CMO or independent-charter entity.
    pub fn schools_attached_to(&self, parent: &EntityId) -> Vec<EntityId> {
        self.index()
            .by_parent
            .get(parent)
            .cloned()
            .unwrap_or_default()
    }

    /// The entity a school's data rolls up into.
    pub fn effective_parent(&self, school: &EntityId) -> Option<EntityId> {
        if let Some(p) = self.reassignments.get(school) {
            return Some(p.clone());
        }
        self.schools
            .get(school)
            .map(|s| s.authorizer_district_id.clone())
    }
}
