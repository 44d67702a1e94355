//! Raw corpus tables: schemas, line-addressed parsing and loading into a
//! [`Store`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AlmanacError, Result};
use crate::model::{
    string_enum, AlmanacConfig, Cell, District, Entity, EntityId, EntityKind, FundingType,
    Governance, GradeSpan, MetricCategory, MetricId, ObsKey, Provenance, School, Store, Subgroup,
};

/// Observation tables, in default load order.
pub const OBSERVATION_TABLES: [&str; 8] = [
    "enrollment",
    "finance",
    "staffing",
    "discipline",
    "courses",
    "assessments",
    "graduation",
    "demography",
];

/// Every table of a corpus, in load order.
pub const TABLES: [&str; 10] = [
    "entities",
    "schools",
    "enrollment",
    "finance",
    "staffing",
    "discipline",
    "courses",
    "assessments",
    "graduation",
    "demography",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnumDomain {
    EntityKind,
    GradeSpan,
    FundingType,
    Governance,
    Subgroup,
    AssessmentMetric,
}

impl EnumDomain {
    fn accepts(self, s: &str) -> bool {
        match self {
            EnumDomain::EntityKind => s
                .parse::<EntityKind>()
                .is_ok_and(|k| k != EntityKind::School),
            EnumDomain::GradeSpan => s.parse::<GradeSpan>().is_ok(),
            EnumDomain::FundingType => s.parse::<FundingType>().is_ok(),
            EnumDomain::Governance => s.parse::<Governance>().is_ok(),
            EnumDomain::Subgroup => s.parse::<Subgroup>().is_ok(),
            EnumDomain::AssessmentMetric => MetricId::lookup(s)
                .is_some_and(|m| m.def().category == MetricCategory::Assessments),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    Id,
    Text,
    Enum(EnumDomain),
    Integer,
    Real,
    Year,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnSpec {
    pub name: &'static str,
    pub ty: ColumnType,
    /// Whether an empty value is an error.
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    pub name: &'static str,
    pub columns: Vec<ColumnSpec>,
}

impl TableSchema {
    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn header(&self) -> Vec<&'static str> {
        self.columns.iter().map(|c| c.name).collect()
    }

    pub fn index_of(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == column)
    }

    /// Columns holding metric values, named by metric id. Empty for the
    /// long-format assessments table and the entity tables.
    pub fn value_columns(&self) -> Vec<(usize, MetricId)> {
        self.columns
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                matches!(c.ty, ColumnType::Integer | ColumnType::Real)
                    .then(|| MetricId::lookup(c.name).map(|m| (i, m)))
                    .flatten()
            })
            .collect()
    }

    pub fn has_subgroup(&self) -> bool {
        self.index_of("subgroup").is_some()
    }
}

/// Schema of a corpus table, or `None` for an unknown name.
pub fn schema(table: &str) -> Option<TableSchema> {
    use ColumnType::*;
    let col = |name, ty, required| ColumnSpec { name, ty, required };
    let key = |with_subgroup: bool| {
        let mut v = vec![col("entity_id", Id, true), col("year", Year, true)];
        if with_subgroup {
            v.push(col("subgroup", Enum(EnumDomain::Subgroup), true));
        }
        v
    };
    let columns = match table {
        "entities" => vec![
            col("id", Id, true),
            col("kind", Enum(EnumDomain::EntityKind), true),
            col("name", Text, true),
            col("county_id", Id, false),
            col("grade_span", Enum(EnumDomain::GradeSpan), false),
            col("funding_type", Enum(EnumDomain::FundingType), false),
        ],
        "schools" => vec![
            col("id", Id, true),
            col("name", Text, true),
            col("authorizer_district_id", Id, true),
            col("governance", Enum(EnumDomain::Governance), true),
            col("cmo_id", Id, false),
        ],
        "enrollment" => [key(true), vec![col("students", Integer, true)]].concat(),
        "finance" => [
            key(false),
            vec![col("revenue_total", Real, false), col("expenditure_total", Real, false)],
        ]
        .concat(),
        "staffing" => [
            key(false),
            vec![col("teacher_fte", Real, false), col("admin_fte", Real, false)],
        ]
        .concat(),
        "discipline" => [
            key(true),
            vec![col("suspensions", Integer, false), col("expulsions", Integer, false)],
        ]
        .concat(),
        "courses" => [
            key(false),
            vec![
                col("ap_course_count", Integer, false),
                col("total_course_count", Integer, false),
            ],
        ]
        .concat(),
        "assessments" => [
            key(true),
            vec![
                col("metric_id", Enum(EnumDomain::AssessmentMetric), true),
                col("score", Real, true),
            ],
        ]
        .concat(),
        "graduation" => [
            key(true),
            vec![col("grad_rate", Real, false), col("dropout_rate", Real, false)],
        ]
        .concat(),
        "demography" => [
            key(false),
            vec![
                col("pct_el", Real, false),
                col("pct_frpm", Real, false),
                col("parent_ed_index", Real, false),
            ],
        ]
        .concat(),
        _ => return None,
    };
    let name = TABLES.iter().find(|t| **t == table).copied()?;
    Some(TableSchema { name, columns })
}

string_enum! {
    pub enum IngestErrorKind {
        MissingColumn => "missing_column",
        BadType => "bad_type",
        BadEnum => "bad_enum",
        DuplicateKey => "duplicate_key",
        DanglingReference => "dangling_reference",
        UnknownColumn => "unknown_column",
    }
}

impl IngestErrorKind {
    /// Unknown header columns are ignored and reported, nothing else is.
    pub fn is_fatal(self) -> bool {
        self != IngestErrorKind::UnknownColumn
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestError {
    pub file: String,
    /// 1-based; the header is line 1.
    pub line: u64,
    pub column: String,
    pub kind: IngestErrorKind,
    pub message: String,
}

impl fmt::Display for IngestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {} [{}] {}", self.file, self.line, self.kind, self.column, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Empty,
    Text(String),
    Integer(i64),
    Real(f64),
}

impl Field {
    pub fn text(&self) -> Option<&str> {
        match self {
            Field::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn number(&self) -> Option<f64> {
        match self {
            Field::Integer(i) => Some(*i as f64),
            Field::Real(r) => Some(*r),
            _ => None,
        }
    }
}

/// One well-formed row, fields in schema column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub line: u64,
    pub fields: Vec<Field>,
}

impl Row {
    fn text(&self, schema: &TableSchema, column: &str) -> Option<&str> {
        self.fields[schema.index_of(column)?].text()
    }
}

fn parse_field(raw: &str, spec: &ColumnSpec) -> std::result::Result<Field, (IngestErrorKind, String)> {
    if raw.is_empty() {
        return if spec.required {
            Err((IngestErrorKind::BadType, "required value is empty".into()))
        } else {
            Ok(Field::Empty)
        };
    }
    match spec.ty {
        ColumnType::Id | ColumnType::Text => Ok(Field::Text(raw.to_string())),
        ColumnType::Enum(domain) => {
            if domain.accepts(raw) {
                Ok(Field::Text(raw.to_string()))
            } else {
                Err((IngestErrorKind::BadEnum, format!("`{raw}` is not a valid {domain:?}")))
            }
        }
        ColumnType::Integer | ColumnType::Year => raw
            .parse::<i64>()
            .map(Field::Integer)
            .map_err(|_| (IngestErrorKind::BadType, format!("`{raw}` is not an integer"))),
        ColumnType::Real => match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Field::Real(v)),
            _ => Err((IngestErrorKind::BadType, format!("`{raw}` is not a finite number"))),
        },
    }
}

/// Parses one table file against its schema.
///
/// Header problems come first: a missing schema column stops parsing with
/// no rows. Each malformed row contributes errors and no row.
pub fn parse_table(path: &Path, schema: &TableSchema) -> Result<(Vec<Row>, Vec<IngestError>)> {
    let file_name = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| schema.file_name());
    let bytes = std::fs::read(path).map_err(|e| AlmanacError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(bytes.as_slice());
    let err = |line: u64, column: &str, kind, message: String| IngestError {
        file: file_name.clone(),
        line,
        column: column.to_string(),
        kind,
        message,
    };

    let mut errors = Vec::new();
    let header = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => {
            errors.push(err(1, "", IngestErrorKind::BadType, format!("unreadable header: {e}")));
            return Ok((Vec::new(), errors));
        }
    };
    let mut positions = Vec::with_capacity(schema.columns.len());
    for spec in &schema.columns {
        match header.iter().position(|h| h == spec.name) {
            Some(p) => positions.push(p),
            None => errors.push(err(
                1,
                spec.name,
                IngestErrorKind::MissingColumn,
                format!("header lacks column `{}`", spec.name),
            )),
        }
    }
    if positions.len() < schema.columns.len() {
        return Ok((Vec::new(), errors));
    }
    for h in header.iter() {
        if schema.index_of(h).is_none() {
            errors.push(err(
                1,
                h,
                IngestErrorKind::UnknownColumn,
                format!("column `{h}` is not part of the {} table and is ignored", schema.name),
            ));
        }
    }

    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(line);
                errors.push(err(line, "", IngestErrorKind::BadType, e.to_string()));
                continue;
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(line);
        let mut fields = Vec::with_capacity(schema.columns.len());
        let mut ok = true;
        for (spec, &p) in schema.columns.iter().zip(&positions) {
            match parse_field(record.get(p).unwrap_or(""), spec) {
                Ok(f) => fields.push(f),
                Err((kind, message)) => {
                    errors.push(err(line, spec.name, kind, message));
                    ok = false;
                }
            }
        }
        if ok {
            rows.push(Row { line, fields });
        }
    }
    Ok((rows, errors))
}

/// Rows parsed from one observation table, before linking.
struct ParsedTable {
    schema: TableSchema,
    rows: Vec<Row>,
}

impl ParsedTable {
    fn observations(&self, row: &Row) -> Vec<(EntityId, MetricId, i64, Subgroup, f64)> {
        let s = &self.schema;
        let entity = EntityId::new(row.text(s, "entity_id").unwrap_or_default());
        let year = match &row.fields[s.index_of("year").expect("year column")] {
            Field::Integer(y) => *y,
            _ => unreachable!("year parsed as integer"),
        };
        let subgroup = row
            .text(s, "subgroup")
            .map(|t| t.parse().expect("subgroup validated"))
            .unwrap_or(Subgroup::All);
        if let Some(mi) = s.index_of("metric_id") {
            let metric = MetricId::lookup(row.fields[mi].text().unwrap_or_default()).expect("metric validated");
            let score = row.fields[s.index_of("score").expect("score column")].number();
            return score.map(|v| (entity, metric, year, subgroup, v)).into_iter().collect();
        }
        s.value_columns()
            .into_iter()
            .filter_map(|(i, m)| row.fields[i].number().map(|v| (entity.clone(), m, year, subgroup, v)))
            .collect()
    }
}

fn table_path(dir: &Path, table: &str) -> Result<PathBuf> {
    let path = dir.join(format!("{table}.csv"));
    if path.is_file() {
        Ok(path)
    } else {
        Err(AlmanacError::MissingTable {
            table: table.to_string(),
            dir: dir.to_path_buf(),
        })
    }
}

/// Row accounting for one table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableCounts {
    pub rows_in: usize,
    pub rows_out: usize,
    pub error_rows: usize,
}

#[derive(Debug, Default)]
pub struct IngestOutcome {
    pub store: Option<Store>,
    pub errors: Vec<IngestError>,
    pub counts: BTreeMap<String, TableCounts>,
}

impl IngestOutcome {
    pub fn fatal_errors(&self) -> impl Iterator<Item = &IngestError> {
        self.errors.iter().filter(|e| e.kind.is_fatal())
    }
}

/// Loads a corpus directory into a store.
pub fn load_corpus(dir: &Path, config: &AlmanacConfig) -> Result<(Store, Vec<IngestError>)> {
    load_corpus_ordered(dir, config, &OBSERVATION_TABLES).map(|o| (o.store.expect("store built"), o.errors))
}

/// [`load_corpus`] with an explicit order for the observation tables, and
/// per-table row accounting.
pub fn load_corpus_ordered(dir: &Path, config: &AlmanacConfig, order: &[&str]) -> Result<IngestOutcome> {
    config.validate()?;
    for table in TABLES {
        table_path(dir, table)?;
    }
    let mut out = IngestOutcome::default();
    let parse = |table: &str, out: &mut IngestOutcome| -> Result<(TableSchema, Vec<Row>)> {
        let schema = schema(table).ok_or_else(|| AlmanacError::NotFound(format!("table {table}")))?;
        let (rows, errors) = parse_table(&table_path(dir, table)?, &schema)?;
        let error_rows: BTreeSet<u64> = errors.iter().filter(|e| e.line > 1).map(|e| e.line).collect();
        out.counts.insert(
            table.to_string(),
            TableCounts {
                rows_in: rows.len() + error_rows.len(),
                rows_out: rows.len(),
                error_rows: error_rows.len(),
            },
        );
        out.errors.extend(errors);
        Ok((schema, rows))
    };

    // Entities first: references from every other table resolve against them.
    let (es, entity_rows) = parse("entities", &mut out)?;
    let mut districts: BTreeMap<EntityId, (u64, District)> = BTreeMap::new();
    let mut others: BTreeMap<EntityId, Entity> = BTreeMap::new();
    let mut link_errors: Vec<IngestError> = Vec::new();
    let mut dropped: BTreeMap<String, usize> = BTreeMap::new();
    let mut reject = |errors: &mut Vec<IngestError>, file: &str, line, column: &str, kind, message: String| {
        errors.push(IngestError {
            file: format!("{file}.csv"),
            line,
            column: column.to_string(),
            kind,
            message,
        });
        *dropped.entry(file.to_string()).or_default() += 1;
    };
    for row in &entity_rows {
        let id = EntityId::new(row.text(&es, "id").unwrap_or_default());
        if districts.contains_key(&id) || others.contains_key(&id) {
            reject(&mut link_errors, "entities", row.line, "id", IngestErrorKind::DuplicateKey, format!("entity {id} already defined"));
            continue;
        }
        let name = row.text(&es, "name").unwrap_or_default().to_string();
        let kind: EntityKind = row.text(&es, "kind").unwrap_or_default().parse().expect("kind validated");
        if kind == EntityKind::District {
            let county = row.text(&es, "county_id");
            let span = row.text(&es, "grade_span");
            let funding = row.text(&es, "funding_type");
            let (Some(county), Some(span), Some(funding)) = (county, span, funding) else {
                reject(
                    &mut link_errors,
                    "entities",
                    row.line,
                    "county_id",
                    IngestErrorKind::BadType,
                    "district rows need county_id, grade_span and funding_type".into(),
                );
                continue;
            };
            districts.insert(
                id.clone(),
                (
                    row.line,
                    District {
                        id,
                        name,
                        county_id: county.into(),
                        grade_span: span.parse().expect("grade_span validated"),
                        funding_type: funding.parse().expect("funding_type validated"),
                    },
                ),
            );
        } else {
            others.insert(id.clone(), Entity { id, kind, name });
        }
    }
    let mut district_list = Vec::new();
    for (id, (line, d)) in districts {
        if others.get(&d.county_id).map(|e| e.kind) != Some(EntityKind::County) {
            reject(
                &mut link_errors,
                "entities",
                line,
                "county_id",
                IngestErrorKind::DanglingReference,
                format!("district {id} names unknown county {}", d.county_id),
            );
            continue;
        }
        district_list.push(d);
    }
    let district_ids: BTreeSet<EntityId> = district_list.iter().map(|d| d.id.clone()).collect();

    let (ss, school_rows) = parse("schools", &mut out)?;
    let mut schools: BTreeMap<EntityId, School> = BTreeMap::new();
    for row in &school_rows {
        let id = EntityId::new(row.text(&ss, "id").unwrap_or_default());
        if schools.contains_key(&id) || district_ids.contains(&id) || others.contains_key(&id) {
            reject(&mut link_errors, "schools", row.line, "id", IngestErrorKind::DuplicateKey, format!("entity {id} already defined"));
            continue;
        }
        let authorizer = EntityId::new(row.text(&ss, "authorizer_district_id").unwrap_or_default());
        if !district_ids.contains(&authorizer) {
            reject(
                &mut link_errors,
                "schools",
                row.line,
                "authorizer_district_id",
                IngestErrorKind::DanglingReference,
                format!("school {id} names unknown district {authorizer}"),
            );
            continue;
        }
        let cmo = row.text(&ss, "cmo_id").map(EntityId::new);
        if let Some(cmo) = &cmo {
            if others.get(cmo).map(|e| e.kind) != Some(EntityKind::Cmo) {
                reject(
                    &mut link_errors,
                    "schools",
                    row.line,
                    "cmo_id",
                    IngestErrorKind::DanglingReference,
                    format!("school {id} names unknown CMO {cmo}"),
                );
                continue;
            }
        }
        schools.insert(
            id.clone(),
            School {
                id,
                name: row.text(&ss, "name").unwrap_or_default().to_string(),
                authorizer_district_id: authorizer,
                governance: row.text(&ss, "governance").unwrap_or_default().parse().expect("governance validated"),
                cmo_id: cmo,
            },
        );
    }

    let mut tables = Vec::new();
    for &table in order {
        if !OBSERVATION_TABLES.contains(&table) {
            return Err(AlmanacError::Precondition(format!("`{table}` is not an observation table")));
        }
        let (schema, rows) = parse(table, &mut out)?;
        tables.push(ParsedTable { schema, rows });
    }
    let known = |id: &EntityId| district_ids.contains(id) || schools.contains_key(id) || others.contains_key(id);
    let mut cells: BTreeMap<ObsKey, Cell> = BTreeMap::new();
    let (mut y_min, mut y_max) = (i64::MAX, i64::MIN);
    for t in &tables {
        let table = t.schema.name;
        let provenance_prefix = format!("{table}.csv:");
        for row in &t.rows {
            let obs = t.observations(row);
            let Some(first) = obs.first() else { continue };
            if !known(&first.0) {
                let message = format!("unknown entity id {}", first.0);
                reject(&mut link_errors, table, row.line, "entity_id", IngestErrorKind::DanglingReference, message);
                continue;
            }
            let year = first.2;
            let Ok(year32) = i32::try_from(year) else {
                reject(&mut link_errors, table, row.line, "year", IngestErrorKind::BadType, format!("year {year} out of range"));
                continue;
            };
            let keys: Vec<ObsKey> = obs.iter().map(|o| ObsKey::new(&o.0, o.1, year32, o.3)).collect();
            if let Some(dup) = keys.iter().find(|k| cells.contains_key(k)) {
                let message = format!("duplicate observation {dup}; first occurrence kept");
                reject(&mut link_errors, table, row.line, "entity_id", IngestErrorKind::DuplicateKey, message);
                continue;
            }
            let provenance = Provenance::new(format!("{provenance_prefix}{}", row.line));
            for (key, o) in keys.into_iter().zip(obs) {
                cells.insert(key, Cell::reported(o.4, provenance.clone()));
            }
            y_min = y_min.min(year);
            y_max = y_max.max(year);
        }
    }
    drop(reject);
    for (table, n) in dropped {
        if let Some(c) = out.counts.get_mut(&table) {
            c.rows_out -= n;
            c.error_rows += n;
        }
    }
    out.errors.extend(link_errors);
    out.errors.sort_by(|a, b| {
        let rank = |f: &str| TABLES.iter().position(|t| format!("{t}.csv") == f).unwrap_or(usize::MAX);
        (rank(&a.file), a.line, &a.column).cmp(&(rank(&b.file), b.line, &b.column))
    });

    let years = if y_min <= y_max { (y_min as i32)..=(y_max as i32) } else { 0..=0 };
    let mut store = Store::new(years, config.clone());
    for e in others.into_values() {
        store.insert_entity(e);
    }
    for d in district_list {
        store.insert_district(d);
    }
    for s in schools.into_values() {
        store.insert_school(s);
    }
    for (k, c) in cells {
        store.insert_observation(k, c);
    }
    out.store = Some(store);
    Ok(out)
}
