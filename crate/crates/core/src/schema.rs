//! Table schemas and the registry that owns them.
//!
//! Everything a Tier 1 prediction needs lives here: field kinds, defaults,
//! choice lists and the empty value each kind materializes on insert.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::{FieldMap, Value};

/// Record id field, present on every table.
pub const FIELD_ID: &str = "id";
pub const FIELD_CREATED: &str = "created_at";
pub const FIELD_UPDATED: &str = "updated_at";
pub const METADATA_FIELDS: [&str; 3] = [FIELD_ID, FIELD_CREATED, FIELD_UPDATED];

/// Prefixes owned by platform product modules; custom tables may not use them.
pub const RESERVED_PREFIXES: [&str; 6] = ["itam", "cmdb", "itsm", "hr", "sys", "sn"];

pub const DEFAULT_MAX_TABLES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Text,
    Integer,
    Boolean,
    Choice,
    Reference,
    Datetime,
}

impl FieldKind {
    /// Whether `value` has the representation this kind uses.
    pub fn accepts(self, value: &Value) -> bool {
        matches!(
            (self, value),
            (FieldKind::Text, Value::Text(_))
                | (FieldKind::Integer, Value::Int(_))
                | (FieldKind::Boolean, Value::Bool(_))
                | (FieldKind::Choice, Value::Int(_))
                | (FieldKind::Reference, Value::Text(_) | Value::Null)
                | (FieldKind::Datetime, Value::Int(_) | Value::Null)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Text => "text",
            FieldKind::Integer => "integer",
            FieldKind::Boolean => "boolean",
            FieldKind::Choice => "choice",
            FieldKind::Reference => "reference",
            FieldKind::Datetime => "datetime",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub value: i64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<ChoiceOption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_table: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_metadata: bool,
}

impl FieldDef {
    pub fn new(name: impl Into<String>, kind: FieldKind) -> Self {
        FieldDef {
            name: name.into(),
            kind,
            default: None,
            choices: Vec::new(),
            ref_table: None,
            is_metadata: false,
        }
    }

    pub fn text(name: &str) -> Self {
        Self::new(name, FieldKind::Text)
    }

    pub fn integer(name: &str) -> Self {
        Self::new(name, FieldKind::Integer)
    }

    pub fn boolean(name: &str) -> Self {
        Self::new(name, FieldKind::Boolean)
    }

    pub fn choice(name: &str, options: &[(i64, &str)]) -> Self {
        let mut f = Self::new(name, FieldKind::Choice);
        f.choices = options
            .iter()
            .map(|(v, l)| ChoiceOption { value: *v, label: (*l).to_string() })
            .collect();
        f
    }

    pub fn reference(name: &str, table: &str) -> Self {
        let mut f = Self::new(name, FieldKind::Reference);
        f.ref_table = Some(table.to_string());
        f
    }

    pub fn datetime(name: &str) -> Self {
        Self::new(name, FieldKind::Datetime)
    }

    pub fn with_default(mut self, v: impl Into<Value>) -> Self {
        self.default = Some(v.into());
        self
    }

    pub fn has_choice(&self, v: i64) -> bool {
        self.choices.iter().any(|c| c.value == v)
    }

    /// The value an insert stores when the caller supplies nothing.
    pub fn materialized_default(&self) -> Value {
        if let Some(d) = &self.default {
            return d.clone();
        }
        match self.kind {
            FieldKind::Text => Value::Text(String::new()),
            FieldKind::Integer => Value::Int(0),
            FieldKind::Boolean => Value::Bool(false),
            FieldKind::Choice => self.choices.first().map(|c| Value::Int(c.value)).unwrap_or(Value::Null),
            FieldKind::Reference | FieldKind::Datetime => Value::Null,
        }
    }

    /// Metadata, datetime and reference fields never enter score keys.
    pub fn is_content(&self) -> bool {
        !self.is_metadata && !matches!(self.kind, FieldKind::Datetime | FieldKind::Reference)
    }

    fn check_local(&self, table: &str) -> Result<(), SchemaError> {
        if !self.is_metadata && !self.name.starts_with("u_") {
            return Err(SchemaError::InvalidFieldName { table: table.into(), field: self.name.clone() });
        }
        if self.kind == FieldKind::Choice && self.choices.is_empty() {
            return Err(SchemaError::InvalidDefault {
                table: table.into(),
                field: self.name.clone(),
                reason: "choice field without choices".into(),
            });
        }
        if self.kind == FieldKind::Reference && self.ref_table.is_none() {
            return Err(SchemaError::InvalidDefault {
                table: table.into(),
                field: self.name.clone(),
                reason: "reference field without ref_table".into(),
            });
        }
        if let Some(d) = &self.default {
            let bad = |reason: &str| SchemaError::InvalidDefault {
                table: table.into(),
                field: self.name.clone(),
                reason: reason.into(),
            };
            if !self.kind.accepts(d) {
                return Err(bad("default does not match field kind"));
            }
            if self.kind == FieldKind::Datetime {
                return Err(bad("datetime defaults are not supported"));
            }
            if self.kind == FieldKind::Choice && !self.has_choice(d.as_int().unwrap_or_default()) {
                return Err(bad("choice default is not a member of the choice list"));
            }
        }
        Ok(())
    }
}

/// A table definition. The three metadata fields are attached automatically
/// and are not part of the serialized form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TableRepr", into = "TableRepr")]
pub struct TableSchema {
    pub name: String,
    fields: Vec<FieldDef>,
    metadata: Vec<FieldDef>,
}

#[derive(Serialize, Deserialize)]
struct TableRepr {
    name: String,
    fields: Vec<FieldDef>,
}

impl From<TableRepr> for TableSchema {
    fn from(r: TableRepr) -> Self {
        TableSchema::new(r.name, r.fields)
    }
}

impl From<TableSchema> for TableRepr {
    fn from(t: TableSchema) -> Self {
        TableRepr { name: t.name, fields: t.fields }
    }
}

impl TableSchema {
    pub fn new(name: impl Into<String>, fields: Vec<FieldDef>) -> Self {
        let name = name.into();
        let mut id = FieldDef::reference(FIELD_ID, &name);
        id.is_metadata = true;
        let mut created = FieldDef::datetime(FIELD_CREATED);
        created.is_metadata = true;
        let mut updated = FieldDef::datetime(FIELD_UPDATED);
        updated.is_metadata = true;
        TableSchema { name, fields, metadata: vec![id, created, updated] }
    }

    /// Content (non-metadata) fields in declaration order.
    pub fn fields(&self) -> &[FieldDef] {
        &self.fields
    }

    pub fn fields_mut(&mut self) -> &mut [FieldDef] {
        &mut self.fields
    }

    /// Metadata fields followed by content fields.
    pub fn all_fields(&self) -> impl Iterator<Item = &FieldDef> {
        self.metadata.iter().chain(self.fields.iter())
    }

    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.all_fields().find(|f| f.name == name)
    }

    fn check_local(&self) -> Result<(), SchemaError> {
        if is_reserved(&self.name) {
            return Err(SchemaError::ReservedNamespace(self.name.clone()));
        }
        let mut seen = BTreeSet::new();
        for f in &self.fields {
            if f.is_metadata || METADATA_FIELDS.contains(&f.name.as_str()) {
                return Err(SchemaError::InvalidFieldName { table: self.name.clone(), field: f.name.clone() });
            }
            if !seen.insert(f.name.as_str()) {
                return Err(SchemaError::DuplicateField { table: self.name.clone(), field: f.name.clone() });
            }
            f.check_local(&self.name)?;
        }
        Ok(())
    }
}

pub fn is_reserved(table: &str) -> bool {
    RESERVED_PREFIXES
        .iter()
        .any(|p| table == *p || table.strip_prefix(p).is_some_and(|rest| rest.starts_with('_')))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("table name `{0}` uses a reserved namespace prefix")]
    ReservedNamespace(String),
    #[error("field `{table}.{field}` references unregistered table `{target}`")]
    DanglingReference { table: String, field: String, target: String },
    #[error("table `{0}` is already registered")]
    DuplicateTable(String),
    #[error("field `{table}.{field}` is declared twice")]
    DuplicateField { table: String, field: String },
    #[error("field `{table}.{field}` must carry the u_ prefix")]
    InvalidFieldName { table: String, field: String },
    #[error("field `{table}.{field}`: {reason}")]
    InvalidDefault { table: String, field: String, reason: String },
    #[error("registry is full ({max} tables)")]
    TooManyTables { max: usize },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown field `{table}.{field}`")]
    UnknownField { table: String, field: String },
    #[error("value {value} does not fit `{table}.{field}` of kind {kind}")]
    TypeMismatch { table: String, field: String, kind: &'static str, value: Value },
}

/// All tables of one world, in definition order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchemaRegistry {
    tables: BTreeMap<String, TableSchema>,
    order: Vec<String>,
    max_tables: usize,
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::with_max_tables(DEFAULT_MAX_TABLES)
    }

    pub fn with_max_tables(max_tables: usize) -> Self {
        SchemaRegistry { tables: BTreeMap::new(), order: Vec::new(), max_tables }
    }

    pub fn max_tables(&self) -> usize {
        self.max_tables
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn table(&self, name: &str) -> Option<&TableSchema> {
        self.tables.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&TableSchema, SchemaError> {
        self.table(name).ok_or_else(|| SchemaError::UnknownTable(name.into()))
    }

    pub fn field(&self, table: &str, field: &str) -> Option<&FieldDef> {
        self.table(table)?.field(field)
    }

    /// Tables in definition order.
    pub fn tables(&self) -> impl Iterator<Item = &TableSchema> {
        self.order.iter().map(|n| &self.tables[n])
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    /// Register `schema`. On error the registry is left untouched.
    pub fn define_table(&mut self, schema: TableSchema) -> Result<(), SchemaError> {
        schema.check_local()?;
        if self.tables.contains_key(&schema.name) {
            return Err(SchemaError::DuplicateTable(schema.name));
        }
        if self.tables.len() >= self.max_tables {
            return Err(SchemaError::TooManyTables { max: self.max_tables });
        }
        for f in schema.fields() {
            if let Some(target) = &f.ref_table {
                if target != &schema.name && !self.tables.contains_key(target) {
                    return Err(SchemaError::DanglingReference {
                        table: schema.name.clone(),
                        field: f.name.clone(),
                        target: target.clone(),
                    });
                }
            }
        }
        self.order.push(schema.name.clone());
        self.tables.insert(schema.name.clone(), schema);
        debug_assert!(self.is_closed());
        Ok(())
    }

    /// Replace an existing table's definition (used when defaults are finalized).
    pub fn redefine_table(&mut self, schema: TableSchema) -> Result<(), SchemaError> {
        schema.check_local()?;
        if !self.tables.contains_key(&schema.name) {
            return Err(SchemaError::UnknownTable(schema.name));
        }
        let mut next = self.clone();
        next.tables.insert(schema.name.clone(), schema);
        if let Some(err) = next.first_dangling() {
            return Err(err);
        }
        *self = next;
        Ok(())
    }

    /// Every `ref_table` resolves to a registered table.
    pub fn is_closed(&self) -> bool {
        self.first_dangling().is_none()
    }

    fn first_dangling(&self) -> Option<SchemaError> {
        self.tables().find_map(|t| {
            t.all_fields().find_map(|f| {
                let target = f.ref_table.as_ref()?;
                (!self.tables.contains_key(target)).then(|| SchemaError::DanglingReference {
                    table: t.name.clone(),
                    field: f.name.clone(),
                    target: target.clone(),
                })
            })
        })
    }
}

impl Serialize for SchemaRegistry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.tables())
    }
}

impl<'de> Deserialize<'de> for SchemaRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let list = Vec::<TableSchema>::deserialize(d)?;
        let mut reg = SchemaRegistry::with_max_tables(DEFAULT_MAX_TABLES.max(list.len()));
        for t in list {
            reg.define_table(t).map_err(serde::de::Error::custom)?;
        }
        Ok(reg)
    }
}

/// Fill every field of `schema`: supplied values pass through, the rest take
/// the field default or the kind's empty value. Metadata fields start null.
pub fn apply_defaults(schema: &TableSchema, partial: &FieldMap) -> Result<FieldMap, SchemaError> {
    for (name, value) in partial {
        let def = schema
            .field(name)
            .ok_or_else(|| SchemaError::UnknownField { table: schema.name.clone(), field: name.clone() })?;
        if !def.kind.accepts(value) {
            return Err(SchemaError::TypeMismatch {
                table: schema.name.clone(),
                field: name.clone(),
                kind: def.kind.as_str(),
                value: value.clone(),
            });
        }
    }
    let mut out = FieldMap::new();
    for def in schema.all_fields() {
        let v = match partial.get(&def.name) {
            Some(v) => v.clone(),
            None if def.is_metadata => Value::Null,
            None => def.materialized_default(),
        };
        out.insert(def.name.clone(), v);
    }
    Ok(out)
}

/// Existence lookup for referential checks.
pub trait RecordLookup {
    fn contains_record(&self, table: &str, id: &str) -> bool;
}

impl RecordLookup for () {
    fn contains_record(&self, _: &str, _: &str) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum RecordViolation {
    UnknownField { field: String },
    TypeMismatch { field: String, kind: &'static str },
    ChoiceViolation { field: String, value: i64 },
    ReferentialViolation { field: String, table: String, id: String },
}

/// Every violation of `record` against `table`'s schema. Null references are fine.
pub fn check_record(
    registry: &SchemaRegistry,
    table: &str,
    record: &FieldMap,
    store: &dyn RecordLookup,
) -> Result<Vec<RecordViolation>, SchemaError> {
    let schema = registry.require(table)?;
    let mut out = Vec::new();
    for (name, value) in record {
        let Some(def) = schema.field(name) else {
            out.push(RecordViolation::UnknownField { field: name.clone() });
            continue;
        };
        if !def.kind.accepts(value) {
            out.push(RecordViolation::TypeMismatch { field: name.clone(), kind: def.kind.as_str() });
            continue;
        }
        match (def.kind, value) {
            (FieldKind::Choice, Value::Int(v)) if !def.has_choice(*v) => {
                out.push(RecordViolation::ChoiceViolation { field: name.clone(), value: *v });
            }
            (FieldKind::Reference, Value::Text(id)) if !def.is_metadata => {
                let target = def.ref_table.as_deref().unwrap_or_default();
                if !store.contains_record(target, id) {
                    out.push(RecordViolation::ReferentialViolation {
                        field: name.clone(),
                        table: target.to_string(),
                        id: id.clone(),
                    });
                }
            }
            _ => {}
        }
    }
    Ok(out)
}
