//! Live records, snapshots, field-level diffs and the append-only audit log.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{self, RecordLookup, SchemaError, SchemaRegistry, FIELD_CREATED, FIELD_ID, FIELD_UPDATED};
use crate::value::{FieldMap, Value, DELETED};

pub type RecordId = String;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: RecordId,
    pub table: String,
    pub values: FieldMap,
}

/// What a single audit entry is attributed to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cause {
    Action,
    SchemaDefault,
    Rule(String),
    /// Entries reconstructed by [`diff`], which has no causal information.
    Unattributed,
}

impl Cause {
    pub fn rule_id(&self) -> Option<&str> {
        match self {
            Cause::Rule(id) => Some(id),
            _ => None,
        }
    }
}

impl fmt::Display for Cause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cause::Action => f.write_str("action"),
            Cause::SchemaDefault => f.write_str("schema-default"),
            Cause::Rule(id) => write!(f, "rule:{id}"),
            Cause::Unattributed => f.write_str("unattributed"),
        }
    }
}

impl FromStr for Cause {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "action" => Ok(Cause::Action),
            "schema-default" => Ok(Cause::SchemaDefault),
            "unattributed" => Ok(Cause::Unattributed),
            _ => s
                .strip_prefix("rule:")
                .map(|id| Cause::Rule(id.to_string()))
                .ok_or_else(|| format!("invalid cause `{s}`")),
        }
    }
}

impl Serialize for Cause {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cause {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One field-level change.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub table: String,
    pub field: String,
    /// `None` for creation-phase entries.
    pub old_value: Option<Value>,
    pub new_value: Value,
    pub record_id: RecordId,
    pub cause: Cause,
    pub depth: u32,
    pub ordinal: u64,
    /// Position of the target record within a multi-record write's match set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fanout: Option<u32>,
}

impl AuditEntry {
    pub fn is_creation(&self) -> bool {
        self.old_value.is_none()
    }
}

/// The state delta of one episode step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuditSet(pub Vec<AuditEntry>);

impl AuditSet {
    pub fn iter(&self) -> std::slice::Iter<'_, AuditEntry> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.0
    }
}

impl FromIterator<AuditEntry> for AuditSet {
    fn from_iter<I: IntoIterator<Item = AuditEntry>>(iter: I) -> Self {
        AuditSet(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a AuditSet {
    type Item = &'a AuditEntry;
    type IntoIter = std::slice::Iter<'a, AuditEntry>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Observable platform state. Records are ordered by id within each table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    /// Next audit ordinal.
    pub seq: u64,
    pub clock: u64,
    pub counters: BTreeMap<String, u64>,
    pub tables: BTreeMap<String, Vec<Record>>,
}

impl StateSnapshot {
    pub fn record(&self, table: &str, id: &str) -> Option<&Record> {
        let recs = self.tables.get(table)?;
        recs.binary_search_by(|r| r.id.as_str().cmp(id)).ok().map(|i| &recs[i])
    }

    pub fn record_count(&self) -> usize {
        self.tables.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("no record `{id}` in `{table}`")]
    NoSuchRecord { table: String, id: RecordId },
    #[error(transparent)]
    SchemaViolation(#[from] SchemaError),
    #[error("snapshot does not belong to this registry: {0}")]
    SchemaMismatch(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", content = "target", rename_all = "lowercase")]
pub enum RawOp {
    Insert,
    Update(RecordId),
    Delete(RecordId),
}

/// Attribution of one field within a commit.
pub type Attribution<'a> = &'a dyn Fn(&str) -> (Cause, u32);

#[derive(Clone, Debug)]
pub struct Store {
    registry: Arc<SchemaRegistry>,
    tables: BTreeMap<String, BTreeMap<RecordId, FieldMap>>,
    counters: BTreeMap<String, u64>,
    seq: u64,
    clock: u64,
    log: Vec<AuditEntry>,
}

impl RecordLookup for Store {
    fn contains_record(&self, table: &str, id: &str) -> bool {
        self.get(table, id).is_some()
    }
}

impl RecordLookup for StateSnapshot {
    fn contains_record(&self, table: &str, id: &str) -> bool {
        self.record(table, id).is_some()
    }
}

impl Store {
    pub fn new(registry: Arc<SchemaRegistry>) -> Self {
        let tables = registry.table_names().map(|t| (t.to_string(), BTreeMap::new())).collect();
        Store { registry, tables, counters: BTreeMap::new(), seq: 0, clock: 0, log: Vec::new() }
    }

    pub fn from_snapshot(registry: Arc<SchemaRegistry>, snap: &StateSnapshot) -> Result<Self, StoreError> {
        let mut s = Store::new(registry);
        s.load(snap)?;
        Ok(s)
    }

    pub fn registry(&self) -> &Arc<SchemaRegistry> {
        &self.registry
    }

    fn load(&mut self, snap: &StateSnapshot) -> Result<(), StoreError> {
        for t in snap.tables.keys() {
            if self.registry.table(t).is_none() {
                return Err(StoreError::SchemaMismatch(format!("unknown table `{t}`")));
            }
        }
        for recs in self.tables.values_mut() {
            recs.clear();
        }
        for (t, recs) in &snap.tables {
            let dst = self.tables.get_mut(t).expect("checked above");
            for r in recs {
                dst.insert(r.id.clone(), r.values.clone());
            }
        }
        self.counters = snap.counters.clone();
        self.seq = snap.seq;
        self.clock = snap.clock;
        self.log.clear();
        Ok(())
    }

    pub fn snapshot(&self) -> StateSnapshot {
        let tables = self
            .tables
            .iter()
            .map(|(t, recs)| {
                let list = recs
                    .iter()
                    .map(|(id, values)| Record { id: id.clone(), table: t.clone(), values: values.clone() })
                    .collect();
                (t.clone(), list)
            })
            .collect();
        StateSnapshot { seq: self.seq, clock: self.clock, counters: self.counters.clone(), tables }
    }

    /// Restore `seed` exactly and clear the audit log.
    pub fn reset(&mut self, seed: &StateSnapshot) -> Result<(), StoreError> {
        self.load(seed)
    }

    /// Ordinal the next audit entry will carry.
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn log(&self) -> &[AuditEntry] {
        &self.log
    }

    pub fn get(&self, table: &str, id: &str) -> Option<&FieldMap> {
        self.tables.get(table)?.get(id)
    }

    /// Records of `table` in id order.
    pub fn records<'a>(&'a self, table: &str) -> impl Iterator<Item = (&'a RecordId, &'a FieldMap)> + 'a {
        self.tables.get(table).into_iter().flat_map(|m| m.iter())
    }

    pub fn peek_next_id(&self, table: &str) -> RecordId {
        format_id(table, self.counters.get(table).copied().unwrap_or(0) + 1)
    }

    pub fn next_id(&mut self, table: &str) -> RecordId {
        let n = self.counters.entry(table.to_string()).or_insert(0);
        *n += 1;
        format_id(table, *n)
    }

    fn tick(&mut self) -> i64 {
        self.clock += 1;
        self.clock as i64
    }

    fn emit(&mut self, mut e: AuditEntry, out: &mut Vec<AuditEntry>) {
        e.ordinal = self.seq;
        self.seq += 1;
        self.log.push(e.clone());
        out.push(e);
    }

    /// Load a record without auditing or rule execution (seed data, augmentation).
    pub fn bulk_insert(&mut self, table: &str, partial: &FieldMap) -> Result<RecordId, StoreError> {
        let schema = self.registry.require(table)?;
        reject_metadata(table, partial)?;
        let mut values = schema::apply_defaults(schema, partial)?;
        let id = self.next_id(table);
        let t = self.tick();
        stamp(&mut values, &id, t, true);
        self.tables.get_mut(table).expect("registered").insert(id.clone(), values);
        Ok(id)
    }

    /// Store a new record whose content is already complete and emit its
    /// creation audits (non-empty content fields only).
    pub fn commit_insert(
        &mut self,
        table: &str,
        id: &RecordId,
        mut values: FieldMap,
        attribution: Attribution<'_>,
    ) -> Vec<AuditEntry> {
        let t = self.tick();
        stamp(&mut values, id, t, true);
        let mut out = Vec::new();
        let schema = self.registry.table(table).expect("registered").clone();
        for def in schema.fields() {
            let v = &values[&def.name];
            if v.is_empty() {
                continue;
            }
            let (cause, depth) = attribution(&def.name);
            self.emit(
                AuditEntry {
                    table: table.to_string(),
                    field: def.name.clone(),
                    old_value: None,
                    new_value: v.clone(),
                    record_id: id.clone(),
                    cause,
                    depth,
                    ordinal: 0,
                    fanout: None,
                },
                &mut out,
            );
        }
        self.tables.get_mut(table).expect("registered").insert(id.clone(), values);
        out
    }

    /// Overwrite an existing record with `values`, emitting one entry per
    /// changed field plus the `updated_at` bump. No-op writes emit nothing.
    pub fn commit_update(
        &mut self,
        table: &str,
        id: &str,
        mut values: FieldMap,
        attribution: Attribution<'_>,
        fanout: Option<u32>,
    ) -> Vec<AuditEntry> {
        let prev = self.tables[table][id].clone();
        let schema = self.registry.table(table).expect("registered").clone();
        let changed: Vec<&str> = schema
            .fields()
            .iter()
            .map(|f| f.name.as_str())
            .filter(|f| prev.get(*f) != values.get(*f))
            .collect();
        let mut out = Vec::new();
        if changed.is_empty() {
            return out;
        }
        let t = self.tick();
        for f in &changed {
            let (cause, depth) = attribution(f);
            self.emit(
                AuditEntry {
                    table: table.to_string(),
                    field: f.to_string(),
                    old_value: Some(prev[*f].clone()),
                    new_value: values[*f].clone(),
                    record_id: id.to_string(),
                    cause,
                    depth,
                    ordinal: 0,
                    fanout,
                },
                &mut out,
            );
        }
        let (cause, depth) = attribution(FIELD_UPDATED);
        values.insert(FIELD_ID.into(), prev[FIELD_ID].clone());
        values.insert(FIELD_CREATED.into(), prev[FIELD_CREATED].clone());
        values.insert(FIELD_UPDATED.into(), Value::Int(t));
        self.emit(
            AuditEntry {
                table: table.to_string(),
                field: FIELD_UPDATED.into(),
                old_value: Some(prev[FIELD_UPDATED].clone()),
                new_value: Value::Int(t),
                record_id: id.to_string(),
                cause,
                depth,
                ordinal: 0,
                fanout,
            },
            &mut out,
        );
        self.tables.get_mut(table).expect("registered").insert(id.to_string(), values);
        out
    }

    /// Rule-free mutation: the substrate the cascade engine builds on.
    pub fn apply_raw(&mut self, table: &str, op: RawOp, payload: &FieldMap) -> Result<(RecordId, AuditSet), StoreError> {
        let schema = self.registry.require(table)?.clone();
        reject_metadata(table, payload)?;
        match op {
            RawOp::Insert => {
                let values = schema::apply_defaults(&schema, payload)?;
                let id = self.next_id(table);
                let attr = |f: &str| {
                    if payload.contains_key(f) {
                        (Cause::Action, 0)
                    } else {
                        (Cause::SchemaDefault, 0)
                    }
                };
                let out = self.commit_insert(table, &id, values, &attr);
                Ok((id, AuditSet(out)))
            }
            RawOp::Update(id) => {
                let merged = self.merged(table, &id, payload)?;
                let out = self.commit_update(table, &id, merged, &|_| (Cause::Action, 0), None);
                Ok((id, AuditSet(out)))
            }
            RawOp::Delete(id) => {
                let prev = self
                    .tables
                    .get_mut(table)
                    .and_then(|m| m.remove(&id))
                    .ok_or_else(|| StoreError::NoSuchRecord { table: table.into(), id: id.clone() })?;
                let mut out = Vec::new();
                for def in schema.fields() {
                    self.emit(
                        AuditEntry {
                            table: table.to_string(),
                            field: def.name.clone(),
                            old_value: Some(prev[&def.name].clone()),
                            new_value: Value::text(DELETED),
                            record_id: id.clone(),
                            cause: Cause::Action,
                            depth: 0,
                            ordinal: 0,
                            fanout: None,
                        },
                        &mut out,
                    );
                }
                Ok((id, AuditSet(out)))
            }
        }
    }

    /// Existing record with `payload` merged over it, type-checked.
    pub fn merged(&self, table: &str, id: &str, payload: &FieldMap) -> Result<FieldMap, StoreError> {
        let schema = self.registry.require(table)?;
        let current = self
            .get(table, id)
            .ok_or_else(|| StoreError::NoSuchRecord { table: table.into(), id: id.into() })?;
        let mut merged = current.clone();
        for (k, v) in payload {
            let def = schema
                .field(k)
                .ok_or_else(|| SchemaError::UnknownField { table: table.into(), field: k.clone() })?;
            if !def.kind.accepts(v) {
                return Err(SchemaError::TypeMismatch {
                    table: table.into(),
                    field: k.clone(),
                    kind: def.kind.as_str(),
                    value: v.clone(),
                }
                .into());
            }
            merged.insert(k.clone(), v.clone());
        }
        Ok(merged)
    }

    /// Set one field without auditing; creates the record from defaults when
    /// absent. Used to patch predicted deltas into a state view.
    pub fn patch_field(&mut self, table: &str, id: &str, field: &str, value: &Value) -> Result<(), StoreError> {
        let schema = self.registry.require(table)?.clone();
        if schema.field(field).is_none() {
            return Err(SchemaError::UnknownField { table: table.into(), field: field.into() }.into());
        }
        if value.as_text() == Some(DELETED) {
            self.tables.get_mut(table).expect("registered").remove(id);
            return Ok(());
        }
        if self.get(table, id).is_none() {
            let mut values = schema::apply_defaults(&schema, &FieldMap::new())?;
            values.insert(FIELD_ID.into(), Value::text(id));
            self.tables.get_mut(table).expect("registered").insert(id.to_string(), values);
            if let Some(n) = parse_id_counter(table, id) {
                let c = self.counters.entry(table.to_string()).or_insert(0);
                *c = (*c).max(n);
            }
        }
        self.tables.get_mut(table).expect("registered").get_mut(id).expect("present").insert(field.into(), value.clone());
        Ok(())
    }
}

fn reject_metadata(table: &str, payload: &FieldMap) -> Result<(), SchemaError> {
    match payload.keys().find(|k| schema::METADATA_FIELDS.contains(&k.as_str())) {
        Some(k) => Err(SchemaError::TypeMismatch {
            table: table.into(),
            field: k.clone(),
            kind: "metadata",
            value: payload[k].clone(),
        }),
        None => Ok(()),
    }
}

fn stamp(values: &mut FieldMap, id: &str, t: i64, created: bool) {
    values.insert(FIELD_ID.into(), Value::text(id));
    if created {
        values.insert(FIELD_CREATED.into(), Value::Int(t));
    }
    values.insert(FIELD_UPDATED.into(), Value::Int(t));
}

pub fn format_id(table: &str, n: u64) -> RecordId {
    format!("{table}_{n:06}")
}

fn parse_id_counter(table: &str, id: &str) -> Option<u64> {
    id.strip_prefix(table)?.strip_prefix('_')?.parse().ok()
}

/// Minimal field-level difference between two snapshots of one registry.
///
/// New records yield creation entries for their non-empty content fields,
/// vanished records yield tombstones, surviving records yield one entry per
/// changed field (metadata included).
pub fn diff(registry: &SchemaRegistry, before: &StateSnapshot, after: &StateSnapshot) -> Result<AuditSet, StoreError> {
    for t in before.tables.keys().chain(after.tables.keys()) {
        if registry.table(t).is_none() {
            return Err(StoreError::SchemaMismatch(format!("unknown table `{t}`")));
        }
    }
    let mut out = Vec::new();
    let mut push = |table: &str, field: &str, old: Option<Value>, new: Value, id: &str| {
        let ordinal = out.len() as u64;
        out.push(AuditEntry {
            table: table.into(),
            field: field.into(),
            old_value: old,
            new_value: new,
            record_id: id.into(),
            cause: Cause::Unattributed,
            depth: 0,
            ordinal,
            fanout: None,
        });
    };
    for schema in registry.tables() {
        let t = schema.name.as_str();
        let empty = Vec::new();
        let b = before.tables.get(t).unwrap_or(&empty);
        let a = after.tables.get(t).unwrap_or(&empty);
        let bmap: BTreeMap<&str, &FieldMap> = b.iter().map(|r| (r.id.as_str(), &r.values)).collect();
        let amap: BTreeMap<&str, &FieldMap> = a.iter().map(|r| (r.id.as_str(), &r.values)).collect();
        let ids: std::collections::BTreeSet<&str> = bmap.keys().chain(amap.keys()).copied().collect();
        for id in ids {
            match (bmap.get(id), amap.get(id)) {
                (None, Some(new)) => {
                    for def in schema.fields() {
                        let v = &new[&def.name];
                        if !v.is_empty() {
                            push(t, &def.name, None, v.clone(), id);
                        }
                    }
                }
                (Some(old), None) => {
                    for def in schema.fields() {
                        push(t, &def.name, Some(old[&def.name].clone()), Value::text(DELETED), id);
                    }
                }
                (Some(old), Some(new)) => {
                    for def in schema.fields().iter().chain(schema.all_fields().filter(|f| f.name == FIELD_UPDATED)) {
                        let (o, n) = (old.get(&def.name), new.get(&def.name));
                        if o != n {
                            push(t, &def.name, o.cloned(), n.cloned().unwrap_or(Value::Null), id);
                        }
                    }
                }
                (None, None) => unreachable!(),
            }
        }
    }
    Ok(AuditSet(out))
}

/// Anything that names a `(table, field)` pair.
pub trait FieldKey {
    fn table(&self) -> &str;
    fn field(&self) -> &str;
}

impl FieldKey for AuditEntry {
    fn table(&self) -> &str {
        &self.table
    }
    fn field(&self) -> &str {
        &self.field
    }
}

/// Whether the pair is scored (not metadata, datetime or reference).
pub fn is_content_key(registry: &SchemaRegistry, table: &str, field: &str) -> bool {
    registry.field(table, field).is_some_and(|f| f.is_content())
}

/// Drop metadata, datetime and reference entries, preserving order.
pub fn filter_content<T: FieldKey + Clone>(entries: &[T], registry: &SchemaRegistry) -> Vec<T> {
    entries.iter().filter(|e| is_content_key(registry, e.table(), e.field())).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{FieldDef, TableSchema};
    use crate::value::fields;

    fn registry() -> Arc<SchemaRegistry> {
        let mut reg = SchemaRegistry::new();
        reg.define_table(TableSchema::new(
            "u_user",
            vec![
                FieldDef::text("u_name"),
                FieldDef::boolean("u_active").with_default(true),
                FieldDef::integer("u_notification").with_default(2),
                FieldDef::boolean("u_locked_out").with_default(false),
                FieldDef::text("u_email"),
            ],
        ))
        .unwrap();
        reg.define_table(TableSchema::new(
            "u_case",
            vec![
                FieldDef::text("u_short"),
                FieldDef::choice("u_state", &[(1, "New"), (2, "Open"), (7, "Closed")]),
                FieldDef::integer("u_level"),
                FieldDef::boolean("u_major"),
                FieldDef::text("u_queue").with_default("triage"),
                FieldDef::integer("u_count").with_default(1),
                FieldDef::choice("u_impact", &[(3, "Low"), (1, "High")]),
                FieldDef::reference("u_caller", "u_user"),
                FieldDef::datetime("u_due"),
            ],
        ))
        .unwrap();
        Arc::new(reg)
    }

    #[test]
    fn insert_audits_non_empty_fields() {
        let mut s = Store::new(registry());
        let (id, audits) = s.apply_raw("u_user", RawOp::Insert, &fields([("u_name", "ann")])).unwrap();
        assert_eq!(id, "u_user_000001");
        assert_eq!(audits.len(), 4);
        assert!(audits.iter().all(|e| e.old_value.is_none()));
        assert_eq!(audits.iter().filter(|e| e.cause == Cause::Action).count(), 1);
        assert_eq!(audits.iter().filter(|e| e.cause == Cause::SchemaDefault).count(), 3);
        assert_eq!(s.log().len(), 4);
    }

    #[test]
    fn insert_count_matches_non_empty_fields_on_wide_schema() {
        let reg = registry();
        let partial = fields([("u_short", Value::text("disk full")), ("u_state", Value::Int(2))]);
        // count non-empty materialized content fields without going through the store
        let schema = reg.table("u_case").unwrap();
        let expected = schema
            .fields()
            .iter()
            .filter(|f| {
                let v = partial.get(&f.name).cloned().unwrap_or_else(|| f.materialized_default());
                !v.is_empty()
            })
            .count();
        assert_eq!(expected, 7);
        let mut s = Store::new(reg);
        let (_, audits) = s.apply_raw("u_case", RawOp::Insert, &partial).unwrap();
        assert_eq!(audits.len(), expected);
    }

    #[test]
    fn no_op_update_is_silent() {
        let mut s = Store::new(registry());
        let (id, _) = s.apply_raw("u_user", RawOp::Insert, &fields([("u_name", "ann")])).unwrap();
        let (_, audits) = s.apply_raw("u_user", RawOp::Update(id.clone()), &fields([("u_name", "ann")])).unwrap();
        assert!(audits.is_empty());
        let (_, audits) = s.apply_raw("u_user", RawOp::Update(id), &fields([("u_name", "bob")])).unwrap();
        assert_eq!(audits.len(), 2);
        assert_eq!(audits.entries()[1].field, FIELD_UPDATED);
    }

    #[test]
    fn update_missing_record_fails() {
        let mut s = Store::new(registry());
        let err = s.apply_raw("u_user", RawOp::Update("u_user_000009".into()), &FieldMap::new()).unwrap_err();
        assert!(matches!(err, StoreError::NoSuchRecord { .. }));
        let err = s.apply_raw("u_user", RawOp::Insert, &fields([("u_active", 3i64)])).unwrap_err();
        assert!(matches!(err, StoreError::SchemaViolation(_)));
        let err = s.apply_raw("u_user", RawOp::Insert, &fields([(FIELD_ID, "x")])).unwrap_err();
        assert!(matches!(err, StoreError::SchemaViolation(_)));
    }

    #[test]
    fn delete_tombstones() {
        let mut s = Store::new(registry());
        let (id, _) = s.apply_raw("u_user", RawOp::Insert, &fields([("u_name", "ann")])).unwrap();
        let (_, audits) = s.apply_raw("u_user", RawOp::Delete(id.clone()), &FieldMap::new()).unwrap();
        assert_eq!(audits.len(), 5);
        assert!(audits.iter().all(|e| e.new_value == Value::text(DELETED)));
        assert!(s.get("u_user", &id).is_none());
    }

    #[test]
    fn diff_identity_and_single_change() {
        let reg = registry();
        let mut s = Store::new(reg.clone());
        let (id, _) = s.bulk_insert("u_user", &fields([("u_name", "ann")])).map(|id| (id, ())).unwrap();
        let a = s.snapshot();
        assert!(diff(&reg, &a, &a).unwrap().is_empty());
        s.apply_raw("u_user", RawOp::Update(id), &fields([("u_email", "a@x")])).unwrap();
        let b = s.snapshot();
        let d = diff(&reg, &a, &b).unwrap();
        let content = filter_content(d.entries(), &reg);
        assert_eq!(content.len(), 1);
        assert_eq!(content[0].field, "u_email");
    }

    #[test]
    fn diff_rejects_foreign_tables() {
        let reg = registry();
        let mut snap = Store::new(reg.clone()).snapshot();
        snap.tables.insert("u_other".into(), vec![]);
        assert!(matches!(diff(&reg, &snap, &snap), Err(StoreError::SchemaMismatch(_))));
    }

    #[test]
    fn reset_restores_seed_bytes() {
        let reg = registry();
        let mut s = Store::new(reg);
        s.bulk_insert("u_user", &fields([("u_name", "ann")])).unwrap();
        let seed = s.snapshot();
        let seed_bytes = crate::value::canonical_json(&seed).unwrap();
        s.apply_raw("u_user", RawOp::Insert, &fields([("u_name", "bob")])).unwrap();
        s.apply_raw("u_case", RawOp::Insert, &FieldMap::new()).unwrap();
        s.reset(&seed).unwrap();
        assert_eq!(s.snapshot(), seed);
        assert!(s.log().is_empty());
        s.reset(&seed).unwrap();
        assert_eq!(crate::value::canonical_json(&s.snapshot()).unwrap(), seed_bytes);
    }

    #[test]
    fn bulk_insert_does_not_audit() {
        let mut s = Store::new(registry());
        s.bulk_insert("u_case", &fields([("u_short", "x")])).unwrap();
        assert!(s.log().is_empty());
    }

    #[test]
    fn filter_content_drops_excluded_kinds() {
        let reg = registry();
        let mut s = Store::new(reg.clone());
        let uid = s.bulk_insert("u_user", &FieldMap::new()).unwrap();
        let (id, _) = s.apply_raw("u_case", RawOp::Insert, &FieldMap::new()).unwrap();
        let (_, audits) = s
            .apply_raw(
                "u_case",
                RawOp::Update(id),
                &fields([
                    ("u_short", Value::text("a")),
                    ("u_state", Value::Int(2)),
                    ("u_level", Value::Int(3)),
                    ("u_major", Value::Bool(true)),
                    ("u_queue", Value::text("net")),
                    ("u_count", Value::Int(5)),
                    ("u_impact", Value::Int(1)),
                    ("u_caller", Value::text(uid)),
                    ("u_due", Value::Int(99)),
                ]),
            )
            .unwrap();
        assert_eq!(audits.len(), 10);
        let excludable = audits
            .iter()
            .filter(|e| !reg.field(&e.table, &e.field).unwrap().is_content())
            .count();
        assert_eq!(excludable, 3);
        let kept = filter_content(audits.entries(), &reg);
        assert_eq!(kept.len(), 7);
        assert_eq!(filter_content(&kept, &reg), kept);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Clone, Debug)]
        enum Mutation {
            Insert(String, i64),
            Update(usize, String, i64, bool),
            Delete(usize),
        }

        fn arb_mutation() -> impl Strategy<Value = Mutation> {
            prop_oneof![
                ("[a-c]{0,2}", 0i64..3).prop_map(|(s, n)| Mutation::Insert(s, n)),
                (0usize..8, "[a-c]{0,2}", 0i64..3, any::<bool>()).prop_map(|(i, s, n, b)| Mutation::Update(i, s, n, b)),
                (0usize..8).prop_map(Mutation::Delete),
            ]
        }

        fn run(s: &mut Store, muts: &[Mutation]) {
            for m in muts {
                let ids: Vec<RecordId> = s.records("u_user").map(|(id, _)| id.clone()).collect();
                match m {
                    Mutation::Insert(name, n) => {
                        s.apply_raw("u_user", RawOp::Insert, &fields([("u_name", Value::text(name)), ("u_notification", Value::Int(*n))]))
                            .unwrap();
                    }
                    Mutation::Update(i, name, n, b) if !ids.is_empty() => {
                        let id = ids[i % ids.len()].clone();
                        s.apply_raw(
                            "u_user",
                            RawOp::Update(id),
                            &fields([("u_email", Value::text(name)), ("u_notification", Value::Int(*n)), ("u_active", Value::Bool(*b))]),
                        )
                        .unwrap();
                    }
                    Mutation::Delete(i) if !ids.is_empty() => {
                        s.apply_raw("u_user", RawOp::Delete(ids[i % ids.len()].clone()), &FieldMap::new()).unwrap();
                    }
                    _ => {}
                }
            }
        }

        /// Independent replay: rebuild content from the seed using only diff entries.
        fn replay(seed: &StateSnapshot, d: &AuditSet, reg: &SchemaRegistry) -> BTreeMap<(String, String), FieldMap> {
            let mut recs: BTreeMap<(String, String), FieldMap> = seed
                .tables
                .iter()
                .flat_map(|(t, rs)| rs.iter().map(move |r| ((t.clone(), r.id.clone()), r.values.clone())))
                .collect();
            for e in d {
                let key = (e.table.clone(), e.record_id.clone());
                if e.new_value == Value::text(DELETED) {
                    recs.remove(&key);
                    continue;
                }
                let rec = recs.entry(key).or_insert_with(|| {
                    reg.table(&e.table)
                        .unwrap()
                        .fields()
                        .iter()
                        .map(|f| (f.name.clone(), if f.kind.accepts(&Value::Null) { Value::Null } else { Value::text("") }))
                        .collect()
                });
                rec.insert(e.field.clone(), e.new_value.clone());
            }
            recs
        }

        fn content(snap: &StateSnapshot, reg: &SchemaRegistry) -> BTreeMap<(String, String), FieldMap> {
            snap.tables
                .iter()
                .flat_map(|(t, rs)| {
                    rs.iter().map(move |r| {
                        let vals = r
                            .values
                            .iter()
                            .filter(|(k, _)| reg.field(t, k).is_some_and(|f| !f.is_metadata))
                            .map(|(k, v)| (k.clone(), v.clone()))
                            .collect();
                        ((t.clone(), r.id.clone()), vals)
                    })
                })
                .collect()
        }

        fn strip_empty(m: BTreeMap<(String, String), FieldMap>) -> BTreeMap<(String, String), FieldMap> {
            m.into_iter()
                .map(|(k, v)| (k, v.into_iter().filter(|(f, v)| !v.is_empty() && !schema::METADATA_FIELDS.contains(&f.as_str())).collect()))
                .collect()
        }

        proptest! {
            #[test]
            fn diff_replay_reproduces_after(seed_muts in proptest::collection::vec(arb_mutation(), 0..5),
                                            muts in proptest::collection::vec(arb_mutation(), 0..12)) {
                let reg = registry();
                let mut s = Store::new(reg.clone());
                run(&mut s, &seed_muts);
                let before = s.snapshot();
                run(&mut s, &muts);
                let after = s.snapshot();
                let d = diff(&reg, &before, &after).unwrap();
                prop_assert_eq!(strip_empty(replay(&before, &d, &reg)), strip_empty(content(&after, &reg)));
                prop_assert!(diff(&reg, &after, &after).unwrap().is_empty());
            }

            #[test]
            fn audit_log_replays_to_final_state(muts in proptest::collection::vec(arb_mutation(), 0..12)) {
                let reg = registry();
                let mut s = Store::new(reg.clone());
                s.bulk_insert("u_user", &fields([("u_name", "seed")])).unwrap();
                let seed = s.snapshot();
                run(&mut s, &muts);
                let log = AuditSet(s.log().to_vec());
                let fin = s.snapshot();
                prop_assert_eq!(strip_empty(replay(&seed, &log, &reg)), strip_empty(content(&fin, &reg)));
            }

            #[test]
            fn deterministic_ordinals(muts in proptest::collection::vec(arb_mutation(), 0..12)) {
                let reg = registry();
                let mut a = Store::new(reg.clone());
                let mut b = Store::new(reg);
                run(&mut a, &muts);
                run(&mut b, &muts);
                prop_assert_eq!(a.log(), b.log());
                prop_assert!(a.log().windows(2).all(|w| w[0].ordinal < w[1].ordinal));
            }
        }
    }
}
