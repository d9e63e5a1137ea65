//! The read-only query interface predictors use to discover a world.
//!
//! Besides the registered data tables it serves three virtual tables: rule
//! definitions, SLA definitions and choice values. Readability is gated by
//! the instance's [`AclPolicy`]; a denied query still counts as a call.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchgen::Episode;
use crate::dsl::{eval_filter, parse_condition, SyntaxError};
use crate::engine::{Operation, Phase, RuleDef, SlaDefinition};
use crate::schema::SchemaRegistry;
use crate::store::StateSnapshot;
use crate::value::{FieldMap, Value};
use crate::world::{AclPolicy, World};

/// Rule definitions, one row per rule.
pub const RULES_TABLE: &str = "sys_script";
/// SLA definitions, one row per SLA.
pub const SLA_DEF_TABLE: &str = "contract_sla";
/// Choice values, one row per option of every choice field.
pub const CHOICE_TABLE: &str = "sys_choice";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("access denied to table `{table}`")]
    AccessDenied { table: String },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("bad filter: {0}")]
    BadFilter(#[from] SyntaxError),
}

/// Everything a query can see: schemas, state, rules, SLAs and the ACL.
#[derive(Clone, Debug)]
pub struct Instance {
    pub registry: Arc<SchemaRegistry>,
    pub state: StateSnapshot,
    pub rules: Vec<RuleDef>,
    pub slas: Vec<SlaDefinition>,
    pub acl: AclPolicy,
}

impl Instance {
    /// The world at its seed state with its own rules and SLAs.
    pub fn for_world(world: &World) -> Self {
        Instance {
            registry: world.registry_arc(),
            state: world.seed.clone(),
            rules: world.rules.clone(),
            slas: world.slas.clone(),
            acl: world.acl.clone(),
        }
    }

    /// An episode's world: its own rules only, no SLAs, the world's ACL.
    pub fn for_episode(world: &World, episode: &Episode, state: StateSnapshot) -> Self {
        Instance {
            registry: world.registry_arc(),
            state,
            rules: episode.rules.clone(),
            slas: Vec::new(),
            acl: world.acl.clone(),
        }
    }
}

/// One query. `filter` is condition source text evaluated per row.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_by: Option<String>,
}

impl Query {
    pub fn table(table: &str) -> Self {
        Query { table: table.into(), ..Query::default() }
    }

    pub fn filter(mut self, filter: &str) -> Self {
        self.filter = Some(filter.into());
        self
    }

    pub fn fields(mut self, fields: &[&str]) -> Self {
        self.fields = Some(fields.iter().map(|f| f.to_string()).collect());
        self
    }

    pub fn limit(mut self, limit: usize) -> Self {
        self.limit = Some(limit);
        self
    }

    pub fn order_by(mut self, field: &str) -> Self {
        self.order_by = Some(field.into());
        self
    }
}

pub fn operation_name(op: Operation) -> &'static str {
    match op {
        Operation::Insert => "insert",
        Operation::Update => "update",
    }
}

pub fn phase_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Before => "before",
        Phase::After => "after",
        Phase::Async => "async",
    }
}

pub fn rule_row(r: &RuleDef) -> FieldMap {
    let mut row = FieldMap::new();
    row.insert("id".into(), Value::text(&r.id));
    row.insert("table".into(), Value::text(&r.table));
    row.insert("operation".into(), Value::text(operation_name(r.operation)));
    row.insert("phase".into(), Value::text(phase_name(r.phase)));
    row.insert("order".into(), Value::Int(r.order as i64));
    row.insert("active".into(), Value::Bool(r.active));
    row.insert("source".into(), Value::text(&r.source));
    row
}

/// Inverse of [`rule_row`]; `None` for malformed rows.
pub fn rule_from_row(row: &FieldMap) -> Option<RuleDef> {
    let text = |k: &str| row.get(k).and_then(Value::as_text);
    let operation = match text("operation")? {
        "insert" => Operation::Insert,
        "update" => Operation::Update,
        _ => return None,
    };
    let phase = match text("phase")? {
        "before" => Phase::Before,
        "after" => Phase::After,
        "async" => Phase::Async,
        _ => return None,
    };
    let order = u32::try_from(row.get("order")?.as_int()?).ok()?;
    let mut def = RuleDef::new(text("id")?, text("table")?, operation, phase, order, text("source")?);
    def.active = !matches!(row.get("active"), Some(Value::Bool(false)));
    Some(def)
}

pub fn sla_row(s: &SlaDefinition) -> FieldMap {
    let mut row = FieldMap::new();
    row.insert("id".into(), Value::text(&s.id));
    row.insert("table".into(), Value::text(&s.table));
    row.insert("start_condition".into(), Value::text(&s.start_condition));
    row.insert("duration_tag".into(), Value::text(&s.duration_tag));
    row
}

pub fn sla_from_row(row: &FieldMap) -> Option<SlaDefinition> {
    let text = |k: &str| row.get(k).and_then(Value::as_text).map(String::from);
    Some(SlaDefinition {
        id: text("id")?,
        table: text("table")?,
        start_condition: text("start_condition")?,
        duration_tag: text("duration_tag")?,
    })
}

fn base_rows(inst: &Instance, table: &str) -> Result<Vec<FieldMap>, QueryError> {
    let deny = || QueryError::AccessDenied { table: table.into() };
    match table {
        RULES_TABLE => {
            if !inst.acl.rules_readable {
                return Err(deny());
            }
            let mut rules: Vec<&RuleDef> = inst.rules.iter().collect();
            rules.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
            Ok(rules.into_iter().map(rule_row).collect())
        }
        SLA_DEF_TABLE => {
            if !inst.acl.rules_readable {
                return Err(deny());
            }
            let mut slas: Vec<&SlaDefinition> = inst.slas.iter().collect();
            slas.sort_by(|a, b| a.id.cmp(&b.id));
            Ok(slas.into_iter().map(sla_row).collect())
        }
        CHOICE_TABLE => {
            let mut rows = Vec::new();
            for t in inst.registry.tables() {
                for f in t.all_fields().filter(|f| !f.choices.is_empty()) {
                    for c in &f.choices {
                        let mut row = FieldMap::new();
                        row.insert("table".into(), Value::text(&t.name));
                        row.insert("field".into(), Value::text(&f.name));
                        row.insert("value".into(), Value::Int(c.value));
                        row.insert("label".into(), Value::text(&c.label));
                        rows.push(row);
                    }
                }
            }
            Ok(rows)
        }
        _ => {
            if inst.registry.table(table).is_none() {
                return Err(QueryError::UnknownTable(table.into()));
            }
            if !inst.acl.table_readable(table) {
                return Err(deny());
            }
            let mut rows: Vec<FieldMap> =
                inst.state.tables.get(table).map(|rs| rs.iter().map(|r| r.values.clone()).collect()).unwrap_or_default();
            rows.sort_by(|a, b| a.get("id").cmp(&b.get("id")));
            Ok(rows)
        }
    }
}

/// Run one query. Rows come in the table's natural order (rules by phase and
/// order, records by id) unless `order_by` names a field; ties keep that order.
pub fn world_query(inst: &Instance, q: &Query) -> Result<Vec<FieldMap>, QueryError> {
    let filter = q.filter.as_deref().map(parse_condition).transpose()?;
    let mut rows = base_rows(inst, &q.table)?;
    if let Some(cond) = &filter {
        let empty = FieldMap::new();
        rows.retain(|r| eval_filter(cond, r, &empty));
    }
    if let Some(key) = &q.order_by {
        rows.sort_by(|a, b| match (a.get(key), b.get(key)) {
            (Some(x), Some(y)) => x.cmp(y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        });
    }
    if let Some(n) = q.limit {
        rows.truncate(n);
    }
    if let Some(fields) = &q.fields {
        for r in &mut rows {
            r.retain(|k, _| fields.contains(k));
        }
    }
    Ok(rows)
}
