//! Condition evaluation and script execution into pending writes.

use std::cmp::Ordering;

use thiserror::Error;

use super::ast::*;
use crate::schema::{self, FieldKind, SchemaError, SchemaRegistry};
use crate::store::{RecordId, Store};
use crate::value::{FieldMap, Value};

const NULL: Value = Value::Null;

fn get<'a>(m: &'a FieldMap, f: &str) -> &'a Value {
    m.get(f).unwrap_or(&NULL)
}

fn compare(a: &Value, op: CmpOp, b: &Value) -> bool {
    match op {
        CmpOp::Eq => a == b,
        CmpOp::Ne => a != b,
        _ => {
            let (Value::Int(x), Value::Int(y)) = (a, b) else { return false };
            let ord = x.cmp(y);
            match op {
                CmpOp::Lt => ord == Ordering::Less,
                CmpOp::Le => ord != Ordering::Greater,
                CmpOp::Gt => ord == Ordering::Greater,
                _ => ord != Ordering::Less,
            }
        }
    }
}

fn changed(f: &str, current: &FieldMap, previous: Option<&FieldMap>) -> bool {
    match previous {
        None => !get(current, f).is_empty(),
        Some(prev) => get(prev, f) != get(current, f),
    }
}

fn eval(cond: &Condition, rec: &FieldMap, prev: Option<&FieldMap>, cur: &FieldMap) -> bool {
    match cond {
        Condition::And(a, b) => eval(a, rec, prev, cur) && eval(b, rec, prev, cur),
        Condition::Or(a, b) => eval(a, rec, prev, cur) || eval(b, rec, prev, cur),
        Condition::Clause(c) => match c {
            Clause::True => true,
            Clause::Cmp { field, op, rhs } => {
                let r = match rhs {
                    Operand::Lit(v) => v,
                    Operand::Cur(g) => get(cur, g),
                };
                compare(get(rec, field), *op, r)
            }
            Clause::In { field, list } => list.contains(get(rec, field)),
            Clause::Changes(f) => changed(f, rec, prev),
            Clause::ChangesTo(f, v) => changed(f, rec, prev) && get(rec, f) == v,
        },
    }
}

/// Evaluate a trigger condition. `previous` is `None` for insert events.
pub fn eval_condition(cond: &Condition, current: &FieldMap, previous: Option<&FieldMap>) -> bool {
    eval(cond, current, previous, current)
}

/// Evaluate a SET_ON filter on `candidate`, with `cur` the triggering record.
pub fn eval_filter(cond: &Condition, candidate: &FieldMap, cur: &FieldMap) -> bool {
    eval(cond, candidate, Some(candidate), cur)
}

pub fn eval_expr(e: &Expr, cur: &FieldMap) -> Value {
    match e {
        Expr::Lit(v) => v.clone(),
        Expr::Cur(f) => get(cur, f).clone(),
        Expr::CurPlus(f, n) => Value::Int(get(cur, f).as_int().unwrap_or(0).saturating_add(*n)),
    }
}

/// A write produced by a script but not yet committed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PendingWrite {
    Update {
        table: String,
        record_id: RecordId,
        assignments: FieldMap,
        /// Match index for SET_ON targets.
        fanout: Option<u32>,
    },
    Insert {
        table: String,
        /// Complete content with defaults applied.
        values: FieldMap,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("insert into `{table}` sets `{field}` to missing `{target}` record `{id}`")]
    ReferentialViolation { table: String, field: String, target: String, id: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// The triggering record a script runs against.
pub struct Trigger<'a> {
    pub table: &'a str,
    pub record_id: &'a str,
    pub values: &'a FieldMap,
}

/// Pending writes of one statement against the current store contents.
pub fn exec_stmt(
    stmt: &Stmt,
    trigger: &Trigger<'_>,
    store: &Store,
    registry: &SchemaRegistry,
) -> Result<Vec<PendingWrite>, ExecError> {
    let cur = trigger.values;
    let assignments = |list: &[Assign]| -> FieldMap {
        list.iter().map(|a| (a.field.clone(), eval_expr(&a.expr, cur))).collect()
    };
    match stmt {
        Stmt::Set(a) => Ok(vec![PendingWrite::Update {
            table: trigger.table.to_string(),
            record_id: trigger.record_id.to_string(),
            assignments: assignments(std::slice::from_ref(a)),
            fanout: None,
        }]),
        Stmt::SetOn { table, filter, assigns } => {
            let values = assignments(assigns);
            Ok(store
                .records(table)
                .filter(|(_, rec)| eval_filter(filter, rec, cur))
                .enumerate()
                .map(|(i, (id, _))| PendingWrite::Update {
                    table: table.clone(),
                    record_id: id.clone(),
                    assignments: values.clone(),
                    fanout: Some(i as u32),
                })
                .collect())
        }
        Stmt::Insert { table, assigns } => {
            let schema = registry.require(table)?;
            let values = schema::apply_defaults(schema, &assignments(assigns))?;
            for def in schema.fields() {
                if def.kind != FieldKind::Reference {
                    continue;
                }
                if let Value::Text(id) = &values[&def.name] {
                    let target = def.ref_table.as_deref().unwrap_or_default();
                    let exists = store.get(target, id).is_some()
                        || (target == trigger.table && id == trigger.record_id);
                    if !exists {
                        return Err(ExecError::ReferentialViolation {
                            table: table.clone(),
                            field: def.name.clone(),
                            target: target.into(),
                            id: id.clone(),
                        });
                    }
                }
            }
            Ok(vec![PendingWrite::Insert { table: table.clone(), values }])
        }
    }
}

/// Pending writes of a whole script, every statement reading the same state.
pub fn exec_script(
    script: &Script,
    trigger: &Trigger<'_>,
    store: &Store,
    registry: &SchemaRegistry,
) -> Result<Vec<PendingWrite>, ExecError> {
    let mut out = Vec::new();
    for s in &script.stmts {
        out.extend(exec_stmt(s, trigger, store, registry)?);
    }
    Ok(out)
}
