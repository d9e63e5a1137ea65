//! Script safety lints.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ast::*;
use crate::schema::SchemaRegistry;
use crate::value::Value;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    MetadataWrite { table: String, field: String },
    /// A before-phase rule writes a field its own condition watches.
    SelfRetrigger { field: String },
    /// INSERT into the rule's own trigger table.
    RecursionHazard { table: String },
    /// `cur.field` read without a guarantee that the field is non-empty.
    UnguardedRead { field: String },
    /// Two rules write the same `(table, field)` from sync SET statements.
    ConflictHazard { rule: String, other: String, table: String, field: String },
    /// Before-phase scripts may only contain SET statements.
    BeforePhaseStatement,
    Invalid { message: String },
}

pub struct SafetyContext<'a> {
    pub trigger_table: &'a str,
    pub before_phase: bool,
    /// Trigger condition; its fields are the trigger fields and its
    /// conjuncts count as non-emptiness guards.
    pub condition: Option<&'a Condition>,
}

fn guards_non_empty(c: &Clause) -> Option<&str> {
    let non_empty = |v: &Value| !v.is_empty();
    match c {
        Clause::ChangesTo(f, v) if non_empty(v) => Some(f),
        Clause::Cmp { field, op: CmpOp::Eq, rhs: Operand::Lit(v) } if non_empty(v) => Some(field),
        Clause::Cmp { field, op: CmpOp::Ne, rhs: Operand::Lit(v) } if v.is_empty() => Some(field),
        Clause::In { field, list } if !list.is_empty() && list.iter().all(non_empty) => Some(field),
        _ => None,
    }
}

pub fn check_safety(script: &Script, registry: &SchemaRegistry, ctx: &SafetyContext<'_>) -> Vec<Violation> {
    let mut out = Vec::new();
    let trigger_fields: BTreeSet<&str> = ctx.condition.map(|c| c.fields().into_iter().collect()).unwrap_or_default();
    let mut guaranteed: BTreeSet<String> = ctx
        .condition
        .map(|c| c.conjuncts().into_iter().filter_map(guards_non_empty).map(String::from).collect())
        .unwrap_or_default();
    let schema = registry.table(ctx.trigger_table);
    let is_guaranteed = |f: &str, guaranteed: &BTreeSet<String>| {
        if guaranteed.contains(f) {
            return true;
        }
        match schema.and_then(|s| s.field(f)) {
            Some(def) if def.is_metadata => !ctx.before_phase,
            Some(def) => !def.materialized_default().is_empty(),
            None => false,
        }
    };
    let reads = |e: &Expr, guaranteed: &BTreeSet<String>, out: &mut Vec<Violation>| {
        if let Some(f) = e.cur_field() {
            if !is_guaranteed(f, guaranteed) {
                out.push(Violation::UnguardedRead { field: f.into() });
            }
        }
    };
    for s in &script.stmts {
        let target = s.target_table().unwrap_or(ctx.trigger_table);
        for a in s.assigns() {
            if registry.field(target, &a.field).is_some_and(|d| d.is_metadata) {
                out.push(Violation::MetadataWrite { table: target.into(), field: a.field.clone() });
            }
            reads(&a.expr, &guaranteed, &mut out);
        }
        match s {
            Stmt::Set(a) => {
                if ctx.before_phase && trigger_fields.contains(a.field.as_str()) {
                    out.push(Violation::SelfRetrigger { field: a.field.clone() });
                }
                let sets_non_empty = match &a.expr {
                    Expr::Lit(v) => !v.is_empty(),
                    Expr::CurPlus(..) => true,
                    Expr::Cur(g) => is_guaranteed(g, &guaranteed),
                };
                if sets_non_empty {
                    guaranteed.insert(a.field.clone());
                }
            }
            Stmt::SetOn { filter, .. } => {
                for c in filter.clauses() {
                    if let Clause::Cmp { rhs: Operand::Cur(g), .. } = c {
                        reads(&Expr::Cur(g.clone()), &guaranteed, &mut out);
                    }
                }
            }
            Stmt::Insert { table, .. } => {
                if table == ctx.trigger_table {
                    out.push(Violation::RecursionHazard { table: table.clone() });
                }
            }
        }
        if ctx.before_phase && !matches!(s, Stmt::Set(_)) {
            out.push(Violation::BeforePhaseStatement);
        }
    }
    out.sort();
    out.dedup();
    out
}
