//! Name resolution and type checking against a schema registry.

use std::collections::BTreeSet;

use super::ast::*;
use super::DslError;
use crate::schema::{FieldDef, FieldKind, SchemaRegistry};
use crate::value::Value;

/// Comparable representation class of a field.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Class {
    Text,
    Int,
    Bool,
    Ref(String),
}

fn class(def: &FieldDef) -> Class {
    match def.kind {
        FieldKind::Text => Class::Text,
        FieldKind::Integer | FieldKind::Choice | FieldKind::Datetime => Class::Int,
        FieldKind::Boolean => Class::Bool,
        FieldKind::Reference => Class::Ref(def.ref_table.clone().unwrap_or_default()),
    }
}

fn field<'a>(reg: &'a SchemaRegistry, table: &str, name: &str) -> Result<&'a FieldDef, DslError> {
    let schema = reg.table(table).ok_or_else(|| DslError::UnknownTable(table.into()))?;
    schema
        .field(name)
        .ok_or_else(|| DslError::UnknownField { table: table.into(), field: name.into() })
}

fn literal_fits(def: &FieldDef, table: &str, v: &Value) -> Result<(), DslError> {
    if def.kind.accepts(v) {
        Ok(())
    } else {
        Err(DslError::TypeError(format!(
            "literal {v} does not fit `{table}.{}` of kind {}",
            def.name,
            def.kind.as_str()
        )))
    }
}

/// Check a condition evaluated on records of `table`. `cur_table` is the
/// triggering table when the condition is a SET_ON filter.
pub fn check_condition(
    reg: &SchemaRegistry,
    cond: &Condition,
    table: &str,
    cur_table: Option<&str>,
) -> Result<(), DslError> {
    reg.require(table).map_err(|_| DslError::UnknownTable(table.into()))?;
    for c in cond.clauses() {
        match c {
            Clause::True => {}
            Clause::Cmp { field: f, op, rhs } => {
                let def = field(reg, table, f)?;
                if op.is_ordering() && class(def) != Class::Int {
                    return Err(DslError::TypeError(format!(
                        "`{}` cannot order `{table}.{f}` of kind {}",
                        op.symbol(),
                        def.kind.as_str()
                    )));
                }
                match rhs {
                    Operand::Lit(v) => literal_fits(def, table, v)?,
                    Operand::Cur(g) => {
                        let Some(ct) = cur_table else {
                            return Err(DslError::TypeError("`cur.` operands are only allowed in SET_ON filters".into()));
                        };
                        let other = field(reg, ct, g)?;
                        if class(def) != class(other) {
                            return Err(DslError::TypeError(format!(
                                "cannot compare `{table}.{f}` with `cur.{g}`"
                            )));
                        }
                    }
                }
            }
            Clause::In { field: f, list } => {
                let def = field(reg, table, f)?;
                for v in list {
                    literal_fits(def, table, v)?;
                }
            }
            Clause::Changes(f) | Clause::ChangesTo(f, _) => {
                if cur_table.is_some() {
                    return Err(DslError::TypeError("changes() is not allowed in SET_ON filters".into()));
                }
                let def = field(reg, table, f)?;
                if let Clause::ChangesTo(_, v) = c {
                    literal_fits(def, table, v)?;
                }
            }
        }
    }
    Ok(())
}

fn check_assigns(reg: &SchemaRegistry, assigns: &[Assign], target: &str, trigger: &str) -> Result<(), DslError> {
    let mut seen = BTreeSet::new();
    for a in assigns {
        if !seen.insert(a.field.as_str()) {
            return Err(DslError::TypeError(format!("`{target}.{}` assigned twice in one statement", a.field)));
        }
        let def = field(reg, target, &a.field)?;
        match &a.expr {
            Expr::Lit(v) => literal_fits(def, target, v)?,
            Expr::Cur(g) => {
                let src = field(reg, trigger, g)?;
                if class(def) != class(src) {
                    return Err(DslError::TypeError(format!(
                        "cannot assign `cur.{g}` ({}) to `{target}.{}` ({})",
                        src.kind.as_str(),
                        a.field,
                        def.kind.as_str()
                    )));
                }
            }
            Expr::CurPlus(g, _) => {
                let src = field(reg, trigger, g)?;
                if def.kind != FieldKind::Integer || src.kind != FieldKind::Integer {
                    return Err(DslError::TypeError(format!(
                        "`cur.{g} + n` requires integer fields on both sides of `{target}.{}`",
                        a.field
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn check_script(reg: &SchemaRegistry, script: &Script, trigger: &str) -> Result<(), DslError> {
    reg.require(trigger).map_err(|_| DslError::UnknownTable(trigger.into()))?;
    for s in &script.stmts {
        match s {
            Stmt::Set(a) => check_assigns(reg, std::slice::from_ref(a), trigger, trigger)?,
            Stmt::SetOn { table, filter, assigns } => {
                check_condition(reg, filter, table, Some(trigger))?;
                check_assigns(reg, assigns, table, trigger)?;
            }
            Stmt::Insert { table, assigns } => {
                reg.require(table).map_err(|_| DslError::UnknownTable(table.clone()))?;
                check_assigns(reg, assigns, table, trigger)?;
            }
        }
    }
    Ok(())
}

pub fn check_program(reg: &SchemaRegistry, prog: &Program, trigger: &str) -> Result<(), DslError> {
    check_condition(reg, &prog.condition, trigger, None)?;
    check_script(reg, &prog.script, trigger)
}

/// Tables named anywhere in the program, trigger table excluded.
pub fn referenced_tables(prog: &Program) -> Vec<&str> {
    let mut v: Vec<&str> = prog.script.stmts.iter().filter_map(Stmt::target_table).collect();
    v.sort_unstable();
    v.dedup();
    v
}
