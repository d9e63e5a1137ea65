//! Canonical source form of rule programs.

use std::fmt::Write;

use super::ast::*;
use crate::value::Value;

pub fn literal(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Int(i) => i.to_string(),
        Value::Text(s) => {
            let mut out = String::with_capacity(s.len() + 2);
            out.push('"');
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    c => out.push(c),
                }
            }
            out.push('"');
            out
        }
    }
}

fn clause(c: &Clause) -> String {
    match c {
        Clause::True => "TRUE".into(),
        Clause::Cmp { field, op, rhs } => {
            let r = match rhs {
                Operand::Lit(v) => literal(v),
                Operand::Cur(f) => format!("cur.{f}"),
            };
            format!("{field} {} {r}", op.symbol())
        }
        Clause::In { field, list } => {
            let items: Vec<String> = list.iter().map(literal).collect();
            format!("{field} in [{}]", items.join(", "))
        }
        Clause::Changes(f) => format!("changes({f})"),
        Clause::ChangesTo(f, v) => format!("changes_to({f}, {})", literal(v)),
    }
}

/// Print with the minimal parentheses that reproduce the same tree.
pub fn condition(c: &Condition) -> String {
    match c {
        Condition::Clause(cl) => clause(cl),
        Condition::Or(a, b) => {
            let r = match **b {
                Condition::Or(..) => format!("({})", condition(b)),
                _ => condition(b),
            };
            format!("{} OR {r}", condition(a))
        }
        Condition::And(a, b) => {
            let l = match **a {
                Condition::Or(..) => format!("({})", condition(a)),
                _ => condition(a),
            };
            let r = match **b {
                Condition::Clause(_) => condition(b),
                _ => format!("({})", condition(b)),
            };
            format!("{l} AND {r}")
        }
    }
}

pub fn expr(e: &Expr) -> String {
    match e {
        Expr::Lit(v) => literal(v),
        Expr::Cur(f) => format!("cur.{f}"),
        Expr::CurPlus(f, n) => format!("cur.{f} + {n}"),
    }
}

fn assigns(list: &[Assign]) -> String {
    list.iter().map(|a| format!("{} = {}", a.field, expr(&a.expr))).collect::<Vec<_>>().join(", ")
}

pub fn stmt(s: &Stmt) -> String {
    match s {
        Stmt::Set(a) => format!("SET {} = {}", a.field, expr(&a.expr)),
        Stmt::SetOn { table, filter, assigns: list } => {
            format!("SET_ON {table} WHERE {}: {}", condition(filter), assigns(list))
        }
        Stmt::Insert { table, assigns: list } if list.is_empty() => format!("INSERT {table} {{}}"),
        Stmt::Insert { table, assigns: list } => format!("INSERT {table} {{ {} }}", assigns(list)),
    }
}

pub fn program(p: &Program) -> String {
    let mut out = format!("WHEN {} DO", condition(&p.condition));
    for (i, s) in p.script.stmts.iter().enumerate() {
        let sep = if i == 0 { " " } else { "; " };
        let _ = write!(out, "{sep}{}", stmt(s));
    }
    out
}
