//! The rule language: `WHEN condition DO statements`.
//!
//! Conditions are clauses joined by `AND`/`OR` (AND binds tighter, both are
//! left-associative). Statements are `SET field = expr`,
//! `SET_ON table WHERE filter: field = expr, ...` and
//! `INSERT table { field = expr, ... }`.

pub mod ast;
pub mod check;
pub mod eval;
pub mod lexer;
pub mod parser;
pub mod print;
pub mod safety;
pub mod writeset;

use thiserror::Error;

pub use ast::{Assign, Clause, CmpOp, Condition, Expr, Operand, Program, Script, Stmt};
pub use eval::{eval_condition, eval_filter, exec_script, exec_stmt, ExecError, PendingWrite, Trigger};
pub use parser::{parse_condition, parse_program};
pub use safety::{check_safety, SafetyContext, Violation};
pub use writeset::{extract_write_set, Multiplicity, WriteOp};

use crate::schema::SchemaRegistry;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at {line}:{col}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DslError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("unknown field `{table}.{field}`")]
    UnknownField { table: String, field: String },
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("type error: {0}")]
    TypeError(String),
}

/// Parse and type-check a rule triggered on `trigger_table`.
pub fn parse(src: &str, registry: &SchemaRegistry, trigger_table: &str) -> Result<Program, DslError> {
    let prog = parse_program(src)?;
    check::check_program(registry, &prog, trigger_table)?;
    Ok(prog)
}
