//! Static write-set extraction.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ast::{Script, Stmt};
use crate::schema::SchemaRegistry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Multiplicity {
    One,
    Many,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WriteOp {
    pub table: String,
    pub field: String,
    pub multiplicity: Multiplicity,
    pub creation: bool,
}

impl WriteOp {
    pub fn key(&self) -> (&str, &str) {
        (&self.table, &self.field)
    }
}

/// Every `(table, field)` the script can write. INSERT statements contribute
/// their supplied fields plus each content field whose materialized default is
/// non-empty. The registry is consulted for those defaults only.
pub fn extract_write_set(script: &Script, registry: &SchemaRegistry, trigger_table: &str) -> BTreeSet<WriteOp> {
    let mut out = BTreeSet::new();
    for s in &script.stmts {
        match s {
            Stmt::Set(a) => {
                out.insert(WriteOp {
                    table: trigger_table.into(),
                    field: a.field.clone(),
                    multiplicity: Multiplicity::One,
                    creation: false,
                });
            }
            Stmt::SetOn { table, assigns, .. } => {
                for a in assigns {
                    out.insert(WriteOp {
                        table: table.clone(),
                        field: a.field.clone(),
                        multiplicity: Multiplicity::Many,
                        creation: false,
                    });
                }
            }
            Stmt::Insert { table, assigns } => {
                let op = |field: &str| WriteOp {
                    table: table.clone(),
                    field: field.into(),
                    multiplicity: Multiplicity::One,
                    creation: true,
                };
                for a in assigns {
                    out.insert(op(&a.field));
                }
                if let Some(schema) = registry.table(table) {
                    for def in schema.fields() {
                        if !def.materialized_default().is_empty() {
                            out.insert(op(&def.name));
                        }
                    }
                }
            }
        }
    }
    out
}

/// `(table, field)` pairs of a write set.
pub fn write_keys(ops: &BTreeSet<WriteOp>) -> BTreeSet<(String, String)> {
    ops.iter().map(|o| (o.table.clone(), o.field.clone())).collect()
}
