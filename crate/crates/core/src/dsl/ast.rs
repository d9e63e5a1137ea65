//! Syntax trees for rule programs.

use serde::{Deserialize, Serialize};

use crate::value::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn is_ordering(self) -> bool {
        !matches!(self, CmpOp::Eq | CmpOp::Ne)
    }
}

/// Right-hand side of a comparison.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Lit(Value),
    /// `cur.field`: a field of the triggering record (filters only).
    Cur(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Clause {
    True,
    Cmp { field: String, op: CmpOp, rhs: Operand },
    In { field: String, list: Vec<Value> },
    Changes(String),
    ChangesTo(String, Value),
}

impl Clause {
    pub fn field(&self) -> Option<&str> {
        match self {
            Clause::True => None,
            Clause::Cmp { field, .. } | Clause::In { field, .. } | Clause::Changes(field) | Clause::ChangesTo(field, _) => {
                Some(field)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Clause(Clause),
    And(Box<Condition>, Box<Condition>),
    Or(Box<Condition>, Box<Condition>),
}

impl Condition {
    pub fn always() -> Self {
        Condition::Clause(Clause::True)
    }

    pub fn and(a: Condition, b: Condition) -> Self {
        Condition::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Condition, b: Condition) -> Self {
        Condition::Or(Box::new(a), Box::new(b))
    }

    /// All clauses, left to right.
    pub fn clauses(&self) -> Vec<&Clause> {
        let mut out = Vec::new();
        self.walk(&mut |c| out.push(c));
        out
    }

    fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Clause)) {
        match self {
            Condition::Clause(c) => f(c),
            Condition::And(a, b) | Condition::Or(a, b) => {
                a.walk(f);
                b.walk(f);
            }
        }
    }

    pub fn clauses_mut(&mut self) -> Vec<&mut Clause> {
        let mut out = Vec::new();
        fn go<'a>(c: &'a mut Condition, out: &mut Vec<&'a mut Clause>) {
            match c {
                Condition::Clause(c) => out.push(c),
                Condition::And(a, b) | Condition::Or(a, b) => {
                    go(a, out);
                    go(b, out);
                }
            }
        }
        go(self, &mut out);
        out
    }

    /// Clauses that must hold whenever the condition holds (top-level conjuncts).
    pub fn conjuncts(&self) -> Vec<&Clause> {
        match self {
            Condition::Clause(c) => vec![c],
            Condition::And(a, b) => {
                let mut v = a.conjuncts();
                v.extend(b.conjuncts());
                v
            }
            Condition::Or(..) => Vec::new(),
        }
    }

    /// Disjunctive normal form as a list of conjunctions.
    pub fn dnf(&self) -> Vec<Vec<&Clause>> {
        match self {
            Condition::Clause(c) => vec![vec![c]],
            Condition::Or(a, b) => {
                let mut v = a.dnf();
                v.extend(b.dnf());
                v
            }
            Condition::And(a, b) => {
                let (l, r) = (a.dnf(), b.dnf());
                let mut out = Vec::with_capacity(l.len() * r.len());
                for x in &l {
                    for y in &r {
                        let mut c = x.clone();
                        c.extend(y.iter().copied());
                        out.push(c);
                    }
                }
                out
            }
        }
    }

    /// Fields read from the record the condition is evaluated on.
    pub fn fields(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.clauses().into_iter().filter_map(Clause::field).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expr {
    Lit(Value),
    Cur(String),
    /// `cur.field + n`, integer fields only.
    CurPlus(String, i64),
}

impl Expr {
    pub fn cur_field(&self) -> Option<&str> {
        match self {
            Expr::Lit(_) => None,
            Expr::Cur(f) | Expr::CurPlus(f, _) => Some(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assign {
    pub field: String,
    pub expr: Expr,
}

impl Assign {
    pub fn new(field: impl Into<String>, expr: Expr) -> Self {
        Assign { field: field.into(), expr }
    }

    pub fn lit(field: impl Into<String>, v: impl Into<Value>) -> Self {
        Assign::new(field, Expr::Lit(v.into()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stmt {
    /// Assign on the triggering record.
    Set(Assign),
    /// Assign on every record of `table` matching `filter`.
    SetOn { table: String, filter: Condition, assigns: Vec<Assign> },
    /// Create a record of `table`.
    Insert { table: String, assigns: Vec<Assign> },
}

impl Stmt {
    pub fn assigns(&self) -> &[Assign] {
        match self {
            Stmt::Set(a) => std::slice::from_ref(a),
            Stmt::SetOn { assigns, .. } | Stmt::Insert { assigns, .. } => assigns,
        }
    }

    pub fn assigns_mut(&mut self) -> &mut [Assign] {
        match self {
            Stmt::Set(a) => std::slice::from_mut(a),
            Stmt::SetOn { assigns, .. } | Stmt::Insert { assigns, .. } => assigns,
        }
    }

    /// Table written by this statement, `None` meaning the trigger table.
    pub fn target_table(&self) -> Option<&str> {
        match self {
            Stmt::Set(_) => None,
            Stmt::SetOn { table, .. } | Stmt::Insert { table, .. } => Some(table),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Script {
    pub stmts: Vec<Stmt>,
}

/// `WHEN condition DO script`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Program {
    pub condition: Condition,
    pub script: Script,
}
