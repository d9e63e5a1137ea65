//! Weighted sampling of candidate cascades.
//!
//! Every `(table, field)` key has at most one writer inside a cascade (the
//! action or one statement), except for deliberate conflict pairs. Each child
//! rule is guarded on a value only its parent writes, so every sampled rule
//! fires exactly where the topology says it should.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::dsl::ast::{Assign, Clause, CmpOp, Condition, Expr, Operand, Program, Script, Stmt};
use crate::dsl::{extract_write_set, print};
use crate::engine::{Action, Operation, Phase, RuleDef};
use crate::schema::{apply_defaults, FieldDef, FieldKind, SchemaRegistry, FIELD_ID};
use crate::value::{FieldMap, Value};
use crate::world::{ConflictPair, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Every rule fires from the action on the action's table.
    Flat,
    /// Each rule fires on a fresh table written by the previous rule.
    Linear,
    /// Each rule fires on a table some earlier rule (or the action) wrote.
    Complete,
}

impl Topology {
    pub const ALL: [Topology; 3] = [Topology::Flat, Topology::Linear, Topology::Complete];

    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Flat => "flat",
            Topology::Linear => "linear",
            Topology::Complete => "complete",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Topology::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown topology `{s}` (expected flat, linear or complete)"))
    }
}

/// Attribute weight tables. The defaults are our own choice and are not
/// calibrated against any published distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub min_length: usize,
    pub max_length: usize,
    /// Probability that the action is an insert rather than an update.
    pub insert_action: f64,
    /// Link statement weights: INSERT, SET_ON, own-table SET (complete only).
    pub link_weights: [f64; 3],
    /// Extra statement count weights for 0, 1 and 2 extras.
    pub extra_counts: [f64; 3],
    /// Extra statement kind weights: SET, SET_ON, INSERT.
    pub extra_kinds: [f64; 3],
    /// Extra condition clause weights: none, equality, membership, ordering.
    pub clause_weights: [f64; 4],
    pub before_phase: f64,
    pub async_phase: f64,
    /// Probability that an integer SET is written as `cur.f + 1`.
    pub counter_expr: f64,
    /// Probability of a conflict pair in flat and complete cascades.
    pub conflict_pair: f64,
    pub support_per_set_on: usize,
    /// Upper bound on how many times any one rule may fire.
    pub multiplicity_cap: u32,
    pub followups: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            min_length: 3,
            max_length: 7,
            insert_action: 0.3,
            link_weights: [0.4, 0.4, 0.2],
            extra_counts: [0.4, 0.4, 0.2],
            extra_kinds: [0.4, 0.35, 0.25],
            clause_weights: [0.4, 0.25, 0.2, 0.15],
            before_phase: 0.3,
            async_phase: 0.15,
            counter_expr: 0.3,
            conflict_pair: 0.35,
            support_per_set_on: 3,
            multiplicity_cap: 9,
            followups: 4,
        }
    }
}

/// A record loaded without rules before the action runs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportRecord {
    pub table: String,
    pub values: FieldMap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeSpec {
    pub topology: Topology,
    pub length: usize,
    pub action: Action,
    pub rules: Vec<RuleDef>,
    pub support: Vec<SupportRecord>,
    /// Rule pairs allowed to write the same field.
    pub conflict_pairs: Vec<[String; 2]>,
    /// Later actions for multi-step rollouts.
    pub followups: Vec<Action>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Writer {
    Action,
    Stmt(usize, usize),
}

#[derive(Clone, Debug)]
struct Trig {
    table: String,
    op: Operation,
    guard: Clause,
    by: Writer,
    /// Trigger-record state right after the triggering write.
    state: FieldMap,
    mult: u32,
    depth: u32,
}

#[derive(Clone, Debug)]
struct Slot {
    trig: Trig,
    stmts: Vec<Stmt>,
    has_children: bool,
    phase: Phase,
    extras: Vec<Clause>,
    pair: bool,
}

struct Sampler<'a> {
    reg: &'a SchemaRegistry,
    cfg: &'a SamplerConfig,
    rng: ChaCha8Rng,
    writers: BTreeMap<(String, String), Writer>,
    support: Vec<SupportRecord>,
    tokens: usize,
    action_table: String,
    slots: Vec<Slot>,
}

fn writable(def: &FieldDef) -> bool {
    def.name != "u_name" && matches!(def.kind, FieldKind::Text | FieldKind::Integer | FieldKind::Boolean | FieldKind::Choice)
}

fn key(t: &str, f: &str) -> (String, String) {
    (t.to_string(), f.to_string())
}

impl<'a> Sampler<'a> {
    fn token(&mut self) -> String {
        self.tokens += 1;
        format!("cb-{:02}", self.tokens)
    }

    fn weighted(&mut self, w: &[f64]) -> usize {
        match WeightedIndex::new(w) {
            Ok(d) => d.sample(&mut self.rng),
            Err(_) => 0,
        }
    }

    fn free_fields(&self, table: &str) -> Vec<&'a FieldDef> {
        self.reg
            .table(table)
            .map(|s| s.fields().iter().filter(|d| writable(d) && !self.writers.contains_key(&key(table, &d.name))).collect())
            .unwrap_or_default()
    }

    /// A literal of `def`'s kind different from `avoid`.
    fn fresh_value(&mut self, def: &FieldDef, avoid: &Value) -> Option<Value> {
        match def.kind {
            FieldKind::Choice => {
                let opts: Vec<i64> = def.choices.iter().map(|c| c.value).filter(|v| Some(*v) != avoid.as_int()).collect();
                opts.choose(&mut self.rng).map(|v| Value::Int(*v))
            }
            FieldKind::Boolean => Some(Value::Bool(avoid != &Value::Bool(true))),
            FieldKind::Integer => loop {
                let v = self.rng.gen_range(1..=99);
                if Some(v) != avoid.as_int() {
                    break Some(Value::Int(v));
                }
            },
            FieldKind::Text => {
                let t = self.token();
                Some(Value::text(format!("{t} {}", def.name.trim_start_matches("u_"))))
            }
            _ => None,
        }
    }

    fn defaults(&self, table: &str) -> FieldMap {
        let schema = self.reg.table(table).expect("sampled tables are registered");
        apply_defaults(schema, &FieldMap::new()).expect("empty payload always applies")
    }

    fn take(&mut self, keys: impl IntoIterator<Item = (String, String)>, w: Writer) {
        for k in keys {
            self.writers.insert(k, w.clone());
        }
    }

    fn add_support(&mut self, table: &str, token: &str) {
        for _ in 0..self.cfg.support_per_set_on {
            let mut values = FieldMap::new();
            values.insert("u_name".into(), Value::text(token));
            self.support.push(SupportRecord { table: table.into(), values });
        }
    }

    /// Build an INSERT into `target` from `slot`. Returns the statement, the
    /// state of the inserted record, and the token it carries.
    fn insert_stmt(&mut self, slot: usize, target: &str) -> Option<(Stmt, FieldMap, String)> {
        let trigger_table = self.slots[slot].trig.table.clone();
        if target == trigger_table || target == self.action_table {
            return None;
        }
        let token = self.token();
        let mut assigns = vec![Assign::lit("u_name", Value::text(token.clone()))];
        let schema = self.reg.table(target)?;
        if let Some(r) = schema.fields().iter().find(|d| d.kind == FieldKind::Reference && d.ref_table.as_deref() == Some(&trigger_table)) {
            assigns.push(Assign::new(r.name.clone(), Expr::Cur(FIELD_ID.into())));
        }
        let free = self.free_fields(target);
        if let Some(def) = free.choose(&mut self.rng).copied() {
            if self.rng.gen_bool(0.5) {
                let avoid = def.materialized_default();
                if let Some(v) = self.fresh_value(def, &avoid) {
                    assigns.push(Assign::lit(def.name.clone(), v));
                }
            }
        }
        let stmt = Stmt::Insert { table: target.into(), assigns };
        let keys: Vec<_> = extract_write_set(&Script { stmts: vec![stmt.clone()] }, self.reg, &trigger_table)
            .into_iter()
            .map(|w| (w.table, w.field))
            .collect();
        if keys.iter().any(|k| self.writers.contains_key(k)) {
            return None;
        }
        let idx = self.slots[slot].stmts.len();
        self.take(keys, Writer::Stmt(slot, idx));
        let mut state = self.defaults(target);
        for a in stmt.assigns() {
            if let Expr::Lit(v) = &a.expr {
                state.insert(a.field.clone(), v.clone());
            }
        }
        Some((stmt, state, token))
    }

    /// Build a SET_ON over fresh support records in `target`.
    fn set_on_stmt(&mut self, slot: usize, target: &str, fields: usize) -> Option<(Stmt, FieldMap, (String, Value))> {
        if target == self.action_table {
            return None;
        }
        let mut free = self.free_fields(target);
        free.shuffle(&mut self.rng);
        let token = self.token();
        let mut state = self.defaults(target);
        state.insert("u_name".into(), Value::text(token.clone()));
        let mut assigns = Vec::new();
        for def in free.into_iter() {
            if assigns.len() == fields {
                break;
            }
            let avoid = state[&def.name].clone();
            if let Some(v) = self.fresh_value(def, &avoid) {
                assigns.push(Assign::lit(def.name.clone(), v));
            }
        }
        let first = assigns.first()?;
        let guard = (first.field.clone(), match &first.expr {
            Expr::Lit(v) => v.clone(),
            _ => unreachable!("support assignments are literals"),
        });
        let idx = self.slots[slot].stmts.len();
        self.take(assigns.iter().map(|a| key(target, &a.field)), Writer::Stmt(slot, idx));
        for a in &assigns {
            if let Expr::Lit(v) = &a.expr {
                state.insert(a.field.clone(), v.clone());
            }
        }
        self.add_support(target, &token);
        let filter = Condition::Clause(Clause::Cmp {
            field: "u_name".into(),
            op: CmpOp::Eq,
            rhs: Operand::Lit(Value::text(token)),
        });
        Some((Stmt::SetOn { table: target.into(), filter, assigns }, state, guard))
    }

    /// A literal SET on the slot's own record, changing the value it had at firing.
    fn own_set_stmt(&mut self, slot: usize, counter_ok: bool) -> Option<(Stmt, (String, Value))> {
        let table = self.slots[slot].trig.table.clone();
        let free = self.free_fields(&table);
        let def = free.choose(&mut self.rng).copied()?;
        let current = self.slots[slot].trig.state.get(&def.name).cloned().unwrap_or(Value::Null);
        let idx = self.slots[slot].stmts.len();
        if counter_ok && def.kind == FieldKind::Integer && self.rng.gen_bool(self.cfg.counter_expr) {
            self.take([key(&table, &def.name)], Writer::Stmt(slot, idx));
            let next = Value::Int(current.as_int().unwrap_or(0) + 1);
            return Some((Stmt::Set(Assign::new(def.name.clone(), Expr::CurPlus(def.name.clone(), 1))), (def.name.clone(), next)));
        }
        let v = self.fresh_value(def, &current)?;
        self.take([key(&table, &def.name)], Writer::Stmt(slot, idx));
        Some((Stmt::Set(Assign::lit(def.name.clone(), v.clone())), (def.name.clone(), v)))
    }

    /// Give `parent` a statement that triggers a new child rule, optionally
    /// restricted to `target`.
    fn link(&mut self, parent: usize, target: Option<&str>, allow_own: bool) -> Option<Trig> {
        let p = self.slots[parent].trig.clone();
        let mut kinds = vec![0usize, 1];
        if allow_own && target.is_none_or(|t| t == p.table) {
            kinds.push(2);
        }
        let mut weights: Vec<f64> = kinds.iter().map(|k| self.cfg.link_weights[*k]).collect();
        while !kinds.is_empty() {
            let i = self.weighted(&weights);
            let kind = kinds.remove(i);
            weights.remove(i);
            let trig = match kind {
                0 => self.link_insert(parent, target, &p),
                1 => self.link_set_on(parent, target, &p),
                _ => self.link_own(parent, &p),
            };
            if trig.is_some() {
                self.slots[parent].has_children = true;
                return trig;
            }
        }
        None
    }

    fn candidate_tables(&mut self, target: Option<&str>) -> Vec<String> {
        let mut v: Vec<String> = match target {
            Some(t) => vec![t.to_string()],
            None => self.reg.table_names().filter(|t| *t != self.action_table).map(String::from).collect(),
        };
        v.shuffle(&mut self.rng);
        v
    }

    fn link_insert(&mut self, parent: usize, target: Option<&str>, p: &Trig) -> Option<Trig> {
        for t in self.candidate_tables(target) {
            if let Some((stmt, state, token)) = self.insert_stmt(parent, &t) {
                let by = Writer::Stmt(parent, self.slots[parent].stmts.len());
                self.slots[parent].stmts.push(stmt);
                return Some(Trig {
                    table: t,
                    op: Operation::Insert,
                    guard: Clause::Cmp { field: "u_name".into(), op: CmpOp::Eq, rhs: Operand::Lit(Value::text(token)) },
                    by,
                    state,
                    mult: p.mult,
                    depth: p.depth + 1,
                });
            }
        }
        None
    }

    fn link_set_on(&mut self, parent: usize, target: Option<&str>, p: &Trig) -> Option<Trig> {
        let mult = p.mult * self.cfg.support_per_set_on as u32;
        if mult > self.cfg.multiplicity_cap {
            return None;
        }
        for t in self.candidate_tables(target) {
            let n = 1 + usize::from(self.rng.gen_bool(0.3));
            if let Some((stmt, state, (f, v))) = self.set_on_stmt(parent, &t, n) {
                let by = Writer::Stmt(parent, self.slots[parent].stmts.len());
                self.slots[parent].stmts.push(stmt);
                return Some(Trig { table: t, op: Operation::Update, guard: Clause::ChangesTo(f, v), by, state, mult, depth: p.depth + 1 });
            }
        }
        None
    }

    fn link_own(&mut self, parent: usize, p: &Trig) -> Option<Trig> {
        let (stmt, (f, v)) = self.own_set_stmt(parent, false)?;
        let by = Writer::Stmt(parent, self.slots[parent].stmts.len());
        self.slots[parent].stmts.push(stmt);
        let mut state = p.state.clone();
        state.insert(f.clone(), v.clone());
        Some(Trig { table: p.table.clone(), op: Operation::Update, guard: Clause::ChangesTo(f, v), by, state, mult: p.mult, depth: p.depth + 1 })
    }

    fn new_slot(&mut self, trig: Trig) -> usize {
        self.slots.push(Slot { trig, stmts: Vec::new(), has_children: false, phase: Phase::After, extras: Vec::new(), pair: false });
        self.slots.len() - 1
    }

    fn extra_statements(&mut self, slot: usize) {
        let n = self.weighted(&self.cfg.extra_counts.clone());
        let mut added = 0;
        for _ in 0..n * 3 {
            if added == n || self.slots[slot].stmts.len() >= 3 {
                break;
            }
            let kind = self.weighted(&self.cfg.extra_kinds.clone());
            let ok = match kind {
                0 => match self.own_set_stmt(slot, true) {
                    Some((stmt, _)) => {
                        self.slots[slot].stmts.push(stmt);
                        true
                    }
                    None => false,
                },
                1 => {
                    let tables = self.candidate_tables(None);
                    let t = tables.first().cloned();
                    match t.and_then(|t| self.set_on_stmt(slot, &t, 1)) {
                        Some((stmt, _, _)) => {
                            self.slots[slot].stmts.push(stmt);
                            true
                        }
                        None => false,
                    }
                }
                _ => {
                    let tables = self.candidate_tables(None);
                    let mut done = false;
                    for t in tables {
                        if let Some((stmt, _, _)) = self.insert_stmt(slot, &t) {
                            self.slots[slot].stmts.push(stmt);
                            done = true;
                            break;
                        }
                    }
                    done
                }
            };
            if ok {
                added += 1;
            }
        }
    }

    /// Extra conjuncts that hold on the trigger record when the rule fires.
    fn extra_clauses(&mut self, slot: usize) -> Vec<Clause> {
        let kind = self.weighted(&self.cfg.clause_weights.clone());
        if kind == 0 {
            return Vec::new();
        }
        let trig = self.slots[slot].trig.clone();
        let schema = self.reg.table(&trig.table).expect("registered");
        let guard_field = trig.guard.field().unwrap_or_default().to_string();
        let stable: Vec<&FieldDef> = schema
            .fields()
            .iter()
            .filter(|d| {
                d.name != guard_field
                    && !matches!(d.kind, FieldKind::Reference | FieldKind::Datetime)
                    && match self.writers.get(&key(&trig.table, &d.name)) {
                        None => true,
                        Some(w) => *w == trig.by,
                    }
                    && trig.state.contains_key(&d.name)
            })
            .collect();
        let ordered: Vec<&FieldDef> = stable.iter().copied().filter(|d| matches!(d.kind, FieldKind::Integer | FieldKind::Choice)).collect();
        let pick = if kind == 3 && !ordered.is_empty() { ordered.choose(&mut self.rng) } else { stable.choose(&mut self.rng) };
        let Some(def) = pick.copied() else { return Vec::new() };
        let v = trig.state[&def.name].clone();
        let clause = match kind {
            1 => Clause::Cmp { field: def.name.clone(), op: CmpOp::Eq, rhs: Operand::Lit(v) },
            2 => {
                let other = self.fresh_value(def, &v).unwrap_or_else(|| v.clone());
                let mut list = vec![v, other];
                list.dedup();
                Clause::In { field: def.name.clone(), list }
            }
            _ if matches!(def.kind, FieldKind::Integer | FieldKind::Choice) => {
                let op = if self.rng.gen_bool(0.5) { CmpOp::Ge } else { CmpOp::Le };
                Clause::Cmp { field: def.name.clone(), op, rhs: Operand::Lit(v) }
            }
            _ => Clause::Cmp { field: def.name.clone(), op: CmpOp::Eq, rhs: Operand::Lit(v) },
        };
        vec![clause]
    }

    /// Before-phase rules only ride on update actions: on an insert they would
    /// overwrite a schema default, turning a schema-determined key rule-caused.
    fn assign_phase(&mut self, slot: usize) {
        let s = &self.slots[slot];
        let before_ok = !s.pair
            && !s.has_children
            && s.trig.by == Writer::Action
            && s.trig.op == Operation::Update
            && !s.stmts.is_empty()
            && s.stmts.iter().all(|st| matches!(st, Stmt::Set(_)));
        let phase = if before_ok && self.rng.gen_bool(self.cfg.before_phase) {
            Phase::Before
        } else if !s.pair && self.rng.gen_bool(self.cfg.async_phase) {
            Phase::Async
        } else {
            Phase::After
        };
        self.slots[slot].phase = phase;
    }

    fn render(&self, slot: usize, id: &str, order: u32) -> RuleDef {
        let s = &self.slots[slot];
        let mut condition = Condition::Clause(s.trig.guard.clone());
        for c in &s.extras {
            condition = Condition::and(condition, Condition::Clause(c.clone()));
        }
        let program = Program { condition, script: Script { stmts: s.stmts.clone() } };
        RuleDef::new(id, &s.trig.table, s.trig.op, s.phase, order, &print::program(&program))
    }

    /// Add a conflict pair of two SET statements sharing `trig`.
    fn conflict_pair(&mut self, trig: Trig) -> Option<(usize, usize)> {
        let free: Vec<&FieldDef> = self
            .free_fields(&trig.table)
            .into_iter()
            .filter(|d| d.kind == FieldKind::Text || (d.kind == FieldKind::Choice && d.choices.len() >= 3))
            .collect();
        let def = free.choose(&mut self.rng).copied()?;
        let current = trig.state.get(&def.name).cloned().unwrap_or(Value::Null);
        let a = self.fresh_value(def, &current)?;
        let b = loop {
            let b = self.fresh_value(def, &current)?;
            if b != a {
                break b;
            }
        };
        let sa = self.new_slot(trig.clone());
        let sb = self.new_slot(trig.clone());
        self.take([key(&trig.table, &def.name)], Writer::Stmt(sa, 0));
        self.slots[sa].stmts.push(Stmt::Set(Assign::lit(def.name.clone(), a)));
        self.slots[sb].stmts.push(Stmt::Set(Assign::lit(def.name.clone(), b)));
        self.slots[sa].pair = true;
        self.slots[sb].pair = true;
        Some((sa, sb))
    }
}

fn action_tables(world: &World) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for schema in world.registry.tables() {
        let has_records = world.seed.tables.get(&schema.name).is_some_and(|r| !r.is_empty());
        for f in schema.fields() {
            if has_records && f.kind == FieldKind::Choice && f.choices.len() >= 2 {
                out.push((schema.name.clone(), f.name.clone()));
            }
        }
    }
    out
}

/// Pick an action and its follow-ups on `(table, field)`.
fn sample_action(
    world: &World,
    rng: &mut ChaCha8Rng,
    cfg: &SamplerConfig,
    table: &str,
    field: &str,
    insert: bool,
) -> Option<(Action, FieldMap, Vec<Action>)> {
    let reg = &world.registry;
    let schema = reg.table(table)?;
    let def = schema.field(field)?;
    let records = world.seed.tables.get(table)?;
    if insert {
        let default = def.materialized_default();
        let opts: Vec<i64> = def.choices.iter().map(|c| c.value).filter(|v| Value::Int(*v) != default).collect();
        let v = Value::Int(*opts.choose(rng)?);
        let payload = |n: usize| -> FieldMap {
            [("u_name".to_string(), Value::text(format!("cb-action-{n}"))), (field.to_string(), v.clone())].into_iter().collect()
        };
        let state = apply_defaults(schema, &payload(0)).ok()?;
        let followups = (1..=cfg.followups).map(|n| Action::insert(table, payload(n))).collect();
        return Some((Action::insert(table, payload(0)), state, followups));
    }
    let target = records.choose(rng)?;
    let current = target.values.get(field)?.as_int()?;
    let opts: Vec<i64> = def.choices.iter().map(|c| c.value).filter(|v| *v != current).collect();
    let v = *opts.choose(rng)?;
    let payload: FieldMap = [(field.to_string(), Value::Int(v))].into_iter().collect();
    let mut state = target.values.clone();
    state.insert(field.into(), Value::Int(v));
    let followups = records
        .iter()
        .filter(|r| r.id != target.id && r.values.get(field) != Some(&Value::Int(v)))
        .take(cfg.followups)
        .map(|r| Action::update(table, &r.id, payload.clone()))
        .collect();
    Some((Action::update(table, &target.id, payload), state, followups))
}

fn footprint(reg: &SchemaRegistry, action: &Action, state: &FieldMap) -> Vec<(String, String)> {
    let schema = reg.table(&action.table).expect("registered");
    match action.op {
        Operation::Update => action.payload.keys().map(|f| key(&action.table, f)).collect(),
        Operation::Insert => schema
            .fields()
            .iter()
            .filter(|d| action.payload.contains_key(&d.name) || !state[&d.name].is_empty())
            .map(|d| key(&action.table, &d.name))
            .collect(),
    }
}

/// Sample a cascade with length drawn uniformly from the configured range.
pub fn sample_cascade(world: &World, topology: Topology, seed: u64) -> Result<CascadeSpec, BenchError> {
    sample_cascade_with(world, topology, None, seed, &SamplerConfig::default())
}

/// Sample a cascade; `length` overrides the drawn length.
pub fn sample_cascade_with(
    world: &World,
    topology: Topology,
    length: Option<usize>,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<CascadeSpec, BenchError> {
    let tables = world.registry.len();
    if topology != Topology::Flat && tables < 2 {
        return Err(BenchError::InsufficientTables { topology, tables });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = match topology {
        Topology::Linear => cfg.max_length.min(tables),
        _ => cfg.max_length,
    };
    if max_len < cfg.min_length {
        return Err(BenchError::InsufficientTables { topology, tables });
    }
    let length = length.unwrap_or_else(|| rng.gen_range(cfg.min_length..=max_len));
    let candidates = action_tables(world);
    if candidates.is_empty() {
        return Err(BenchError::InsufficientTables { topology, tables });
    }
    for _ in 0..64 {
        let attempt_seed = rng.gen();
        if let Some(spec) = attempt(world, topology, length, attempt_seed, cfg, &candidates, None) {
            return Ok(spec);
        }
    }
    Err(BenchError::SamplingExhausted { topology, length })
}

/// A flat cascade on a world conflict pair's table whose last two rules are
/// the pair itself, triggered by a change to the pair's trigger field.
pub fn sample_conflict_probe(world: &World, pair: &ConflictPair, seed: u64, cfg: &SamplerConfig) -> Result<CascadeSpec, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let length = rng.gen_range(cfg.min_length.max(3)..=cfg.max_length.max(3));
    let candidates = vec![(pair.table.clone(), pair.trigger_field.clone())];
    for _ in 0..64 {
        let attempt_seed = rng.gen();
        if let Some(spec) = attempt(world, Topology::Flat, length, attempt_seed, cfg, &candidates, Some(pair)) {
            return Ok(spec);
        }
    }
    Err(BenchError::SamplingExhausted { topology: Topology::Flat, length })
}

fn attempt(
    world: &World,
    topology: Topology,
    length: usize,
    seed: u64,
    cfg: &SamplerConfig,
    candidates: &[(String, String)],
    probe: Option<&ConflictPair>,
) -> Option<CascadeSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (table, field) = candidates.choose(&mut rng)?.clone();
    let insert = probe.is_none() && rng.gen_bool(cfg.insert_action);
    let (action, state, followups) = sample_action(world, &mut rng, cfg, &table, &field, insert)?;
    let mut s = Sampler {
        reg: &world.registry,
        cfg,
        rng,
        writers: BTreeMap::new(),
        support: Vec::new(),
        tokens: 0,
        action_table: table.clone(),
        slots: Vec::new(),
    };
    let fp = footprint(s.reg, &action, &state);
    s.take(fp, Writer::Action);
    if let Some(p) = probe {
        s.take([key(&p.table, &p.field)], Writer::Action);
    }
    let value = action.payload[&field].clone();
    let root = Trig {
        table: table.clone(),
        op: action.op,
        guard: Clause::ChangesTo(field.clone(), value),
        by: Writer::Action,
        state,
        mult: 1,
        depth: 1,
    };
    let pair_wanted = probe.is_none()
        && topology != Topology::Linear
        && length >= 3
        && s.rng.gen_bool(cfg.conflict_pair);
    let singles = if probe.is_some() || pair_wanted { length - 2 } else { length };
    let mut used_tables: BTreeSet<String> = [table.clone()].into();
    for i in 0..singles {
        let trig = match (topology, i) {
            (Topology::Flat, _) | (_, 0) => root.clone(),
            (Topology::Linear, _) => {
                let fresh: Vec<String> =
                    s.reg.table_names().filter(|t| !used_tables.contains(*t)).map(String::from).collect();
                let mut found = None;
                for t in fresh {
                    if let Some(tr) = s.link(i - 1, Some(&t), false) {
                        found = Some(tr);
                        break;
                    }
                }
                found?
            }
            (Topology::Complete, _) => {
                let parent = s.rng.gen_range(0..=i);
                if parent == i {
                    root.clone()
                } else {
                    s.link(parent, None, true)?
                }
            }
        };
        used_tables.insert(trig.table.clone());
        s.new_slot(trig);
    }
    let mut pair_slots = None;
    if pair_wanted {
        let trig = if topology == Topology::Complete && singles > 0 && s.rng.gen_bool(0.5) {
            let parent = s.rng.gen_range(0..singles);
            s.link(parent, None, true)?
        } else {
            root.clone()
        };
        pair_slots = Some(s.conflict_pair(trig)?);
    }
    for i in 0..singles {
        s.extra_statements(i);
        if s.slots[i].stmts.is_empty() {
            let (stmt, _) = s.own_set_stmt(i, true)?;
            s.slots[i].stmts.push(stmt);
        }
    }
    for i in 0..s.slots.len() {
        if !s.slots[i].pair {
            let extras = s.extra_clauses(i);
            s.slots[i].extras = extras;
        }
        s.assign_phase(i);
    }
    let mut rules: Vec<RuleDef> = (0..s.slots.len()).map(|i| s.render(i, &format!("r{}", i + 1), 100 * (i as u32 + 1))).collect();
    let mut conflict_pairs = Vec::new();
    if let Some((a, b)) = pair_slots {
        conflict_pairs.push([rules[a].id.clone(), rules[b].id.clone()]);
    }
    if let Some(p) = probe {
        for (id, order) in p.rules.iter().zip(p.orders) {
            let def = world.rules.iter().find(|r| &r.id == id)?;
            let mut def = def.clone();
            def.order = order;
            rules.push(def);
        }
        conflict_pairs.push(p.rules.clone());
    }
    Some(CascadeSpec {
        topology,
        length: rules.len(),
        action,
        rules,
        support: s.support,
        conflict_pairs,
        followups,
    })
}
