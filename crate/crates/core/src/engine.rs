//! The transition function: applies an action and runs the business-rule cascade.
//!
//! Rules on a table run in `(phase, order, id)` order. Before-phase rules
//! mutate the pending record, after-phase rules run once the record is
//! committed and every write they make commits immediately, raising a nested
//! event that is processed depth-first. Async rules are queued and drained
//! FIFO once the synchronous tree has finished.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{self, safety, DslError, ExecError, PendingWrite, Program, SafetyContext, Stmt, Trigger, Violation, WriteOp};
use crate::schema::{self, FieldDef, SchemaRegistry, TableSchema};
use crate::store::{AuditEntry, AuditSet, Cause, RecordId, StateSnapshot, Store, StoreError};
use crate::value::{FieldMap, Value};

pub const DEFAULT_DEPTH_LIMIT: u32 = 8;
pub const SLA_TABLE: &str = "u_sla_timer";
pub const SLA_ORDER: u32 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Insert,
    Update,
}

/// Execution phase; the derived order is the execution rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Before,
    After,
    Async,
}

fn yes() -> bool {
    true
}

/// Serializable rule definition; the program is kept as source text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDef {
    pub id: String,
    pub table: String,
    pub operation: Operation,
    pub phase: Phase,
    pub order: u32,
    #[serde(default = "yes")]
    pub active: bool,
    pub source: String,
}

impl RuleDef {
    pub fn new(id: &str, table: &str, operation: Operation, phase: Phase, order: u32, source: &str) -> Self {
        RuleDef {
            id: id.into(),
            table: table.into(),
            operation,
            phase,
            order,
            active: true,
            source: source.into(),
        }
    }

    pub fn sort_key(&self) -> (Phase, u32, &str) {
        (self.phase, self.order, &self.id)
    }
}

/// A rule compiled against a registry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BusinessRule {
    pub def: RuleDef,
    pub program: Program,
    pub writes: BTreeSet<WriteOp>,
}

impl BusinessRule {
    /// Parse, type-check and lint a rule definition.
    pub fn compile(def: RuleDef, registry: &SchemaRegistry) -> Result<Self, EngineError> {
        let fail = |violations| EngineError::ValidationFailed { rule: def.id.clone(), violations };
        let program = dsl::parse(&def.source, registry, &def.table)
            .map_err(|e: DslError| fail(vec![Violation::Invalid { message: e.to_string() }]))?;
        let ctx = SafetyContext {
            trigger_table: &def.table,
            before_phase: def.phase == Phase::Before,
            condition: Some(&program.condition),
        };
        let violations = safety::check_safety(&program.script, registry, &ctx);
        if !violations.is_empty() {
            return Err(fail(violations));
        }
        let writes = dsl::extract_write_set(&program.script, registry, &def.table);
        Ok(BusinessRule { def, program, writes })
    }

    pub fn id(&self) -> &str {
        &self.def.id
    }

    /// Non-creation `(table, field)` writes, the ones that can conflict.
    pub fn update_keys(&self) -> BTreeSet<(&str, &str)> {
        self.writes.iter().filter(|w| !w.creation).map(|w| w.key()).collect()
    }
}

/// An SLA starts a timer record whenever its start condition holds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlaDefinition {
    pub id: String,
    pub table: String,
    pub start_condition: String,
    pub duration_tag: String,
}

impl SlaDefinition {
    /// One after-phase rule per operation, both at [`SLA_ORDER`].
    pub fn compile(&self) -> Vec<RuleDef> {
        let lit = |s: &str| dsl::print::literal(&Value::text(s));
        let source = format!(
            "WHEN {} DO INSERT {SLA_TABLE} {{ u_name = {}, u_table = {}, u_duration = {} }}",
            self.start_condition,
            lit(&self.id),
            lit(&self.table),
            lit(&self.duration_tag)
        );
        [(Operation::Insert, "insert"), (Operation::Update, "update")]
            .into_iter()
            .map(|(op, tag)| RuleDef::new(&format!("{}.{tag}", self.id), &self.table, op, Phase::After, SLA_ORDER, &source))
            .collect()
    }
}

/// The built-in timer table SLA rules insert into.
pub fn sla_timer_table() -> TableSchema {
    TableSchema::new(
        SLA_TABLE,
        vec![
            FieldDef::text("u_name"),
            FieldDef::text("u_table"),
            FieldDef::text("u_duration"),
            FieldDef::choice("u_stage", &[(1, "In progress"), (2, "Breached"), (3, "Completed")]),
            FieldDef::boolean("u_has_breached"),
        ],
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub op: Operation,
    pub table: String,
    pub payload: FieldMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<RecordId>,
}

impl Action {
    pub fn insert(table: &str, payload: FieldMap) -> Self {
        Action { op: Operation::Insert, table: table.into(), payload, target_id: None }
    }

    pub fn update(table: &str, target: &str, payload: FieldMap) -> Self {
        Action { op: Operation::Update, table: table.into(), payload, target_id: Some(target.into()) }
    }
}

/// One rule firing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub rule_id: String,
    pub table: String,
    pub record_id: RecordId,
    pub depth: u32,
    /// Audit ordinal that was next when the rule fired.
    pub fired_at: u64,
    pub phase: Phase,
    pub order: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CascadePath(pub Vec<PathStep>);

impl CascadePath {
    pub fn steps(&self) -> &[PathStep] {
        &self.0
    }

    pub fn rule_ids(&self) -> BTreeSet<&str> {
        self.0.iter().map(|s| s.rule_id.as_str()).collect()
    }

    pub fn max_depth(&self) -> u32 {
        self.0.iter().map(|s| s.depth).max().unwrap_or(0)
    }
}

/// Result of one action.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub record_id: RecordId,
    pub audits: AuditSet,
    pub path: CascadePath,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("cascade exceeded depth limit {limit} at rule `{rule}`")]
    CascadeDepthExceeded { limit: u32, rule: String },
    #[error("referential violation: {0}")]
    ReferentialViolation(String),
    #[error("rule `{rule}` failed validation: {violations:?}")]
    ValidationFailed { rule: String, violations: Vec<Violation> },
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("step {step}: {source}")]
    Replay { step: usize, source: Box<EngineError> },
}

impl From<ExecError> for EngineError {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::ReferentialViolation { .. } => EngineError::ReferentialViolation(e.to_string()),
            ExecError::Schema(s) => EngineError::Store(StoreError::SchemaViolation(s)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Engine {
    registry: Arc<SchemaRegistry>,
    store: Store,
    rules: Vec<Arc<BusinessRule>>,
    index: BTreeMap<(String, Operation), Vec<Arc<BusinessRule>>>,
    waived: BTreeSet<(String, String)>,
    depth_limit: u32,
}

/// Who performs a write and at which depth.
#[derive(Clone, Debug)]
struct Writer {
    cause: Cause,
    depth: u32,
}

type Chain = Vec<(String, RecordId)>;

struct AsyncJob {
    rule: Arc<BusinessRule>,
    table: String,
    record_id: RecordId,
    depth: u32,
    chain: Chain,
}

struct Run {
    audits: Vec<AuditEntry>,
    path: Vec<PathStep>,
    queue: VecDeque<AsyncJob>,
}

enum Target {
    Insert { values: FieldMap, supplied: Option<BTreeSet<String>> },
    Update { id: RecordId, assignments: FieldMap, fanout: Option<u32> },
}

impl Engine {
    pub fn new(registry: Arc<SchemaRegistry>, store: Store) -> Self {
        Engine {
            registry,
            store,
            rules: Vec::new(),
            index: BTreeMap::new(),
            waived: BTreeSet::new(),
            depth_limit: DEFAULT_DEPTH_LIMIT,
        }
    }

    pub fn with_depth_limit(mut self, limit: u32) -> Self {
        self.depth_limit = limit;
        self
    }

    pub fn registry(&self) -> &Arc<SchemaRegistry> {
        &self.registry
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut Store {
        &mut self.store
    }

    /// Installed rules in `(phase, order, id)` order.
    pub fn rules(&self) -> &[Arc<BusinessRule>] {
        &self.rules
    }

    /// Allow the two rules to write the same field.
    pub fn waive_conflict(&mut self, a: &str, b: &str) {
        self.waived.insert(ordered_pair(a, b));
    }

    /// Install a rule. Conflicting same-field writes are rejected unless waived.
    pub fn register_rule(&mut self, def: RuleDef) -> Result<(), EngineError> {
        let rule = BusinessRule::compile(def, &self.registry)?;
        let fail = |violations| EngineError::ValidationFailed { rule: rule.def.id.clone(), violations };
        if self.rules.iter().any(|r| r.def.id == rule.def.id) {
            return Err(fail(vec![Violation::Invalid { message: format!("duplicate rule id `{}`", rule.def.id) }]));
        }
        let mut conflicts = Vec::new();
        if rule.def.active {
            let mine = rule.update_keys();
            for other in self.rules.iter().filter(|r| r.def.active) {
                if self.waived.contains(&ordered_pair(&rule.def.id, &other.def.id)) {
                    continue;
                }
                for (t, f) in other.update_keys().intersection(&mine) {
                    conflicts.push(Violation::ConflictHazard {
                        rule: rule.def.id.clone(),
                        other: other.def.id.clone(),
                        table: t.to_string(),
                        field: f.to_string(),
                    });
                }
            }
        }
        if !conflicts.is_empty() {
            return Err(fail(conflicts));
        }
        let rule = Arc::new(rule);
        self.rules.push(rule.clone());
        self.rules.sort_by(|a, b| a.def.sort_key().cmp(&b.def.sort_key()));
        if rule.def.active {
            let slot = self.index.entry((rule.def.table.clone(), rule.def.operation)).or_default();
            slot.push(rule);
            slot.sort_by(|a, b| a.def.sort_key().cmp(&b.def.sort_key()));
        }
        Ok(())
    }

    /// Register each SLA's compiled rules.
    pub fn register_sla(&mut self, sla: &SlaDefinition) -> Result<(), EngineError> {
        for def in sla.compile() {
            self.register_rule(def)?;
        }
        Ok(())
    }

    /// An independent copy for simulation; the original is never touched.
    pub fn sandbox(&self) -> Engine {
        self.clone()
    }

    /// A copy with the store replaced by `snapshot`.
    pub fn sandbox_at(&self, snapshot: &StateSnapshot) -> Result<Engine, EngineError> {
        let mut e = self.clone();
        e.store.reset(snapshot)?;
        Ok(e)
    }

    fn rules_for(&self, table: &str, op: Operation) -> Vec<Arc<BusinessRule>> {
        self.index.get(&(table.to_string(), op)).cloned().unwrap_or_default()
    }

    /// Apply one action and the full cascade it triggers.
    ///
    /// On error the store is left mid-cascade; callers reset it.
    pub fn apply_action(&mut self, action: &Action) -> Result<Outcome, EngineError> {
        let schema = self.registry.require(&action.table).map_err(StoreError::from)?.clone();
        if let Some(k) = action.payload.keys().find(|k| schema::METADATA_FIELDS.contains(&k.as_str())) {
            return Err(EngineError::InvalidAction(format!("payload writes metadata field `{k}`")));
        }
        let violations = schema::check_record(&self.registry, &action.table, &action.payload, &self.store)
            .map_err(StoreError::from)?;
        if !violations.is_empty() {
            return Err(EngineError::InvalidAction(format!("{violations:?}")));
        }
        let mut run = Run { audits: Vec::new(), path: Vec::new(), queue: VecDeque::new() };
        let target = match action.op {
            Operation::Insert => Target::Insert {
                values: schema::apply_defaults(&schema, &action.payload).map_err(StoreError::from)?,
                supplied: Some(action.payload.keys().cloned().collect()),
            },
            Operation::Update => {
                let id = action
                    .target_id
                    .clone()
                    .ok_or_else(|| EngineError::InvalidAction("update without target_id".into()))?;
                Target::Update { id, assignments: action.payload.clone(), fanout: None }
            }
        };
        let writer = Writer { cause: Cause::Action, depth: 0 };
        let record_id = self.write(&mut run, &action.table, target, &writer, &Vec::new())?;
        while let Some(job) = run.queue.pop_front() {
            let Some(cur) = self.store.get(&job.table, &job.record_id).cloned() else { continue };
            self.fire(&mut run, &job.rule, &job.table, &job.record_id, cur, job.depth, &job.chain)?;
        }
        Ok(Outcome { record_id, audits: AuditSet(run.audits), path: CascadePath(run.path) })
    }

    fn check_depth(&self, rule: &BusinessRule, depth: u32) -> Result<(), EngineError> {
        if depth > self.depth_limit {
            return Err(EngineError::CascadeDepthExceeded { limit: self.depth_limit, rule: rule.def.id.clone() });
        }
        Ok(())
    }

    fn step(&self, rule: &BusinessRule, record_id: &str, depth: u32) -> PathStep {
        PathStep {
            rule_id: rule.def.id.clone(),
            table: rule.def.table.clone(),
            record_id: record_id.to_string(),
            depth,
            fired_at: self.store.seq(),
            phase: rule.def.phase,
            order: rule.def.order,
        }
    }

    /// Commit one write with its before- and after-phase rules. Returns the record id.
    fn write(
        &mut self,
        run: &mut Run,
        table: &str,
        target: Target,
        writer: &Writer,
        chain: &Chain,
    ) -> Result<RecordId, EngineError> {
        let (op, id, prev, mut pending, fanout) = match &target {
            Target::Insert { values, .. } => {
                let id = self.store.next_id(table);
                let mut v = values.clone();
                v.insert(schema::FIELD_ID.into(), Value::text(id.clone()));
                (Operation::Insert, id, None, v, None)
            }
            Target::Update { id, assignments, fanout } => {
                let prev = self
                    .store
                    .get(table, id)
                    .cloned()
                    .ok_or_else(|| StoreError::NoSuchRecord { table: table.into(), id: id.clone() })?;
                let merged = self.store.merged(table, id, assignments)?;
                (Operation::Update, id.clone(), Some(prev), merged, *fanout)
            }
        };
        let rules = self.rules_for(table, op);
        let depth = writer.depth + 1;
        let mut by_rule: BTreeMap<String, (Cause, u32)> = BTreeMap::new();
        for rule in rules.iter().filter(|r| r.def.phase == Phase::Before) {
            if chain.iter().any(|(r, rec)| *r == rule.def.id && *rec == id) {
                continue;
            }
            if !dsl::eval_condition(&rule.program.condition, &pending, prev.as_ref()) {
                continue;
            }
            self.check_depth(rule, depth)?;
            run.path.push(self.step(rule, &id, depth));
            for s in &rule.program.script.stmts {
                if let Stmt::Set(a) = s {
                    let v = dsl::eval::eval_expr(&a.expr, &pending);
                    if pending.get(&a.field) != Some(&v) {
                        pending.insert(a.field.clone(), v);
                        by_rule.insert(a.field.clone(), (Cause::Rule(rule.def.id.clone()), depth));
                    }
                }
            }
        }
        let supplied = match &target {
            Target::Insert { supplied, .. } => supplied.clone(),
            Target::Update { .. } => None,
        };
        let attribution = |f: &str| -> (Cause, u32) {
            if let Some(a) = by_rule.get(f) {
                return a.clone();
            }
            match &supplied {
                Some(s) if !s.contains(f) && !schema::METADATA_FIELDS.contains(&f) => (Cause::SchemaDefault, writer.depth),
                _ => (writer.cause.clone(), writer.depth),
            }
        };
        let emitted = match op {
            Operation::Insert => self.store.commit_insert(table, &id, pending, &attribution),
            Operation::Update => self.store.commit_update(table, &id, pending, &attribution, fanout),
        };
        if op == Operation::Update && emitted.is_empty() {
            return Ok(id);
        }
        run.audits.extend(emitted);
        let current = self.store.get(table, &id).cloned().expect("just committed");
        for rule in rules.iter().filter(|r| r.def.phase != Phase::Before) {
            if chain.iter().any(|(r, rec)| *r == rule.def.id && *rec == id) {
                continue;
            }
            if !dsl::eval_condition(&rule.program.condition, &current, prev.as_ref()) {
                continue;
            }
            self.check_depth(rule, depth)?;
            let mut next = chain.clone();
            next.push((rule.def.id.clone(), id.clone()));
            if rule.def.phase == Phase::Async {
                run.queue.push_back(AsyncJob { rule: rule.clone(), table: table.into(), record_id: id.clone(), depth, chain: next });
                continue;
            }
            let live = self.store.get(table, &id).cloned().expect("records are never deleted by rules");
            self.fire(run, rule, table, &id, live, depth, &next)?;
        }
        Ok(id)
    }

    /// Run an after-phase or async script statement by statement, so each
    /// statement sees the effects of the nested events before it.
    #[allow(clippy::too_many_arguments)]
    fn fire(
        &mut self,
        run: &mut Run,
        rule: &Arc<BusinessRule>,
        table: &str,
        record_id: &str,
        mut cur: FieldMap,
        depth: u32,
        chain: &Chain,
    ) -> Result<(), EngineError> {
        self.check_depth(rule, depth)?;
        run.path.push(self.step(rule, record_id, depth));
        let writer = Writer { cause: Cause::Rule(rule.def.id.clone()), depth };
        for s in &rule.program.script.stmts {
            let trigger = Trigger { table, record_id, values: &cur };
            let writes = dsl::exec_stmt(s, &trigger, &self.store, &self.registry)?;
            for w in writes {
                let (t, target) = match w {
                    PendingWrite::Update { table, record_id, assignments, fanout } => {
                        (table, Target::Update { id: record_id, assignments, fanout })
                    }
                    PendingWrite::Insert { table, values } => (table, Target::Insert { values, supplied: None }),
                };
                self.write(run, &t, target, &writer, chain)?;
            }
            if let Some(v) = self.store.get(table, record_id) {
                cur = v.clone();
            }
        }
        Ok(())
    }

    /// Reset to `seed` and apply `actions` in sequence.
    pub fn replay(&mut self, seed: &StateSnapshot, actions: &[Action]) -> Result<Vec<Outcome>, EngineError> {
        self.store.reset(seed)?;
        actions
            .iter()
            .enumerate()
            .map(|(step, a)| self.apply_action(a).map_err(|e| EngineError::Replay { step, source: Box::new(e) }))
            .collect()
    }
}

fn ordered_pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.into(), b.into())
    } else {
        (b.into(), a.into())
    }
}
