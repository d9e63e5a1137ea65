//! Predictors of an action's audit delta.
//!
//! * Direct simulates the schema only: defaults and the merged payload on the
//!   action's own record.
//! * Oracle runs the cascade engine with the full rule set in hand.
//! * Discovery retrieves rules through the query interface under a call
//!   budget, then hands what it found to a [`Reasoner`].
//!
//! Every predictor works on a copy of its state view; none touches a live store.

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{extract_write_set, parse_program};
use crate::engine::{Action, Engine, EngineError, Operation, RuleDef, SlaDefinition, SLA_TABLE};
use crate::query::{rule_from_row, sla_from_row, world_query, Instance, Query, QueryError, RULES_TABLE, SLA_DEF_TABLE};
use crate::schema::SchemaRegistry;
use crate::store::{AuditEntry, FieldKey, RawOp, RecordId, StateSnapshot, Store, StoreError};
use crate::value::{FieldMap, Value};

/// Default discovery call budget.
pub const DEFAULT_BUDGET: usize = 15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("step {step}: {source}")]
    Step { step: usize, source: Box<PredictError> },
}

/// One predicted field change. Predictions carry every field the predictor
/// saw change; scoring filters to content keys.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedEntry {
    pub table: String,
    pub field: String,
    pub old_value: Option<Value>,
    pub new_value: Value,
    pub record_id: RecordId,
}

impl FieldKey for PredictedEntry {
    fn table(&self) -> &str {
        &self.table
    }
    fn field(&self) -> &str {
        &self.field
    }
}

impl From<&AuditEntry> for PredictedEntry {
    fn from(e: &AuditEntry) -> Self {
        PredictedEntry {
            table: e.table.clone(),
            field: e.field.clone(),
            old_value: e.old_value.clone(),
            new_value: e.new_value.clone(),
            record_id: e.record_id.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictedAuditSet(pub Vec<PredictedEntry>);

impl PredictedAuditSet {
    pub fn entries(&self) -> &[PredictedEntry] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'a> FromIterator<&'a AuditEntry> for PredictedAuditSet {
    fn from_iter<I: IntoIterator<Item = &'a AuditEntry>>(iter: I) -> Self {
        PredictedAuditSet(iter.into_iter().map(PredictedEntry::from).collect())
    }
}

/// What a predictor sees for one step.
#[derive(Clone, Debug)]
pub struct PredictionInput {
    pub registry: Arc<SchemaRegistry>,
    /// State before the action, as the predictor believes it to be.
    pub view: StateSnapshot,
    pub action: Action,
    /// The predictor's own earlier predictions in this rollout.
    pub history: Vec<PredictedAuditSet>,
}

impl PredictionInput {
    pub fn new(registry: Arc<SchemaRegistry>, view: StateSnapshot, action: Action) -> Self {
        PredictionInput { registry, view, action, history: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalResult {
    Rows(Vec<FieldMap>),
    Denied,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retrieval {
    pub query: Query,
    pub result: RetrievalResult,
}

/// The queries a discovery run issued and what came back.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub queries: Vec<Retrieval>,
    pub budget_used: usize,
    /// Whether the retrieval frontier emptied before the budget ran out.
    pub closed: bool,
}

impl RetrievedContext {
    /// Rule definitions in the returned rows, first occurrence wins.
    pub fn rules(&self) -> Vec<RuleDef> {
        let mut seen = BTreeSet::new();
        self.rows(RULES_TABLE).filter_map(rule_from_row).filter(|r| seen.insert(r.id.clone())).collect()
    }

    pub fn slas(&self) -> Vec<SlaDefinition> {
        let mut seen = BTreeSet::new();
        self.rows(SLA_DEF_TABLE).filter_map(sla_from_row).filter(|s| seen.insert(s.id.clone())).collect()
    }

    fn rows<'a>(&'a self, table: &'a str) -> impl Iterator<Item = &'a FieldMap> + 'a {
        self.queries.iter().filter(move |r| r.query.table == table).flat_map(|r| match &r.result {
            RetrievalResult::Rows(rows) => rows.as_slice(),
            RetrievalResult::Denied => &[],
        })
    }
}

/// Turns an input plus retrieved context into a prediction.
pub trait Reasoner {
    fn name(&self) -> &str;
    fn reason(&self, input: &PredictionInput, ctx: &RetrievedContext) -> Result<PredictedAuditSet, PredictError>;
}

/// The shipped reasoner: runs the cascade engine over exactly the retrieved
/// rules and SLAs. Pure and deterministic.
#[derive(Clone, Copy, Debug, Default)]
pub struct InterpreterReasoner;

impl Reasoner for InterpreterReasoner {
    fn name(&self) -> &str {
        "interpreter"
    }

    fn reason(&self, input: &PredictionInput, ctx: &RetrievedContext) -> Result<PredictedAuditSet, PredictError> {
        simulate(input, &ctx.rules(), &ctx.slas())
    }
}

/// Run the engine on a private copy of the view. Every pair of supplied rules
/// may write the same field; order decides.
fn simulate(input: &PredictionInput, rules: &[RuleDef], slas: &[SlaDefinition]) -> Result<PredictedAuditSet, PredictError> {
    let store = Store::from_snapshot(input.registry.clone(), &input.view)?;
    let mut engine = Engine::new(input.registry.clone(), store);
    let mut ids: Vec<String> = rules.iter().map(|r| r.id.clone()).collect();
    ids.extend(slas.iter().flat_map(|s| s.compile()).map(|r| r.id));
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            engine.waive_conflict(a, b);
        }
    }
    for r in rules {
        engine.register_rule(r.clone())?;
    }
    for s in slas {
        engine.register_sla(s)?;
    }
    let out = engine.apply_action(&input.action)?;
    Ok(out.audits.iter().collect())
}

/// Schema-only prediction: the action applied without any rules.
pub fn direct_predict(input: &PredictionInput) -> Result<PredictedAuditSet, PredictError> {
    let mut store = Store::from_snapshot(input.registry.clone(), &input.view)?;
    let a = &input.action;
    let op = match (a.op, &a.target_id) {
        (Operation::Insert, _) => RawOp::Insert,
        (Operation::Update, Some(id)) => RawOp::Update(id.clone()),
        (Operation::Update, None) => return Err(EngineError::InvalidAction("update without target_id".into()).into()),
    };
    let (_, audits) = store.apply_raw(&a.table, op, &a.payload)?;
    Ok(audits.iter().collect())
}

/// Full-knowledge prediction. The rule order on input does not matter.
pub fn oracle_predict(input: &PredictionInput, rules: &[RuleDef], slas: &[SlaDefinition]) -> Result<PredictedAuditSet, PredictError> {
    simulate(input, rules, slas)
}

/// Budgeted retrieval followed by reasoning.
///
/// Query plan, one call each: the rules of the action's table, then every SLA
/// definition, then breadth-first the rules of each table the retrieved rules
/// statically write, until the frontier empties or the budget is spent. A
/// denied query is recorded, charged, and yields nothing to expand.
pub fn discovery_predict(
    input: &PredictionInput,
    inst: &Instance,
    budget: usize,
    reasoner: &dyn Reasoner,
) -> Result<(PredictedAuditSet, RetrievedContext), PredictError> {
    let ctx = retrieve(inst, &input.action.table, budget);
    let pred = reasoner.reason(input, &ctx)?;
    Ok((pred, ctx))
}

enum Call {
    Rules(String),
    Slas,
}

fn rules_query(table: &str) -> Query {
    Query::table(RULES_TABLE).filter(&format!("table == {}", crate::dsl::print::literal(&Value::text(table))))
}

/// The retrieval loop on its own.
pub fn retrieve(inst: &Instance, action_table: &str, budget: usize) -> RetrievedContext {
    let mut ctx = RetrievedContext::default();
    let mut queue: VecDeque<Call> = VecDeque::from([Call::Rules(action_table.to_string()), Call::Slas]);
    let mut visited: BTreeSet<String> = BTreeSet::from([action_table.to_string()]);
    let mut enqueue = |queue: &mut VecDeque<Call>, table: &str| {
        if visited.insert(table.to_string()) {
            queue.push_back(Call::Rules(table.to_string()));
        }
    };
    while ctx.budget_used < budget {
        let Some(call) = queue.pop_front() else { break };
        let query = match &call {
            Call::Rules(t) => rules_query(t),
            Call::Slas => Query::table(SLA_DEF_TABLE),
        };
        ctx.budget_used += 1;
        let result = match world_query(inst, &query) {
            Ok(rows) => {
                match call {
                    Call::Rules(_) => {
                        for def in rows.iter().filter_map(rule_from_row) {
                            let Ok(prog) = parse_program(&def.source) else { continue };
                            for w in extract_write_set(&prog.script, &inst.registry, &def.table) {
                                enqueue(&mut queue, &w.table);
                            }
                        }
                    }
                    Call::Slas => {
                        for s in rows.iter().filter_map(sla_from_row) {
                            enqueue(&mut queue, &s.table);
                        }
                        if !rows.is_empty() {
                            enqueue(&mut queue, SLA_TABLE);
                        }
                    }
                }
                RetrievalResult::Rows(rows)
            }
            Err(QueryError::AccessDenied { .. }) => RetrievalResult::Denied,
            // The plan only names virtual tables, so nothing else can fail.
            Err(_) => RetrievalResult::Rows(Vec::new()),
        };
        ctx.queries.push(Retrieval { query, result });
    }
    ctx.closed = queue.is_empty();
    ctx
}

/// A predictor together with what it is allowed to know.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Direct,
    Oracle { rules: &'a [RuleDef], slas: &'a [SlaDefinition] },
    Discovery { instance: &'a Instance, budget: usize, reasoner: &'a dyn Reasoner },
}

impl Predictor<'_> {
    pub fn predict(&self, input: &PredictionInput) -> Result<StepPrediction, PredictError> {
        Ok(match self {
            Predictor::Direct => StepPrediction { audits: direct_predict(input)?, context: None },
            Predictor::Oracle { rules, slas } => StepPrediction { audits: oracle_predict(input, rules, slas)?, context: None },
            Predictor::Discovery { instance, budget, reasoner } => {
                let (audits, ctx) = discovery_predict(input, instance, *budget, *reasoner)?;
                StepPrediction { audits, context: Some(ctx) }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPrediction {
    pub audits: PredictedAuditSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<RetrievedContext>,
}

impl StepPrediction {
    pub fn budget_used(&self) -> usize {
        self.context.as_ref().map_or(0, |c| c.budget_used)
    }
}

/// Write predicted changes into a state view.
pub fn patch_view(view: &mut Store, prediction: &PredictedAuditSet) -> Result<(), StoreError> {
    for e in prediction.entries() {
        view.patch_field(&e.table, &e.record_id, &e.field, &e.new_value)?;
    }
    Ok(())
}

/// Predict `actions` in sequence. Step `t` sees the start state patched with
/// the predictor's own predictions for steps before `t`, never the truth.
pub fn rollout(
    registry: Arc<SchemaRegistry>,
    start: &StateSnapshot,
    actions: &[Action],
    predictor: &Predictor<'_>,
) -> Result<Vec<StepPrediction>, PredictError> {
    let wrap = |step: usize| move |e: PredictError| PredictError::Step { step, source: Box::new(e) };
    let mut view = Store::from_snapshot(registry.clone(), start).map_err(|e| wrap(0)(e.into()))?;
    let mut history: Vec<PredictedAuditSet> = Vec::new();
    let mut out = Vec::with_capacity(actions.len());
    for (step, action) in actions.iter().enumerate() {
        let input = PredictionInput { registry: registry.clone(), view: view.snapshot(), action: action.clone(), history: history.clone() };
        let pred = predictor.predict(&input).map_err(wrap(step))?;
        patch_view(&mut view, &pred.audits).map_err(|e| wrap(step)(e.into()))?;
        history.push(pred.audits.clone());
        out.push(pred);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Phase;
    use crate::schema::{FieldDef, TableSchema};
    use crate::store::filter_content;
    use crate::value::fields;
    use crate::world::AclPolicy;

    fn registry() -> Arc<SchemaRegistry> {
        let mut reg = SchemaRegistry::new();
        reg.define_table(TableSchema::new(
            "u_work",
            vec![
                FieldDef::text("u_name"),
                FieldDef::choice("u_state", &[(1, "New"), (2, "Active"), (3, "Closed")]),
                FieldDef::integer("u_count"),
            ],
        ))
        .unwrap();
        reg.define_table(TableSchema::new(
            "u_task",
            vec![FieldDef::text("u_name"), FieldDef::reference("u_parent", "u_work"), FieldDef::boolean("u_open")],
        ))
        .unwrap();
        reg.define_table(TableSchema::new("u_log", vec![FieldDef::text("u_name"), FieldDef::integer("u_n")])).unwrap();
        Arc::new(reg)
    }

    fn rules() -> Vec<RuleDef> {
        vec![
            RuleDef::new(
                "r1",
                "u_work",
                Operation::Update,
                Phase::After,
                100,
                r#"WHEN changes_to(u_state, 2) DO INSERT u_task { u_name = "t", u_parent = cur.id, u_open = true }"#,
            ),
            RuleDef::new("r2", "u_task", Operation::Insert, Phase::After, 200, r#"WHEN u_name == "t" DO INSERT u_log { u_name = "l", u_n = 7 }"#),
            RuleDef::new("r3", "u_work", Operation::Update, Phase::Before, 300, "WHEN changes(u_state) DO SET u_count = cur.u_count + 1"),
        ]
    }

    fn setup() -> (Arc<SchemaRegistry>, StateSnapshot, Action) {
        let reg = registry();
        let mut store = Store::new(reg.clone());
        let id = store.bulk_insert("u_work", &fields([("u_name", "w")])).unwrap();
        (reg, store.snapshot(), Action::update("u_work", &id, fields([("u_state", 2i64)])))
    }

    fn truth(reg: &Arc<SchemaRegistry>, snap: &StateSnapshot, action: &Action, rules: &[RuleDef]) -> PredictedAuditSet {
        let mut e = Engine::new(reg.clone(), Store::from_snapshot(reg.clone(), snap).unwrap());
        for r in rules {
            e.register_rule(r.clone()).unwrap();
        }
        e.apply_action(action).unwrap().audits.iter().collect()
    }

    fn instance(reg: &Arc<SchemaRegistry>, snap: &StateSnapshot) -> Instance {
        Instance { registry: reg.clone(), state: snap.clone(), rules: rules(), slas: vec![], acl: AclPolicy::default() }
    }

    #[test]
    fn direct_equals_a_rule_free_engine() {
        let (reg, snap, action) = setup();
        let input = PredictionInput::new(reg.clone(), snap.clone(), action.clone());
        assert_eq!(direct_predict(&input).unwrap(), truth(&reg, &snap, &action, &[]));
        let insert = Action::insert("u_work", fields([("u_name", "new")]));
        let input = PredictionInput::new(reg.clone(), snap.clone(), insert.clone());
        assert_eq!(direct_predict(&input).unwrap(), truth(&reg, &snap, &insert, &[]));
    }

    #[test]
    fn direct_stays_on_the_action_table() {
        let (reg, snap, action) = setup();
        let p = direct_predict(&PredictionInput::new(reg, snap, action)).unwrap();
        assert!(p.entries().iter().all(|e| e.table == "u_work"));
    }

    #[test]
    fn oracle_matches_the_engine_and_ignores_input_order() {
        let (reg, snap, action) = setup();
        let input = PredictionInput::new(reg.clone(), snap.clone(), action.clone());
        let want = truth(&reg, &snap, &action, &rules());
        assert_eq!(oracle_predict(&input, &rules(), &[]).unwrap(), want);
        let mut shuffled = rules();
        shuffled.reverse();
        assert_eq!(oracle_predict(&input, &shuffled, &[]).unwrap(), want);
    }

    #[test]
    fn discovery_walks_write_targets_breadth_first() {
        let (reg, snap, action) = setup();
        let inst = instance(&reg, &snap);
        let ctx = retrieve(&inst, "u_work", DEFAULT_BUDGET);
        let tables: Vec<String> = ctx.queries.iter().map(|r| r.query.filter.clone().unwrap_or_default()).collect();
        assert_eq!(tables, [r#"table == "u_work""#, "", r#"table == "u_task""#, r#"table == "u_log""#]);
        assert_eq!(ctx.budget_used, 4);
        assert!(ctx.closed);
        let input = PredictionInput::new(reg.clone(), snap.clone(), action.clone());
        let (p, _) = discovery_predict(&input, &inst, DEFAULT_BUDGET, &InterpreterReasoner).unwrap();
        assert_eq!(p, oracle_predict(&input, &rules(), &[]).unwrap());
    }

    #[test]
    fn discovery_degenerates_to_direct() {
        let (reg, snap, action) = setup();
        let input = PredictionInput::new(reg.clone(), snap.clone(), action);
        let direct = direct_predict(&input).unwrap();
        let inst = instance(&reg, &snap);
        let (p0, c0) = discovery_predict(&input, &inst, 0, &InterpreterReasoner).unwrap();
        assert_eq!((p0, c0.budget_used), (direct.clone(), 0));
        let mut blocked = inst.clone();
        blocked.acl.block_rules();
        let (pb, cb) = discovery_predict(&input, &blocked, DEFAULT_BUDGET, &InterpreterReasoner).unwrap();
        assert_eq!(pb, direct);
        assert!(cb.queries.iter().all(|r| r.result == RetrievalResult::Denied));
        assert_eq!(cb.budget_used, 2);
    }

    #[test]
    fn partial_budget_sees_only_the_first_hop() {
        let (reg, snap, action) = setup();
        let inst = instance(&reg, &snap);
        let input = PredictionInput::new(reg.clone(), snap.clone(), action);
        let (p, ctx) = discovery_predict(&input, &inst, 2, &InterpreterReasoner).unwrap();
        assert!(!ctx.closed);
        assert!(p.entries().iter().any(|e| e.table == "u_task"));
        assert!(p.entries().iter().all(|e| e.table != "u_log"));
    }

    #[test]
    fn predictors_do_not_touch_the_view_they_are_given() {
        let (reg, snap, action) = setup();
        let input = PredictionInput::new(reg.clone(), snap.clone(), action);
        direct_predict(&input).unwrap();
        oracle_predict(&input, &rules(), &[]).unwrap();
        assert_eq!(input.view, snap);
    }

    #[test]
    fn rollout_conditions_on_its_own_predictions() {
        let (reg, snap, first) = setup();
        let id = first.target_id.clone().unwrap();
        let second = Action::update("u_work", &id, fields([("u_state", 3i64)]));
        let rs = rules();
        let oracle = Predictor::Oracle { rules: &rs, slas: &[] };
        let steps = rollout(reg.clone(), &snap, &[first.clone(), second.clone()], &oracle).unwrap();
        let mut e = Engine::new(reg.clone(), Store::from_snapshot(reg.clone(), &snap).unwrap());
        for r in rules() {
            e.register_rule(r).unwrap();
        }
        let replay = e.replay(&snap, &[first.clone(), second.clone()]).unwrap();
        for (p, t) in steps.iter().zip(&replay) {
            let t: PredictedAuditSet = t.audits.iter().collect();
            assert_eq!(filter_content(p.audits.entries(), &reg), filter_content(t.entries(), &reg));
        }
        // Direct never saw the counter bump, so its second step starts from a stale view.
        let direct = rollout(reg.clone(), &snap, &[first, second], &Predictor::Direct).unwrap();
        assert_eq!(direct.len(), 2);
        assert!(direct[1].audits.entries().iter().all(|e| e.field != "u_count"));
    }

    #[test]
    fn rollout_errors_carry_the_step() {
        let (reg, snap, first) = setup();
        let bad = Action::update("u_work", "u_work_999999", fields([("u_state", 3i64)]));
        let err = rollout(reg, &snap, &[first, bad], &Predictor::Direct).unwrap_err();
        assert!(matches!(err, PredictError::Step { step: 1, .. }));
    }
}
