//! Structural, cascade, condition and safety checks over a sampled cascade,
//! with bounded repair.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::sample::{CascadeSpec, Topology};
use crate::dsl::ast::{Clause, CmpOp, Condition, Expr, Operand, Program, Script, Stmt};
use crate::dsl::check::{check_condition, check_script};
use crate::dsl::{check_safety, eval_condition, extract_write_set, parse_program, print, DslError, SafetyContext, Violation};
use crate::engine::{Operation, Phase, RuleDef, DEFAULT_DEPTH_LIMIT};
use crate::schema::{FieldKind, SchemaRegistry, FIELD_ID};
use crate::value::{FieldMap, Value};
use crate::world::World;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Check {
    S1,
    S2,
    S3,
    S4,
    C1,
    C2,
    C3,
    C4,
    F1,
    F2,
    F3,
    X1,
    X2,
    X3,
}

impl Check {
    pub const ALL: [Check; 14] = [
        Check::S1,
        Check::S2,
        Check::S3,
        Check::S4,
        Check::C1,
        Check::C2,
        Check::C3,
        Check::C4,
        Check::F1,
        Check::F2,
        Check::F3,
        Check::X1,
        Check::X2,
        Check::X3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::S1 => "S1_tables_exist",
            Check::S2 => "S2_fields_typecheck",
            Check::S3 => "S3_assignment_choices",
            Check::S4 => "S4_reference_targets",
            Check::C1 => "C1_topology",
            Check::C2 => "C2_acyclic",
            Check::C3 => "C3_depth_bound",
            Check::C4 => "C4_reachable",
            Check::F1 => "F1_condition_types",
            Check::F2 => "F2_satisfiable",
            Check::F3 => "F3_condition_choices",
            Check::X1 => "X1_safety",
            Check::X2 => "X2_no_metadata_writes",
            Check::X3 => "X3_insert_references",
        }
    }

    /// Whether a failure of this check has a repair.
    pub fn repairable(self) -> bool {
        matches!(self, Check::S3 | Check::F3 | Check::X2 | Check::C2 | Check::C4 | Check::F2)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckFailure {
    pub check: Check,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
    pub detail: String,
}

/// Outcome of every check; `checks` always holds all fourteen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: BTreeMap<Check, bool>,
    pub failures: Vec<CheckFailure>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn check(&self, c: Check) -> bool {
        self.checks.get(&c).copied().unwrap_or(false)
    }

    pub fn failed_checks(&self) -> BTreeSet<Check> {
        self.failures.iter().map(|f| f.check).collect()
    }
}

struct Ctx<'a> {
    reg: &'a SchemaRegistry,
    world: &'a World,
    spec: &'a CascadeSpec,
    progs: Vec<Option<Program>>,
    failures: Vec<CheckFailure>,
}

impl Ctx<'_> {
    fn fail(&mut self, check: Check, rule: Option<&str>, detail: impl Into<String>) {
        self.failures.push(CheckFailure { check, rule: rule.map(String::from), detail: detail.into() });
    }
}

/// Trigger-side view of a rule used by the cascade graph.
struct Node {
    table: String,
    op: Operation,
    /// Fields named in `changes` clauses when every disjunct has one.
    watch: Option<BTreeSet<String>>,
    /// Non-creation writes and INSERT target tables.
    updates: BTreeSet<(String, String)>,
    inserts: BTreeSet<String>,
}

fn watch_set(cond: &Condition) -> Option<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for conj in cond.dnf() {
        let fields: Vec<&str> = conj
            .iter()
            .filter_map(|c| match c {
                Clause::Changes(f) | Clause::ChangesTo(f, _) => Some(f.as_str()),
                _ => None,
            })
            .collect();
        if fields.is_empty() {
            return None;
        }
        out.extend(fields.into_iter().map(String::from));
    }
    Some(out)
}

fn node(reg: &SchemaRegistry, def: &RuleDef, prog: &Program) -> Node {
    let writes = extract_write_set(&prog.script, reg, &def.table);
    Node {
        table: def.table.clone(),
        op: def.operation,
        watch: watch_set(&prog.condition),
        updates: writes.iter().filter(|w| !w.creation).map(|w| (w.table.clone(), w.field.clone())).collect(),
        inserts: prog.script.stmts.iter().filter_map(|s| match s {
            Stmt::Insert { table, .. } => Some(table.clone()),
            _ => None,
        }).collect(),
    }
}

fn triggers(updates: &BTreeSet<(String, String)>, inserts: &BTreeSet<String>, target: &Node) -> bool {
    match target.op {
        Operation::Insert => inserts.contains(&target.table),
        Operation::Update => updates.iter().any(|(t, f)| {
            *t == target.table && target.watch.as_ref().is_none_or(|w| w.contains(f))
        }),
    }
}

/// Edges of the static trigger graph: `roots` are rules the action triggers,
/// `edges[i]` the rules rule `i` triggers. Unparsed rules have no edges.
fn graph(spec: &CascadeSpec, nodes: &[Option<Node>]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let a = &spec.action;
    let (au, ai): (BTreeSet<_>, BTreeSet<_>) = match a.op {
        Operation::Update => (a.payload.keys().map(|f| (a.table.clone(), f.clone())).collect(), BTreeSet::new()),
        Operation::Insert => (BTreeSet::new(), [a.table.clone()].into()),
    };
    let roots = (0..nodes.len()).filter(|j| nodes[*j].as_ref().is_some_and(|n| triggers(&au, &ai, n))).collect();
    let edges = nodes
        .iter()
        .map(|src| match src {
            None => Vec::new(),
            Some(s) => (0..nodes.len())
                .filter(|j| nodes[*j].as_ref().is_some_and(|n| triggers(&s.updates, &s.inserts, n)))
                .collect(),
        })
        .collect();
    (roots, edges)
}

/// A cycle as a list of node indices, if any.
fn find_cycle(edges: &[Vec<usize>]) -> Option<Vec<usize>> {
    fn dfs(u: usize, edges: &[Vec<usize>], color: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        color[u] = 1;
        stack.push(u);
        for &v in &edges[u] {
            if color[v] == 1 {
                let at = stack.iter().position(|x| *x == v).expect("grey nodes are on the stack");
                return Some(stack[at..].to_vec());
            }
            if color[v] == 0 {
                if let Some(c) = dfs(v, edges, color, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        color[u] = 2;
        None
    }
    let mut color = vec![0u8; edges.len()];
    for u in 0..edges.len() {
        if color[u] == 0 {
            if let Some(c) = dfs(u, edges, &mut color, &mut Vec::new()) {
                return Some(c);
            }
        }
    }
    None
}

/// Longest firing depth of each rule in an acyclic graph; the action is depth 0.
fn depths(roots: &[usize], edges: &[Vec<usize>]) -> Vec<Option<u32>> {
    let n = edges.len();
    let mut depth: Vec<Option<u32>> = vec![None; n];
    for &r in roots {
        depth[r] = Some(1);
    }
    // Relax n times; enough for a DAG of n nodes.
    for _ in 0..n {
        let mut changed = false;
        for u in 0..n {
            let Some(d) = depth[u] else { continue };
            for &v in &edges[u] {
                if depth[v].is_none_or(|x| x < d + 1) {
                    depth[v] = Some(d + 1);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    depth
}

/// Candidate values of `(table, field)`: the schema domain for choices and
/// booleans, otherwise every value the seed, support set, action or a rule
/// literal can put there. `None` means unconstrained.
fn domain(ctx: &Ctx<'_>, table: &str, field: &str) -> Option<Vec<Value>> {
    let def = ctx.reg.field(table, field)?;
    match def.kind {
        FieldKind::Choice => return Some(def.choices.iter().map(|c| Value::Int(c.value)).collect()),
        FieldKind::Boolean => return Some(vec![Value::Bool(false), Value::Bool(true)]),
        FieldKind::Datetime => return None,
        _ => {}
    }
    if def.is_metadata {
        return None;
    }
    let mut vals: BTreeSet<Value> = BTreeSet::new();
    vals.insert(def.materialized_default());
    for r in ctx.world.seed.tables.get(table).into_iter().flatten() {
        if let Some(v) = r.values.get(field) {
            vals.insert(v.clone());
        }
    }
    for s in ctx.spec.support.iter().filter(|s| s.table == table) {
        if let Some(v) = s.values.get(field) {
            vals.insert(v.clone());
        }
    }
    let a = &ctx.spec.action;
    for act in std::iter::once(a).chain(&ctx.spec.followups) {
        if act.table == table {
            if let Some(v) = act.payload.get(field) {
                vals.insert(v.clone());
            }
        }
    }
    for (def, prog) in ctx.spec.rules.iter().zip(&ctx.progs) {
        let Some(prog) = prog else { continue };
        for s in &prog.script.stmts {
            let target = s.target_table().unwrap_or(&def.table);
            if target != table {
                continue;
            }
            for asg in s.assigns().iter().filter(|x| x.field == field) {
                match &asg.expr {
                    Expr::Lit(v) => {
                        vals.insert(v.clone());
                    }
                    _ => return None,
                }
            }
        }
    }
    Some(vals.into_iter().collect())
}

fn clause_holds(c: &Clause, x: &Value) -> bool {
    match c {
        Clause::True | Clause::Changes(_) => true,
        Clause::ChangesTo(_, v) => x == v,
        Clause::Cmp { rhs: Operand::Cur(_), .. } => true,
        Clause::Cmp { field, .. } | Clause::In { field, .. } => {
            let rec: FieldMap = [(field.clone(), x.clone())].into_iter().collect();
            eval_condition(&Condition::Clause(c.clone()), &rec, Some(&rec))
        }
    }
}

fn satisfiable(ctx: &Ctx<'_>, table: &str, cond: &Condition) -> bool {
    cond.dnf().iter().any(|conj| {
        let mut by_field: BTreeMap<&str, Vec<&Clause>> = BTreeMap::new();
        for c in conj {
            if let Some(f) = c.field() {
                by_field.entry(f).or_default().push(c);
            }
        }
        by_field.iter().all(|(f, cs)| match domain(ctx, table, f) {
            None => true,
            Some(vals) => vals.iter().any(|x| cs.iter().all(|c| clause_holds(c, x))),
        })
    })
}

fn bad_choice(reg: &SchemaRegistry, table: &str, field: &str, v: &Value) -> bool {
    match (reg.field(table, field), v) {
        (Some(def), Value::Int(i)) if def.kind == FieldKind::Choice => !def.has_choice(*i),
        _ => false,
    }
}

/// Choice literals in equality, membership and `changes_to` clauses that are
/// not valid options.
fn bad_condition_literals(reg: &SchemaRegistry, table: &str, cond: &Condition) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for c in cond.clauses() {
        match c {
            Clause::Cmp { field, op: CmpOp::Eq, rhs: Operand::Lit(v) } | Clause::ChangesTo(field, v) => {
                if bad_choice(reg, table, field, v) {
                    out.push((field.clone(), v.clone()));
                }
            }
            Clause::In { field, list } => {
                out.extend(list.iter().filter(|v| bad_choice(reg, table, field, v)).map(|v| (field.clone(), v.clone())));
            }
            _ => {}
        }
    }
    out
}

fn structural(ctx: &mut Ctx<'_>) {
    let reg = ctx.reg;
    let rules = ctx.spec.rules.clone();
    for (i, def) in rules.iter().enumerate() {
        let id = def.id.as_str();
        if reg.table(&def.table).is_none() {
            ctx.fail(Check::S1, Some(id), format!("trigger table `{}` is not registered", def.table));
        }
        let Some(prog) = ctx.progs[i].clone() else { continue };
        for s in &prog.script.stmts {
            if let Some(t) = s.target_table() {
                if reg.table(t).is_none() {
                    ctx.fail(Check::S1, Some(id), format!("statement table `{t}` is not registered"));
                }
            }
        }
        if reg.table(&def.table).is_some() {
            match check_script(reg, &prog.script, &def.table) {
                Ok(()) => {}
                Err(DslError::UnknownTable(_)) => {}
                Err(e) => ctx.fail(Check::S2, Some(id), e.to_string()),
            }
        }
        for s in &prog.script.stmts {
            let target = s.target_table().unwrap_or(&def.table);
            for a in s.assigns() {
                if let Expr::Lit(v) = &a.expr {
                    if bad_choice(reg, target, &a.field, v) {
                        ctx.fail(Check::S3, Some(id), format!("`{target}.{}` has no choice {v}", a.field));
                    }
                }
            }
        }
    }
    for schema in reg.tables() {
        for f in schema.all_fields() {
            if let Some(t) = &f.ref_table {
                if reg.table(t).is_none() {
                    ctx.fail(Check::S4, None, format!("`{}.{}` references unregistered `{t}`", schema.name, f.name));
                }
            }
        }
    }
}

fn conditions(ctx: &mut Ctx<'_>) {
    let reg = ctx.reg;
    let rules = ctx.spec.rules.clone();
    for (i, def) in rules.iter().enumerate() {
        let Some(prog) = ctx.progs[i].clone() else { continue };
        if reg.table(&def.table).is_none() {
            continue;
        }
        let id = def.id.as_str();
        if let Err(e) = check_condition(reg, &prog.condition, &def.table, None) {
            ctx.fail(Check::F1, Some(id), e.to_string());
            continue;
        }
        for s in &prog.script.stmts {
            if let Stmt::SetOn { table, filter, .. } = s {
                if reg.table(table).is_some() {
                    if let Err(e) = check_condition(reg, filter, table, Some(&def.table)) {
                        ctx.fail(Check::F1, Some(id), e.to_string());
                    }
                }
            }
        }
        for (f, v) in bad_condition_literals(reg, &def.table, &prog.condition) {
            ctx.fail(Check::F3, Some(id), format!("condition literal {v} is not a choice of `{}.{f}`", def.table));
        }
        if !satisfiable(ctx, &def.table, &prog.condition) {
            ctx.fail(Check::F2, Some(id), "no seed-domain assignment satisfies the condition");
        }
    }
}

fn safety(ctx: &mut Ctx<'_>, nodes: &[Option<Node>]) {
    let reg = ctx.reg;
    let rules = ctx.spec.rules.clone();
    let waived: BTreeSet<(String, String)> = ctx
        .spec
        .conflict_pairs
        .iter()
        .flat_map(|[a, b]| [(a.clone(), b.clone()), (b.clone(), a.clone())])
        .collect();
    for (i, def) in rules.iter().enumerate() {
        let Some(prog) = ctx.progs[i].clone() else { continue };
        if reg.table(&def.table).is_none() {
            continue;
        }
        let id = def.id.as_str();
        let sctx = SafetyContext { trigger_table: &def.table, before_phase: def.phase == Phase::Before, condition: Some(&prog.condition) };
        for v in check_safety(&prog.script, reg, &sctx) {
            match v {
                Violation::MetadataWrite { table, field } => ctx.fail(Check::X2, Some(id), format!("writes metadata `{table}.{field}`")),
                other => ctx.fail(Check::X1, Some(id), format!("{other:?}")),
            }
        }
        for s in &prog.script.stmts {
            let Stmt::Insert { table, assigns } = s else { continue };
            for a in assigns {
                let Some(fd) = reg.field(table, &a.field) else { continue };
                let Some(rt) = fd.ref_table.as_deref() else { continue };
                let ok = match &a.expr {
                    Expr::Lit(Value::Null) => true,
                    Expr::Lit(Value::Text(t)) => ctx.world.seed.record(rt, t).is_some(),
                    Expr::Lit(_) => false,
                    Expr::Cur(g) if g == FIELD_ID => def.table == rt,
                    Expr::Cur(g) => reg.field(&def.table, g).and_then(|d| d.ref_table.as_deref()) == Some(rt),
                    Expr::CurPlus(..) => false,
                };
                if !ok {
                    ctx.fail(Check::X3, Some(id), format!("`{table}.{}` cannot resolve to a `{rt}` record", a.field));
                }
            }
        }
        if def.active {
            for (j, other) in rules.iter().enumerate().take(i) {
                let (Some(a), Some(b)) = (&nodes[i], &nodes[j]) else { continue };
                if !other.active || waived.contains(&(def.id.clone(), other.id.clone())) {
                    continue;
                }
                for (t, f) in a.updates.intersection(&b.updates) {
                    ctx.fail(Check::X1, Some(id), format!("writes `{t}.{f}` also written by `{}`", other.id));
                }
            }
        }
    }
}

fn cascade(ctx: &mut Ctx<'_>, nodes: &[Option<Node>]) {
    let spec = ctx.spec;
    let (roots, edges) = graph(spec, nodes);
    let ids: Vec<&str> = spec.rules.iter().map(|r| r.id.as_str()).collect();
    if let Some(cycle) = find_cycle(&edges) {
        let names: Vec<&str> = cycle.iter().map(|i| ids[*i]).collect();
        let victim = *cycle.iter().max_by_key(|i| (spec.rules[**i].order, ids[**i])).expect("cycles are non-empty");
        ctx.fail(Check::C2, Some(ids[victim]), format!("trigger cycle {}", names.join(" -> ")));
        ctx.fail(Check::C3, None, "depth is unbounded on a cycle");
    } else {
        let d = depths(&roots, &edges);
        if let Some((i, deep)) = d.iter().enumerate().filter_map(|(i, x)| x.map(|x| (i, x))).max_by_key(|(_, x)| *x) {
            if deep > DEFAULT_DEPTH_LIMIT {
                ctx.fail(Check::C3, Some(ids[i]), format!("static depth {deep} exceeds {DEFAULT_DEPTH_LIMIT}"));
            }
        }
    }
    let mut reach = vec![false; nodes.len()];
    let mut stack = roots.clone();
    while let Some(u) = stack.pop() {
        if !reach[u] {
            reach[u] = true;
            stack.extend(edges[u].iter().copied());
        }
    }
    for (i, r) in reach.iter().enumerate() {
        if !r && nodes[i].is_some() {
            ctx.fail(Check::C4, Some(ids[i]), "not reachable from the action");
        }
    }
    // Topology shape over rules in firing-order of definition.
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by_key(|i| (spec.rules[*i].order, ids[*i]));
    match spec.topology {
        Topology::Flat => {
            for &i in &order {
                if !roots.contains(&i) {
                    ctx.fail(Check::C1, Some(ids[i]), "flat rule not triggered by the action");
                }
            }
        }
        Topology::Linear => {
            let mut tables = BTreeSet::new();
            for (k, &i) in order.iter().enumerate() {
                if !tables.insert(spec.rules[i].table.as_str()) {
                    ctx.fail(Check::C1, Some(ids[i]), "linear chain repeats a trigger table");
                }
                let linked = if k == 0 { roots.contains(&i) } else { edges[order[k - 1]].contains(&i) };
                if !linked {
                    ctx.fail(Check::C1, Some(ids[i]), "not triggered by its predecessor");
                }
            }
        }
        Topology::Complete => {
            for (k, &i) in order.iter().enumerate() {
                let linked = roots.contains(&i) || order[..k].iter().any(|p| edges[*p].contains(&i));
                if !linked {
                    ctx.fail(Check::C1, Some(ids[i]), "not triggered by the action or an earlier rule");
                }
            }
        }
    }
}

/// Run every check on `spec` against `world`.
pub fn validate_cascade(world: &World, spec: &CascadeSpec) -> ValidationReport {
    let reg = &world.registry;
    let mut ctx = Ctx { reg, world, spec, progs: Vec::new(), failures: Vec::new() };
    for def in &spec.rules {
        match parse_program(&def.source) {
            Ok(p) => ctx.progs.push(Some(p)),
            Err(e) => {
                ctx.progs.push(None);
                ctx.failures.push(CheckFailure { check: Check::S2, rule: Some(def.id.clone()), detail: e.to_string() });
            }
        }
    }
    structural(&mut ctx);
    conditions(&mut ctx);
    let nodes: Vec<Option<Node>> = spec
        .rules
        .iter()
        .zip(&ctx.progs)
        .map(|(d, p)| p.as_ref().filter(|_| reg.table(&d.table).is_some()).map(|p| node(reg, d, p)))
        .collect();
    safety(&mut ctx, &nodes);
    cascade(&mut ctx, &nodes);
    let failed: BTreeSet<Check> = ctx.failures.iter().map(|f| f.check).collect();
    ValidationReport { checks: Check::ALL.iter().map(|c| (*c, !failed.contains(c))).collect(), failures: ctx.failures }
}

/// A valid choice for `(table, field)`, preferring one the cascade writes.
fn substitute_choice(world: &World, spec: &CascadeSpec, table: &str, field: &str) -> Option<Value> {
    let def = world.registry.field(table, field)?;
    let written = std::iter::once(&spec.action)
        .filter(|a| a.table == table)
        .filter_map(|a| a.payload.get(field))
        .find(|v| v.as_int().is_some_and(|i| def.has_choice(i)));
    written.cloned().or_else(|| def.choices.first().map(|c| Value::Int(c.value)))
}

fn fix_literal(world: &World, spec: &CascadeSpec, table: &str, field: &str, v: &mut Value) -> bool {
    if !bad_choice(&world.registry, table, field, v) {
        return false;
    }
    match substitute_choice(world, spec, table, field) {
        Some(s) => {
            *v = s;
            true
        }
        None => false,
    }
}

/// Apply one round of repairs. Returns `None` when some failure has no repair.
pub fn repair(world: &World, spec: &CascadeSpec, report: &ValidationReport) -> Option<CascadeSpec> {
    if report.failures.iter().any(|f| !f.check.repairable() && !(f.check == Check::C3 && report.failed_checks().contains(&Check::C2))) {
        return None;
    }
    let reg = &world.registry;
    // Literal fixes go first; a rule is only dropped once they are exhausted.
    let fixes_pending = report.failures.iter().any(|f| matches!(f.check, Check::S3 | Check::F3 | Check::X2));
    let drop: BTreeSet<&str> = report
        .failures
        .iter()
        .filter(|f| !fixes_pending && matches!(f.check, Check::C2 | Check::C4 | Check::F2))
        .filter_map(|f| f.rule.as_deref())
        .collect();
    let mut out = spec.clone();
    let mut rules = Vec::new();
    for def in &spec.rules {
        if drop.contains(def.id.as_str()) {
            continue;
        }
        let mut prog = parse_program(&def.source).ok()?;
        let mut changed = false;
        for c in prog.condition.clauses_mut() {
            match c {
                Clause::Cmp { field, op: CmpOp::Eq, rhs: Operand::Lit(v) } | Clause::ChangesTo(field, v) => {
                    changed |= fix_literal(world, spec, &def.table, field, v);
                }
                Clause::In { field, list } => {
                    for v in list.iter_mut() {
                        changed |= fix_literal(world, spec, &def.table, field, v);
                    }
                }
                _ => {}
            }
        }
        let mut stmts = Vec::new();
        for mut s in prog.script.stmts {
            let target = s.target_table().unwrap_or(&def.table).to_string();
            for a in s.assigns_mut() {
                if let Expr::Lit(v) = &mut a.expr {
                    changed |= fix_literal(world, spec, &target, &a.field, v);
                }
            }
            let is_meta = |f: &str| reg.field(&target, f).is_some_and(|d| d.is_metadata);
            let keep = match &mut s {
                Stmt::Set(a) => !is_meta(&a.field),
                Stmt::SetOn { assigns, .. } | Stmt::Insert { assigns, .. } => {
                    let before = assigns.len();
                    assigns.retain(|a| !is_meta(&a.field));
                    changed |= assigns.len() != before;
                    !assigns.is_empty()
                }
            };
            changed |= !keep;
            if keep {
                stmts.push(s);
            }
        }
        if stmts.is_empty() {
            continue;
        }
        let mut def = def.clone();
        if changed {
            def.source = print::program(&Program { condition: prog.condition, script: Script { stmts } });
        }
        rules.push(def);
    }
    let kept: BTreeSet<&str> = rules.iter().map(|r| r.id.as_str()).collect();
    out.conflict_pairs.retain(|[a, b]| kept.contains(a.as_str()) && kept.contains(b.as_str()));
    out.length = rules.len();
    out.rules = rules;
    Some(out)
}
