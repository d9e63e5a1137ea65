use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::engine::{Operation, Phase};
use crate::schema::FieldKind;
use crate::store::{AuditEntry, Cause};
use crate::value::{fields, Value};
use crate::world::Role;
use crate::worldgen::{generate_world, Automation, Industry, Size, WorldProfile};

fn world(industry: Industry, density: f64, seed: u64) -> World {
    generate_world(&WorldProfile::new(industry, Size::Midmarket, Automation::Heavy, density, seed)).unwrap()
}

fn plain() -> World {
    world(Industry::Technology, 0.0, 7)
}

fn build(w: &World, spec: &CascadeSpec) -> Result<Episode, Rejected> {
    build_episode(w, "w", "ep", spec, DEFAULT_MAX_REPAIRS)
}

/// An update of `u_state` on the work table's first seed record, with no rules yet.
fn hand_spec(w: &World) -> (CascadeSpec, Value) {
    let work = w.table(Role::Work);
    let target = &w.seed.tables[work][0];
    let current = target.values["u_state"].as_int().unwrap();
    let next = Value::Int(if current == 2 { 3 } else { 2 });
    let spec = CascadeSpec {
        topology: Topology::Complete,
        length: 0,
        action: Action::update(work, &target.id, fields([("u_state", next.clone())])),
        rules: Vec::new(),
        support: Vec::new(),
        conflict_pairs: Vec::new(),
        followups: Vec::new(),
    };
    (spec, next)
}

fn after(id: &str, table: &str, op: Operation, order: u32, src: &str) -> RuleDef {
    RuleDef::new(id, table, op, Phase::After, order, src)
}

fn rules_by_order(ep: &Episode) -> Vec<&RuleDef> {
    let mut v: Vec<&RuleDef> = ep.rules.iter().collect();
    v.sort_by_key(|r| (r.order, r.id.clone()));
    v
}

fn first_depth(ep: &Episode, rule: &str) -> u32 {
    ep.cascade_path.steps().iter().filter(|s| s.rule_id == rule).map(|s| s.depth).min().unwrap()
}

#[test]
fn flat_length_three_fires_every_rule_from_the_action() {
    let w = plain();
    let spec = sample_cascade_with(&w, Topology::Flat, Some(3), 11, &SamplerConfig::default()).unwrap();
    assert_eq!(spec.rules.len(), 3);
    let ep = build(&w, &spec).unwrap();
    assert_eq!(ep.cascade_path.rule_ids().len(), 3);
    for r in &ep.rules {
        assert_eq!(r.table, ep.action.table);
        assert_eq!(first_depth(&ep, &r.id), 1);
    }
}

#[test]
fn linear_length_four_chains_over_distinct_tables() {
    let w = plain();
    for seed in 0..8 {
        let spec = sample_cascade_with(&w, Topology::Linear, Some(4), seed, &SamplerConfig::default()).unwrap();
        assert!(spec.conflict_pairs.is_empty());
        let ep = build(&w, &spec).unwrap();
        let ordered = rules_by_order(&ep);
        let tables: BTreeSet<&str> = ordered.iter().map(|r| r.table.as_str()).collect();
        assert_eq!(tables.len(), 4);
        for (i, r) in ordered.iter().enumerate() {
            assert_eq!(first_depth(&ep, &r.id), i as u32 + 1, "seed {seed}: {} out of chain", r.id);
        }
    }
}

#[test]
fn write_back_cycle_fails_acyclicity_and_is_repaired_by_dropping() {
    let w = plain();
    let (work, task) = (w.table(Role::Work).to_string(), w.table(Role::Task).to_string());
    let (mut spec, _) = hand_spec(&w);
    spec.rules = vec![
        after("a", &work, Operation::Update, 100, &format!(r#"WHEN changes(u_state) DO SET_ON {task} WHERE u_name == "Task 1": u_note = "x""#)),
        after("b", &task, Operation::Update, 200, &format!(r#"WHEN changes(u_note) DO SET_ON {work} WHERE u_name == "zz": u_state = 7"#)),
        after("c", &work, Operation::Update, 300, r#"WHEN changes(u_state) DO SET u_work_notes = "seen""#),
    ];
    let report = validate_cascade(&w, &spec);
    assert!(!report.check(Check::C2));
    assert_eq!(report.checks.len(), 14);
    let fixed = repair(&w, &spec, &report).unwrap();
    assert_eq!(fixed.rules.len(), 2);
    assert!(!fixed.rules.iter().any(|r| r.id == "b"));
    assert!(validate_cascade(&w, &fixed).check(Check::C2));
    // Two rules remain, below the minimum length.
    let err = build(&w, &spec).unwrap_err();
    assert_eq!(err.reason, RejectReason::TooShort { rules: 2 });
}

#[test]
fn invalid_choice_literal_is_substituted() {
    let w = plain();
    let work = w.table(Role::Work).to_string();
    let (mut spec, v) = hand_spec(&w);
    spec.rules = vec![
        after("a", &work, Operation::Update, 100, r#"WHEN changes_to(u_state, 99) DO SET u_work_notes = "a""#),
        after("b", &work, Operation::Update, 200, &format!(r#"WHEN changes_to(u_state, {v}) DO SET u_resolution = "b""#)),
        after("c", &work, Operation::Update, 300, &format!("WHEN changes_to(u_state, {v}) DO SET u_reassign_count = 99")),
    ];
    let report = validate_cascade(&w, &spec);
    assert!(!report.check(Check::F3));
    assert!(report.check(Check::S3));
    let ep = build(&w, &spec).unwrap();
    assert!(ep.rules[0].source.contains(&format!("changes_to(u_state, {v})")));
    assert_eq!(ep.cascade_path.rule_ids().len(), 3);
}

#[test]
fn assignment_choice_and_metadata_writes_are_repaired() {
    let w = plain();
    let work = w.table(Role::Work).to_string();
    let (mut spec, v) = hand_spec(&w);
    spec.rules = vec![
        after("a", &work, Operation::Update, 100, &format!("WHEN changes_to(u_state, {v}) DO SET u_impact = 42")),
        after("b", &work, Operation::Update, 200, &format!(r#"WHEN changes_to(u_state, {v}) DO SET updated_at = 5; SET u_resolution = "b""#)),
        after("c", &work, Operation::Update, 300, &format!(r#"WHEN changes_to(u_state, {v}) DO SET u_work_notes = "c""#)),
    ];
    let report = validate_cascade(&w, &spec);
    assert!(!report.check(Check::S3));
    assert!(!report.check(Check::X2));
    let ep = build(&w, &spec).unwrap();
    assert!(!ep.rules[1].source.contains("updated_at"));
    assert!(!ep.rules[0].source.contains("42"));
}

#[test]
fn irreparable_failures_reject_with_the_report() {
    let w = plain();
    let work = w.table(Role::Work).to_string();
    let (mut spec, v) = hand_spec(&w);
    spec.rules = (0..3)
        .map(|i| {
            let src = format!(r#"WHEN changes_to(u_state, {v}) DO INSERT u_missing {{ u_name = "x" }}"#);
            after(&format!("r{i}"), &work, Operation::Update, 100 * (i + 1), &src)
        })
        .collect();
    let err = build(&w, &spec).unwrap_err();
    assert_eq!(err.reason, RejectReason::Validation);
    assert!(!err.report.check(Check::S1));
}

#[test]
fn unwaived_overlap_fails_safety() {
    let w = plain();
    let work = w.table(Role::Work).to_string();
    let (mut spec, v) = hand_spec(&w);
    spec.rules = ["x", "y", "z"]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let src = format!(r#"WHEN changes_to(u_state, {v}) DO SET u_work_notes = "{s}""#);
            after(&format!("r{i}"), &work, Operation::Update, 100 * (i as u32 + 1), &src)
        })
        .collect();
    assert!(!validate_cascade(&w, &spec).check(Check::X1));
    spec.conflict_pairs = vec![["r0".into(), "r1".into()], ["r0".into(), "r2".into()], ["r1".into(), "r2".into()]];
    let report = validate_cascade(&w, &spec);
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn static_depth_beyond_the_limit_is_rejected() {
    let w = plain();
    let (mut spec, v) = hand_spec(&w);
    let work = spec.action.table.clone();
    // Ten rules, each watching the field its predecessor writes.
    let chain: Vec<(String, String, &str)> = w
        .registry
        .tables()
        .flat_map(|t| {
            t.fields().iter().filter(|f| f.name != "u_name").filter_map(move |f| match f.kind {
                FieldKind::Integer => Some((t.name.clone(), f.name.clone(), "1")),
                FieldKind::Text => Some((t.name.clone(), f.name.clone(), "\"z\"")),
                _ => None,
            })
        })
        .take(10)
        .collect();
    assert_eq!(chain.len(), 10);
    let mut rules = Vec::new();
    for (i, (t, f, lit)) in chain.iter().enumerate() {
        let (table, cond) = match i {
            0 => (work.clone(), format!("changes_to(u_state, {v})")),
            _ => (chain[i - 1].0.clone(), format!("changes({})", chain[i - 1].1)),
        };
        let src = format!(r#"WHEN {cond} DO SET_ON {t} WHERE u_name == "q": {f} = {lit}"#);
        rules.push(after(&format!("r{i}"), &table, Operation::Update, 100 * (i as u32 + 1), &src));
    }
    spec.rules = rules;
    let report = validate_cascade(&w, &spec);
    assert!(report.check(Check::C2), "{:?}", report.failures);
    assert!(!report.check(Check::C3), "{:?}", report.failures);
    assert_eq!(build(&w, &spec).unwrap_err().reason, RejectReason::Validation);
}

#[test]
fn reused_store_is_reset_between_episodes() {
    let w = world(Industry::Healthcare, 0.5, 4);
    let mut store = Store::from_snapshot(w.registry_arc(), &w.seed).unwrap();
    for i in 0..12u64 {
        let spec = sample_cascade(&w, Topology::ALL[i as usize % 3], i).unwrap();
        let id = format!("ep{i}");
        let shared = build_episode_on(&w, "w", &id, &spec, DEFAULT_MAX_REPAIRS, &mut store);
        assert_eq!(store.snapshot(), w.seed);
        let fresh = build_episode(&w, "w", &id, &spec, DEFAULT_MAX_REPAIRS);
        assert_eq!(shared, fresh, "episode {i} depends on what ran before it");
    }
}

#[test]
fn episodes_run_only_their_own_rules() {
    let w = world(Industry::Retail, 0.0, 5);
    let bench = generate_bench(&w, "w", &BenchConfig { episodes: 15, ..BenchConfig::default() }).unwrap();
    let world_ids: BTreeSet<&str> = w.rules.iter().map(|r| r.id.as_str()).collect();
    for ep in &bench.episodes {
        let own: BTreeSet<&str> = ep.rules.iter().map(|r| r.id.as_str()).collect();
        for s in ep.cascade_path.steps() {
            assert!(own.contains(s.rule_id.as_str()));
            assert!(!world_ids.contains(s.rule_id.as_str()));
            assert_ne!(s.table, crate::engine::SLA_TABLE);
        }
    }
}

#[test]
fn tiers_cover_audit_keys_exactly_once() {
    let w = world(Industry::Finance, 0.5, 6);
    let bench = generate_bench(&w, "w", &BenchConfig { episodes: 30, ..BenchConfig::default() }).unwrap();
    assert!(bench.episodes.len() >= 25);
    for ep in &bench.episodes {
        for step in ep.steps(5) {
            let keys: BTreeSet<(String, String)> = step.audits.iter().map(|a| (a.table.clone(), a.field.clone())).collect();
            let tiered: BTreeSet<(String, String)> = step.tiers.iter().map(|(k, _)| k.clone()).collect();
            assert_eq!(keys, tiered);
            let total: usize = Tier::ALL.iter().map(|t| step.tiers.count(*t)).sum();
            assert_eq!(total, keys.len());
        }
    }
}

#[test]
fn a_sampled_conflict_pair_yields_exactly_one_contested_key() {
    let w = plain();
    let cfg = SamplerConfig { conflict_pair: 1.0, ..SamplerConfig::default() };
    for (i, topology) in [Topology::Flat, Topology::Complete].into_iter().cycle().take(10).enumerate() {
        let spec = sample_cascade_with(&w, topology, None, i as u64, &cfg).unwrap();
        assert_eq!(spec.conflict_pairs.len(), 1);
        let ep = build(&w, &spec).unwrap();
        assert_eq!(ep.tiers.count(Tier::T3), 1, "{:?}", ep.tiers);
        let [a, b] = &ep.conflict_pairs[0];
        let order = |id: &str| ep.rules.iter().find(|r| r.id == id).unwrap().order;
        assert!(order(a) < order(b));
    }
}

#[test]
fn world_conflict_pairs_surface_as_contested_keys() {
    let w = world(Industry::Manufacturing, 1.0, 8);
    assert!(!w.conflict_pairs.is_empty());
    for (i, pair) in w.conflict_pairs.iter().enumerate() {
        let spec = sample_conflict_probe(&w, pair, i as u64, &SamplerConfig::default()).unwrap();
        let ep = build(&w, &spec).unwrap();
        assert_eq!(ep.tiers.get(&pair.table, &pair.field), Some(Tier::T3));
    }
    let cfg = BenchConfig { episodes: w.conflict_pairs.len(), ..BenchConfig::default() };
    let bench = generate_bench(&w, "w", &cfg).unwrap();
    assert_eq!(bench.episodes.len(), w.conflict_pairs.len());
    for (ep, pair) in bench.episodes.iter().zip(&w.conflict_pairs) {
        assert_eq!(ep.tiers.get(&pair.table, &pair.field), Some(Tier::T3));
    }
}

#[test]
fn manifest_tallies_match_episodes() {
    let w = world(Industry::PublicSector, 0.5, 9);
    let bench = generate_bench(&w, "w", &BenchConfig { episodes: 24, seed: 3, ..BenchConfig::default() }).unwrap();
    let m = &bench.manifest;
    assert_eq!(m.attempted, 24);
    assert_eq!(m.episodes + m.rejected, 24);
    assert_eq!(m.topologies.values().sum::<usize>(), bench.episodes.len());
    assert_eq!(m.lengths.values().sum::<usize>(), bench.episodes.len());
    let t3: usize = bench.episodes.iter().map(|e| e.tiers.count(Tier::T3)).sum();
    assert_eq!(m.tier_keys["T3"], t3);
    assert!(bench.episodes.iter().all(|e| (3..=7).contains(&e.length)));
}

#[test]
fn bench_generation_is_deterministic_and_round_trips() {
    let w = world(Industry::Technology, 0.5, 10);
    let cfg = BenchConfig { episodes: 9, seed: 4, ..BenchConfig::default() };
    let a = generate_bench(&w, "w", &cfg).unwrap();
    let b = generate_bench(&w, "w", &cfg).unwrap();
    assert_eq!(a, b);
    for ep in &a.episodes {
        let line = crate::value::canonical_json(ep).unwrap();
        let back: Episode = serde_json::from_str(&line).unwrap();
        assert_eq!(&back, ep);
    }
}

#[test]
fn linear_needs_two_tables() {
    let mut w = plain();
    let mut reg = crate::schema::SchemaRegistry::new();
    let solo = crate::schema::TableSchema::new("u_solo", vec![crate::schema::FieldDef::choice("u_state", &[(1, "a"), (2, "b")])]);
    reg.define_table(solo).unwrap();
    w.registry = reg;
    assert!(matches!(sample_cascade(&w, Topology::Linear, 1), Err(BenchError::InsufficientTables { .. })));
}

fn entry(table: &str, field: &str, new: i64, cause: Cause, ordinal: u64) -> AuditEntry {
    AuditEntry {
        table: table.into(),
        field: field.into(),
        old_value: Some(Value::Int(0)),
        new_value: Value::Int(new),
        record_id: format!("{table}_000001"),
        cause,
        depth: 1,
        ordinal,
        fanout: None,
    }
}

#[test]
fn tier_labels_follow_attribution() {
    let w = plain();
    let work = w.table(Role::Work);
    let task = w.table(Role::Task);
    let rule = |s: &str| Cause::Rule(s.into());
    let audits = vec![
        entry(work, "u_state", 2, Cause::Action, 0),
        entry(work, "u_impact", 1, Cause::SchemaDefault, 1),
        entry(work, "u_reassign_count", 3, rule("a"), 2),
        entry(task, "u_state", 2, Cause::Action, 3),
        entry(work, "u_urgency", 1, rule("a"), 4),
        entry(work, "u_urgency", 2, rule("b"), 5),
        entry(work, "u_priority", 1, rule("a"), 6),
        entry(work, "u_priority", 1, rule("b"), 7),
    ];
    let t = label_tiers(&audits, work, &w.registry).unwrap();
    assert_eq!(t.get(work, "u_state"), Some(Tier::T1));
    assert_eq!(t.get(work, "u_impact"), Some(Tier::T1));
    assert_eq!(t.get(work, "u_reassign_count"), Some(Tier::T2));
    assert_eq!(t.get(task, "u_state"), Some(Tier::T2));
    assert_eq!(t.get(work, "u_urgency"), Some(Tier::T3));
    assert_eq!(t.get(work, "u_priority"), Some(Tier::T2));
    let bad = vec![entry(work, "u_state", 2, Cause::Unattributed, 9)];
    assert_eq!(
        label_tiers(&bad, work, &w.registry),
        Err(TierError::MissingAttribution { table: work.into(), field: "u_state".into(), ordinal: 9 })
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampled_cascades_validate_and_fire_as_their_topology_says(seed in any::<u64>(), t in 0usize..3, ind in 0usize..6) {
        let w = world(Industry::ALL[ind], 0.5, seed % 7);
        let topology = Topology::ALL[t];
        let spec = sample_cascade(&w, topology, seed).unwrap();
        let report = validate_cascade(&w, &spec);
        prop_assert!(report.passed(), "{:?}", report.failures);
        let ep = build(&w, &spec).unwrap();
        prop_assert!((3..=7).contains(&ep.length));
        prop_assert_eq!(ep.cascade_path.rule_ids().len(), ep.length);
        prop_assert!(ep.cascade_path.max_depth() <= crate::engine::DEFAULT_DEPTH_LIMIT);
        match topology {
            Topology::Flat => prop_assert!(ep.rules.iter().all(|r| first_depth(&ep, &r.id) == 1)),
            Topology::Linear => {
                for (i, r) in rules_by_order(&ep).iter().enumerate() {
                    prop_assert_eq!(first_depth(&ep, &r.id), i as u32 + 1);
                }
            }
            Topology::Complete => prop_assert!(ep.cascade_path.steps().iter().all(|s| s.depth >= 1)),
        }
        for a in ep.audits.iter() {
            match &a.cause {
                Cause::Rule(id) => prop_assert!(ep.rules.iter().any(|r| &r.id == id)),
                Cause::Action | Cause::SchemaDefault => prop_assert_eq!(&a.table, &ep.action.table),
                Cause::Unattributed => prop_assert!(false, "unattributed entry"),
            }
        }
    }

    #[test]
    fn tier_labels_match_an_independent_oracle(
        raw in proptest::collection::vec((0usize..3, 0usize..3, 0i64..3, 0usize..4), 0..24)
    ) {
        let w = plain();
        let tables = [w.table(Role::Work).to_string(), w.table(Role::Task).to_string(), w.table(Role::Ci).to_string()];
        let names = ["u_state", "u_name", "u_priority"];
        let mut audits = Vec::new();
        for (i, (t, f, v, c)) in raw.iter().enumerate() {
            let table = &tables[*t];
            let Some(def) = w.registry.field(table, names[*f]) else { continue };
            let cause = match c {
                0 => Cause::Action,
                1 => Cause::SchemaDefault,
                2 => Cause::Rule("a".into()),
                _ => Cause::Rule("b".into()),
            };
            let mut e = entry(table, &def.name, *v, cause, i as u64);
            if def.kind == FieldKind::Text {
                e.new_value = Value::text(format!("v{v}"));
            }
            audits.push(e);
        }
        let got = label_tiers(&audits, &tables[0], &w.registry).unwrap();
        let keys: BTreeSet<(String, String)> = audits.iter().map(|a| (a.table.clone(), a.field.clone())).collect();
        prop_assert_eq!(got.len(), keys.len());
        for (t, f) in keys {
            let on_key: Vec<&AuditEntry> = audits.iter().filter(|a| a.table == t && a.field == f).collect();
            let vals = |id: &str| -> BTreeSet<&Value> {
                on_key.iter().filter(|a| a.cause == Cause::Rule(id.into())).map(|a| &a.new_value).collect()
            };
            let (a_vals, b_vals) = (vals("a"), vals("b"));
            let contested = a_vals.iter().any(|x| b_vals.iter().any(|y| x != y));
            let direct = t == tables[0] && on_key.iter().any(|a| matches!(a.cause, Cause::Action | Cause::SchemaDefault));
            let want = if contested { Tier::T3 } else if direct { Tier::T1 } else { Tier::T2 };
            prop_assert_eq!(got.get(&t, &f), Some(want));
        }
    }
}
