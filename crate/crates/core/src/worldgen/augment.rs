//! State-space augmentation under seven guardrails.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::WorldgenError;
use crate::schema::{check_record, RecordViolation, METADATA_FIELDS};
use crate::store::{RecordId, StateSnapshot, Store};
use crate::value::{FieldMap, Value};
use crate::world::{Role, World};

/// A work item and its child tasks, without metadata. Task parents are
/// assigned when the bundle is materialized.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub work: FieldMap,
    pub tasks: Vec<FieldMap>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guardrail {
    PoolValidity,
    SchemaConsistency,
    PriorityMatrix,
    ReferentialIntegrity,
    BulkInsertion,
    Deduplication,
    FinalValidation,
}

impl fmt::Display for Guardrail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Guardrail::PoolValidity => "pool-validity",
            Guardrail::SchemaConsistency => "schema-consistency",
            Guardrail::PriorityMatrix => "priority-matrix",
            Guardrail::ReferentialIntegrity => "referential-integrity",
            Guardrail::BulkInsertion => "bulk-insertion",
            Guardrail::Deduplication => "deduplication",
            Guardrail::FinalValidation => "final-validation",
        })
    }
}

fn violation(guardrail: Guardrail, bundle: usize, detail: impl Into<String>) -> WorldgenError {
    WorldgenError::GuardrailViolation { guardrail, bundle, detail: detail.into() }
}

/// Validated entity pools drawn from the world's seed.
struct Pools {
    groups: Vec<(RecordId, Value)>,
    users: Vec<RecordId>,
    cis: Vec<RecordId>,
}

impl Pools {
    fn of(world: &World) -> Pools {
        let ids = |role: Role| -> Vec<&crate::store::Record> {
            world.roles.get(&role).and_then(|t| world.seed.tables.get(t)).map(|v| v.iter().collect()).unwrap_or_default()
        };
        let active = |r: &&crate::store::Record| r.values.get("u_active") != Some(&Value::Bool(false));
        Pools {
            groups: ids(Role::Group)
                .into_iter()
                .filter(active)
                .map(|r| (r.id.clone(), r.values.get("u_name").cloned().unwrap_or(Value::Null)))
                .collect(),
            users: ids(Role::User).into_iter().map(|r| r.id.clone()).collect(),
            cis: ids(Role::Ci).into_iter().map(|r| r.id.clone()).collect(),
        }
    }

    fn has_group(&self, v: &Value) -> bool {
        self.groups.iter().any(|(id, _)| v.as_text() == Some(id))
    }
}

/// The seed's work items as bundles.
pub fn base_bundles(world: &World) -> Vec<Bundle> {
    let strip = |m: &FieldMap| -> FieldMap {
        m.iter()
            .filter(|(k, _)| !METADATA_FIELDS.contains(&k.as_str()) && k.as_str() != "u_parent")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    let tasks = world.seed.tables.get(world.table(Role::Task)).cloned().unwrap_or_default();
    world
        .seed
        .tables
        .get(world.table(Role::Work))
        .into_iter()
        .flatten()
        .map(|w| Bundle {
            work: strip(&w.values),
            tasks: tasks
                .iter()
                .filter(|t| t.values.get("u_parent").and_then(Value::as_text) == Some(&w.id))
                .map(|t| strip(&t.values))
                .collect(),
        })
        .collect()
}

/// `n` distinctly named bases cycled from the seed's work items.
pub fn sample_bases(world: &World, n: usize) -> Vec<Bundle> {
    let base = base_bundles(world);
    if base.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let mut b = base[i % base.len()].clone();
            b.work.insert("u_name".into(), Value::text(format!("Scenario {}", i + 1)));
            b
        })
        .collect()
}

fn in_list(list: &[RecordId], v: &Value) -> bool {
    v.as_text().is_some_and(|s| list.iter().any(|x| x == s))
}

/// Guardrails 1 to 4 on one bundle.
fn check_bundle(world: &World, pools: &Pools, idx: usize, b: &Bundle) -> Result<(), WorldgenError> {
    let (work_t, task_t) = (world.table(Role::Work), world.table(Role::Task));
    let pool_ok = |field: &str, ok: &dyn Fn(&Value) -> bool, m: &FieldMap| match m.get(field) {
        None | Some(Value::Null) => true,
        Some(v) => ok(v),
    };
    let users = |v: &Value| in_list(&pools.users, v);
    let cis = |v: &Value| in_list(&pools.cis, v);
    let groups = |v: &Value| pools.has_group(v);
    if !pool_ok("u_assignment_group", &groups, &b.work)
        || !pool_ok("u_caller", &users, &b.work)
        || !pool_ok("u_ci", &cis, &b.work)
        || !b.tasks.iter().all(|t| pool_ok("u_assignment_group", &groups, t))
    {
        return Err(violation(Guardrail::PoolValidity, idx, "a substituted entity is not in the world's pools"));
    }

    let records = std::iter::once((work_t, &b.work)).chain(b.tasks.iter().map(|t| (task_t, t)));
    for (table, rec) in records.clone() {
        if let Some(k) = rec.keys().find(|k| METADATA_FIELDS.contains(&k.as_str())) {
            return Err(violation(Guardrail::SchemaConsistency, idx, format!("metadata field `{k}` supplied")));
        }
        if table == task_t && rec.contains_key("u_parent") {
            return Err(violation(Guardrail::SchemaConsistency, idx, "task parents are assigned at materialization"));
        }
        let local = check_record(&world.registry, table, rec, &()).map_err(|e| violation(Guardrail::SchemaConsistency, idx, e.to_string()))?;
        if let Some(v) = local.iter().find(|v| !matches!(v, RecordViolation::ReferentialViolation { .. })) {
            return Err(violation(Guardrail::SchemaConsistency, idx, format!("{table}: {v:?}")));
        }
    }

    let int = |f: &str| b.work.get(f).and_then(Value::as_int);
    let expected = int("u_urgency").zip(int("u_impact")).and_then(|(u, i)| world.priority_matrix.priority(u, i));
    match (expected, int("u_priority")) {
        (Some(p), Some(q)) if p == q => {}
        (e, q) => {
            return Err(violation(
                Guardrail::PriorityMatrix,
                idx,
                format!("priority {q:?} does not match the matrix value {e:?}"),
            ))
        }
    }

    for (table, rec) in records {
        let v = check_record(&world.registry, table, rec, &world.seed).map_err(|e| violation(Guardrail::ReferentialIntegrity, idx, e.to_string()))?;
        if let Some(r) = v.iter().find(|v| matches!(v, RecordViolation::ReferentialViolation { .. })) {
            return Err(violation(Guardrail::ReferentialIntegrity, idx, format!("{table}: {r:?}")));
        }
    }
    Ok(())
}

/// Load each bundle into its own copy of the seed with rules suppressed
/// (guardrail 5) and re-validate the loaded records (guardrail 7).
pub fn materialize(world: &World, bundles: &[Bundle]) -> Result<Vec<StateSnapshot>, WorldgenError> {
    let reg = Arc::new(world.registry.clone());
    let (work_t, task_t) = (world.table(Role::Work), world.table(Role::Task));
    bundles
        .iter()
        .enumerate()
        .map(|(idx, b)| {
            let bulk = |e: crate::store::StoreError| violation(Guardrail::BulkInsertion, idx, e.to_string());
            let mut store = Store::from_snapshot(reg.clone(), &world.seed).map_err(bulk)?;
            let work_id = store.bulk_insert(work_t, &b.work).map_err(bulk)?;
            let mut ids = vec![(work_t, work_id.clone())];
            for t in &b.tasks {
                let mut t = t.clone();
                t.insert("u_parent".into(), Value::Text(work_id.clone()));
                ids.push((task_t, store.bulk_insert(task_t, &t).map_err(bulk)?));
            }
            if !store.log().is_empty() {
                return Err(violation(Guardrail::BulkInsertion, idx, "bulk insertion produced audit entries"));
            }
            for (table, id) in ids {
                let rec = store.get(table, &id).expect("just inserted");
                let v = check_record(&world.registry, table, rec, &store)
                    .map_err(|e| violation(Guardrail::FinalValidation, idx, e.to_string()))?;
                if !v.is_empty() {
                    return Err(violation(Guardrail::FinalValidation, idx, format!("{id}: {v:?}")));
                }
            }
            Ok(store.snapshot())
        })
        .collect()
}

/// Expand `bases` by substituting assignment groups, urgency and impact
/// (with priority recomputed), callers and config items from the world's
/// pools. Each base yields itself plus `factor - 1` variants; exact
/// duplicates are removed, so at most `factor × bases.len()` bundles return.
pub fn augment_states(world: &World, bases: &[Bundle], factor: usize, seed: u64) -> Result<Vec<Bundle>, WorldgenError> {
    let pools = Pools::of(world);
    for (i, b) in bases.iter().enumerate() {
        check_bundle(world, &pools, i, b)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Bundle> = Vec::with_capacity(bases.len() * factor);
    for b in bases {
        for k in 0..factor {
            let candidate = if k == 0 { b.clone() } else { variant(world, &pools, b, &mut rng) };
            if !out.contains(&candidate) {
                out.push(candidate);
            }
        }
    }
    for (i, b) in out.iter().enumerate() {
        check_bundle(world, &pools, i, b)?;
        if out[..i].contains(b) {
            return Err(violation(Guardrail::Deduplication, i, "duplicate bundle survived deduplication"));
        }
    }
    materialize(world, &out)?;
    Ok(out)
}

fn variant(world: &World, pools: &Pools, base: &Bundle, rng: &mut ChaCha8Rng) -> Bundle {
    let mut b = base.clone();
    if let Some((gid, gname)) = pools.groups.choose(rng) {
        let gid = Value::Text(gid.clone());
        b.work.insert("u_assignment_group".into(), gid.clone());
        if b.work.contains_key("u_queue") {
            b.work.insert("u_queue".into(), gname.clone());
        }
        for t in &mut b.tasks {
            t.insert("u_assignment_group".into(), gid.clone());
        }
    }
    let (u, i) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let p = world.priority_matrix.priority(u, i).expect("matrix is total");
    b.work.insert("u_urgency".into(), Value::Int(u));
    b.work.insert("u_impact".into(), Value::Int(i));
    b.work.insert("u_priority".into(), Value::Int(p));
    for t in &mut b.tasks {
        t.insert("u_priority".into(), Value::Int(p));
    }
    if let Some(user) = pools.users.choose(rng) {
        b.work.insert("u_caller".into(), Value::Text(user.clone()));
    }
    if let Some(ci) = pools.cis.choose(rng) {
        b.work.insert("u_ci".into(), Value::Text(ci.clone()));
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_world, Automation, Industry, Size, WorldProfile};

    fn world() -> World {
        generate_world(&WorldProfile::new(Industry::Technology, Size::Small, Automation::Light, 0.0, 4)).unwrap()
    }

    #[test]
    fn factor_one_only_dedups() {
        let w = world();
        let mut bases = base_bundles(&w);
        let n = bases.len();
        bases.push(bases[0].clone());
        let out = augment_states(&w, &bases, 1, 0).unwrap();
        assert_eq!(out.len(), n);
        assert_eq!(out[..], bases[..n]);
    }

    #[test]
    fn incoherent_priority_is_rejected() {
        let w = world();
        let mut b = base_bundles(&w).remove(0);
        b.work.insert("u_urgency".into(), Value::Int(1));
        b.work.insert("u_impact".into(), Value::Int(1));
        b.work.insert("u_priority".into(), Value::Int(3));
        let e = augment_states(&w, &[b], 5, 0).unwrap_err();
        assert!(matches!(e, WorldgenError::GuardrailViolation { guardrail: Guardrail::PriorityMatrix, bundle: 0, .. }));
        assert!(e.to_string().contains("priority-matrix"));
    }

    #[test]
    fn foreign_entities_are_rejected() {
        let w = world();
        let mut b = base_bundles(&w).remove(0);
        b.work.insert("u_caller".into(), Value::text("u_engineer_999999"));
        let e = augment_states(&w, &[b.clone()], 2, 0).unwrap_err();
        assert!(matches!(e, WorldgenError::GuardrailViolation { guardrail: Guardrail::PoolValidity, .. }));
        b.work.remove("u_caller");
        b.work.insert("u_state".into(), Value::Int(5));
        let e = augment_states(&w, &[b], 2, 0).unwrap_err();
        assert!(matches!(e, WorldgenError::GuardrailViolation { guardrail: Guardrail::SchemaConsistency, .. }));
    }

    #[test]
    fn ten_bases_times_thirty() {
        let w = world();
        let bases = sample_bases(&w, 10);
        let out = augment_states(&w, &bases, 30, 7).unwrap();
        assert!(out.len() <= 300 && out.len() > 10);
        // Independent re-validation.
        let groups: Vec<&str> = w.seed.tables[w.table(Role::Group)].iter().map(|r| r.id.as_str()).collect();
        for (i, b) in out.iter().enumerate() {
            let g = b.work["u_assignment_group"].as_text().unwrap();
            assert!(groups.contains(&g));
            let (u, imp, p) = (b.work["u_urgency"].as_int().unwrap(), b.work["u_impact"].as_int().unwrap(), b.work["u_priority"].as_int().unwrap());
            assert_eq!(p, (u + imp - 1).min(4));
            assert!(!out[..i].contains(b));
        }
        for snap in materialize(&w, &out).unwrap() {
            assert_eq!(snap.record_count(), w.seed.record_count() + 2);
            let store = Store::from_snapshot(w.registry_arc(), &snap).unwrap();
            assert!(store.log().is_empty());
        }
    }
}
