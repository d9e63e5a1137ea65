//! A world: schemas, seed state, rules, SLAs and ACLs, plus the engine they induce.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{BusinessRule, Engine, EngineError, RuleDef, SlaDefinition};
use crate::schema::SchemaRegistry;
use crate::store::{StateSnapshot, Store};
use crate::value::Value;
use crate::worldgen::WorldProfile;

/// Table roles every generated world fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Group,
    User,
    Ci,
    Work,
    Task,
    Escalation,
    Notification,
    Approval,
    SlaTimer,
}

impl Role {
    pub const ALL: [Role; 9] = [
        Role::Group,
        Role::User,
        Role::Ci,
        Role::Work,
        Role::Task,
        Role::Escalation,
        Role::Notification,
        Role::Approval,
        Role::SlaTimer,
    ];
}

/// Readability of tables through the discovery query interface.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AclPolicy {
    /// Governs the rules and SLA-definition tables.
    pub rules_readable: bool,
    /// Per data table; absent tables are readable.
    pub tables: BTreeMap<String, bool>,
}

impl Default for AclPolicy {
    fn default() -> Self {
        AclPolicy { rules_readable: true, tables: BTreeMap::new() }
    }
}

impl AclPolicy {
    pub fn table_readable(&self, table: &str) -> bool {
        self.tables.get(table).copied().unwrap_or(true)
    }

    pub fn block_rules(&mut self) {
        self.rules_readable = false;
    }
}

/// Priority for each (urgency, impact) in 1..=3.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriorityMatrix(pub [[i64; 3]; 3]);

impl PriorityMatrix {
    /// `min(4, urgency + impact - 1)`.
    pub fn standard() -> Self {
        let mut m = [[0; 3]; 3];
        for (u, row) in m.iter_mut().enumerate() {
            for (i, cell) in row.iter_mut().enumerate() {
                *cell = (u as i64 + i as i64 + 1).min(4);
            }
        }
        PriorityMatrix(m)
    }

    pub fn priority(&self, urgency: i64, impact: i64) -> Option<i64> {
        let (u, i) = (usize::try_from(urgency - 1).ok()?, usize::try_from(impact - 1).ok()?);
        self.0.get(u)?.get(i).copied()
    }

    /// Every cell in 1..=4 and priority never decreases as urgency or impact rise.
    pub fn is_valid(&self) -> bool {
        let m = &self.0;
        let in_range = m.iter().flatten().all(|p| (1..=4).contains(p));
        // Lower numbers are more urgent, so values must not decrease along rows or columns.
        let monotone = (0..3).all(|u| (0..3).all(|i| (u == 0 || m[u][i] >= m[u - 1][i]) && (i == 0 || m[u][i] >= m[u][i - 1])));
        in_range && monotone
    }
}

/// Two rules injected to write distinct values to one field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictPair {
    pub table: String,
    pub field: String,
    pub rules: [String; 2],
    pub values: [Value; 2],
    pub orders: [u32; 2],
    /// Choice field whose change triggers both rules.
    pub trigger_field: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub profile: WorldProfile,
    #[serde(rename = "schemas")]
    pub registry: SchemaRegistry,
    #[serde(rename = "seed_records")]
    pub seed: StateSnapshot,
    pub rules: Vec<RuleDef>,
    pub slas: Vec<SlaDefinition>,
    #[serde(rename = "acls")]
    pub acl: AclPolicy,
    pub priority_matrix: PriorityMatrix,
    pub conflict_pairs: Vec<ConflictPair>,
    pub roles: BTreeMap<Role, String>,
}

/// A pair of rules writing the same field, other than SLA timers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conflict {
    pub rules: (String, String),
    pub table: String,
    pub field: String,
}

impl World {
    pub fn table(&self, role: Role) -> &str {
        &self.roles[&role]
    }

    pub fn registry_arc(&self) -> Arc<SchemaRegistry> {
        Arc::new(self.registry.clone())
    }

    /// Engine over the seed state with the world's rules and SLAs.
    pub fn engine(&self) -> Result<Engine, EngineError> {
        self.engine_with(&self.rules, &self.slas)
    }

    /// Engine over the seed state with an explicit rule and SLA set.
    pub fn engine_with(&self, rules: &[RuleDef], slas: &[SlaDefinition]) -> Result<Engine, EngineError> {
        let reg = self.registry_arc();
        let store = Store::from_snapshot(reg.clone(), &self.seed)?;
        let mut e = Engine::new(reg, store);
        for p in &self.conflict_pairs {
            e.waive_conflict(&p.rules[0], &p.rules[1]);
        }
        for r in rules {
            e.register_rule(r.clone())?;
        }
        for s in slas {
            e.register_sla(s)?;
        }
        Ok(e)
    }

    /// Active non-SLA rule pairs whose non-creation write sets overlap.
    pub fn detect_conflicts(&self) -> Result<Vec<Conflict>, EngineError> {
        let compiled = self
            .rules
            .iter()
            .filter(|r| r.active)
            .map(|r| BusinessRule::compile(r.clone(), &self.registry))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::new();
        for (i, a) in compiled.iter().enumerate() {
            for b in &compiled[i + 1..] {
                for (t, f) in a.update_keys().intersection(&b.update_keys()) {
                    out.push(Conflict {
                        rules: (a.def.id.clone(), b.def.id.clone()),
                        table: t.to_string(),
                        field: f.to_string(),
                    });
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_matrix_is_total_and_monotone() {
        let m = PriorityMatrix::standard();
        assert!(m.is_valid());
        assert_eq!(m.priority(1, 1), Some(1));
        assert_eq!(m.priority(3, 3), Some(4));
        assert_eq!(m.priority(0, 1), None);
        let mut bad = m.clone();
        bad.0[2][2] = 1;
        assert!(!bad.is_valid());
    }
}
