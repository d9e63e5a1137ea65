//! Tier labels over `(table, field)` keys.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::schema::SchemaRegistry;
use crate::store::{filter_content, AuditEntry, Cause};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    /// Determined by the schema and the action alone.
    T1,
    /// Composed by rules, predictable given the rules.
    T2,
    /// Several rules wrote distinct values; the outcome depends on execution order.
    T3,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::T1, Tier::T2, Tier::T3];
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TierError {
    #[error("audit entry {ordinal} on `{table}.{field}` has no attribution")]
    MissingAttribution { table: String, field: String, ordinal: u64 },
}

/// Tier of every content key of one episode.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TierMap(pub BTreeMap<(String, String), Tier>);

impl TierMap {
    pub fn get(&self, table: &str, field: &str) -> Option<Tier> {
        self.0.get(&(table.to_string(), field.to_string())).copied()
    }

    pub fn count(&self, tier: Tier) -> usize {
        self.0.values().filter(|t| **t == tier).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has(&self, tier: Tier) -> bool {
        self.0.values().any(|t| *t == tier)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &Tier)> {
        self.0.iter()
    }
}

#[derive(Serialize, Deserialize)]
struct TierEntry {
    table: String,
    field: String,
    tier: Tier,
}

impl Serialize for TierMap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|((table, field), tier)| TierEntry {
            table: table.clone(),
            field: field.clone(),
            tier: *tier,
        }))
    }
}

impl<'de> Deserialize<'de> for TierMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let list = Vec::<TierEntry>::deserialize(d)?;
        Ok(TierMap(list.into_iter().map(|e| ((e.table, e.field), e.tier)).collect()))
    }
}

/// Label the content keys of `audits`.
///
/// A key is T3 when two distinct rules wrote distinct values to it. Otherwise
/// it is T1 when it lies on the action's table and the action or a schema
/// default wrote it. Every other key is T2.
pub fn label_tiers(audits: &[AuditEntry], action_table: &str, registry: &SchemaRegistry) -> Result<TierMap, TierError> {
    let content = filter_content(audits, registry);
    let mut by_key: BTreeMap<(String, String), Vec<&AuditEntry>> = BTreeMap::new();
    for e in &content {
        if e.cause == Cause::Unattributed {
            return Err(TierError::MissingAttribution {
                table: e.table.clone(),
                field: e.field.clone(),
                ordinal: e.ordinal,
            });
        }
        by_key.entry((e.table.clone(), e.field.clone())).or_default().push(e);
    }
    let mut out = BTreeMap::new();
    for (key, entries) in by_key {
        let contested = entries.iter().enumerate().any(|(i, a)| {
            entries[i + 1..].iter().any(|b| {
                matches!((a.cause.rule_id(), b.cause.rule_id()), (Some(x), Some(y)) if x != y) && a.new_value != b.new_value
            })
        });
        let schema_determined = key.0 == action_table
            && entries.iter().any(|e| matches!(e.cause, Cause::Action | Cause::SchemaDefault));
        let tier = if contested {
            Tier::T3
        } else if schema_determined {
            Tier::T1
        } else {
            Tier::T2
        };
        out.insert(key, tier);
    }
    Ok(TierMap(out))
}
