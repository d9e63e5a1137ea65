//! Scoring predicted deltas against audit ground truth.
//!
//! Both sides are first filtered to content keys, then collapsed to the net
//! change per `(table, record, field)`: the first old value and the last new
//! value. Keys drop record identity. The strict key is
//! `(table, field, normalized value)`, the coarse key is `(table, field)`.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchgen::{Tier, TierMap};
use crate::engine::CascadePath;
use crate::predict::PredictedEntry;
use crate::schema::SchemaRegistry;
use crate::store::{filter_content, AuditEntry, Cause, FieldKey};
use crate::value::Value;

/// Default bootstrap resamples.
pub const DEFAULT_RESAMPLES: usize = 2000;
/// Rules at or above this order fall in the deep band regardless of depth.
pub const DEEP_ORDER: u32 = 400;
/// Causal depth at which the deep band starts.
pub const DEEP_DEPTH: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("truth key `{table}.{field}` has no tier")]
    TierCoverageGap { table: String, field: String },
    #[error("bootstrap over an empty sample")]
    EmptySample,
    #[error("bootstrap needs at least one resample")]
    NoResamples,
}

pub type StrictKey = (String, String, String);
pub type TfKey = (String, String);

/// Whether keys are sets (the default) or multisets counting records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub multiplicity: bool,
}

/// Net change of one field of one record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetChange<M> {
    pub table: String,
    pub record_id: String,
    pub field: String,
    pub old_value: Option<Value>,
    pub new_value: Value,
    /// The entry that wrote the final value.
    pub last: M,
}

impl<M> NetChange<M> {
    pub fn strict_key(&self) -> StrictKey {
        (self.table.clone(), self.field.clone(), self.new_value.normalized())
    }

    pub fn tf_key(&self) -> TfKey {
        (self.table.clone(), self.field.clone())
    }
}

/// Common view of truth and predicted entries.
pub trait Change: FieldKey + Clone {
    fn record_id(&self) -> &str;
    fn old_value(&self) -> Option<&Value>;
    fn new_value(&self) -> &Value;
}

impl Change for AuditEntry {
    fn record_id(&self) -> &str {
        &self.record_id
    }
    fn old_value(&self) -> Option<&Value> {
        self.old_value.as_ref()
    }
    fn new_value(&self) -> &Value {
        &self.new_value
    }
}

impl Change for PredictedEntry {
    fn record_id(&self) -> &str {
        &self.record_id
    }
    fn old_value(&self) -> Option<&Value> {
        self.old_value.as_ref()
    }
    fn new_value(&self) -> &Value {
        &self.new_value
    }
}

/// Filter to content keys and collapse to net changes in first-touch order.
/// An update whose net effect restores the old value is dropped.
pub fn collapse<C: Change>(entries: &[C], registry: &SchemaRegistry) -> Vec<NetChange<C>> {
    let mut index: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    let mut out: Vec<NetChange<C>> = Vec::new();
    for e in filter_content(entries, registry) {
        let k = (e.table().to_string(), e.record_id().to_string(), e.field().to_string());
        match index.get(&k) {
            Some(&i) => {
                out[i].new_value = e.new_value().clone();
                out[i].last = e;
            }
            None => {
                index.insert(k, out.len());
                out.push(NetChange {
                    table: e.table().to_string(),
                    record_id: e.record_id().to_string(),
                    field: e.field().to_string(),
                    old_value: e.old_value().cloned(),
                    new_value: e.new_value().clone(),
                    last: e,
                });
            }
        }
    }
    out.retain(|c| c.old_value.as_ref() != Some(&c.new_value));
    out
}

fn counts<K: Ord>(keys: impl IntoIterator<Item = K>, multiplicity: bool) -> BTreeMap<K, usize> {
    let mut m = BTreeMap::new();
    for k in keys {
        let c = m.entry(k).or_insert(0);
        *c = if multiplicity { *c + 1 } else { 1 };
    }
    m
}

/// IoU of two (multi)sets given as key counts. IoU of two empty sets is 1.
pub fn iou<K: Ord + Hash + Clone>(p: &BTreeMap<K, usize>, g: &BTreeMap<K, usize>) -> f64 {
    let keys: BTreeSet<&K> = p.keys().chain(g.keys()).collect();
    if keys.is_empty() {
        return 1.0;
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for k in keys {
        let a = p.get(k).copied().unwrap_or(0);
        let b = g.get(k).copied().unwrap_or(0);
        inter += a.min(b);
        union += a.max(b);
    }
    inter as f64 / union as f64
}

/// Overall scores for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub iou_strict: f64,
    pub iou_tf: f64,
}

pub fn score(predicted: &[PredictedEntry], truth: &[AuditEntry], registry: &SchemaRegistry) -> Score {
    score_with(predicted, truth, registry, ScoreOptions::default())
}

pub fn score_with(predicted: &[PredictedEntry], truth: &[AuditEntry], registry: &SchemaRegistry, opts: ScoreOptions) -> Score {
    let p = collapse(predicted, registry);
    let g = collapse(truth, registry);
    let m = opts.multiplicity;
    Score {
        iou_strict: iou(&counts(p.iter().map(NetChange::strict_key), m), &counts(g.iter().map(NetChange::strict_key), m)),
        iou_tf: iou(&counts(p.iter().map(NetChange::tf_key), m), &counts(g.iter().map(NetChange::tf_key), m)),
    }
}

/// One stratum: its IoU and key counts, or nothing when the truth has no key
/// of that tier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub iou: f64,
    pub truth_keys: usize,
    pub predicted_keys: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub all: Stratum,
    pub tiers: BTreeMap<Tier, Option<Stratum>>,
}

impl Strata {
    pub fn tier(&self, t: Tier) -> Option<&Stratum> {
        self.tiers.get(&t).and_then(Option::as_ref)
    }
}

/// Per-tier scores. T1 and T2 are scored on `(table, field)` keys, T3 on strict
/// keys. A predicted key joins the stratum of its truth-side tier; predicted
/// keys absent from the truth count only against the ALL stratum, which is
/// scored on `(table, field)` keys so its truth count is the tier-key total.
pub fn stratify(
    predicted: &[PredictedEntry],
    truth: &[AuditEntry],
    tiers: &TierMap,
    registry: &SchemaRegistry,
) -> Result<Strata, MetricsError> {
    let p = collapse(predicted, registry);
    let g = collapse(truth, registry);
    for c in &g {
        if tiers.get(&c.table, &c.field).is_none() {
            return Err(MetricsError::TierCoverageGap { table: c.table.clone(), field: c.field.clone() });
        }
    }
    let p_tf = counts(p.iter().map(NetChange::tf_key), false);
    let g_tf = counts(g.iter().map(NetChange::tf_key), false);
    let all = Stratum { iou: iou(&p_tf, &g_tf), truth_keys: g_tf.len(), predicted_keys: p_tf.len() };
    let mut out = BTreeMap::new();
    for tier in Tier::ALL {
        let (pk, gk) = (tier_keys(&p, tiers, tier), tier_keys(&g, tiers, tier));
        let stratum = (!gk.is_empty()).then(|| Stratum { iou: iou(&pk, &gk), truth_keys: gk.len(), predicted_keys: pk.len() });
        out.insert(tier, stratum);
    }
    Ok(Strata { all, tiers: out })
}

/// Keys of `tier`: strict for T3, `(table, field)` otherwise.
fn tier_keys<M>(changes: &[NetChange<M>], tiers: &TierMap, tier: Tier) -> BTreeMap<StrictKey, usize> {
    let keys = changes.iter().filter(|c| tiers.get(&c.table, &c.field) == Some(tier)).map(|c| {
        if tier == Tier::T3 {
            c.strict_key()
        } else {
            (c.table.clone(), c.field.clone(), String::new())
        }
    });
    counts(keys, false)
}

/// Causal band of a truth entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    /// Written by the action itself or its schema defaults.
    Action,
    /// Depth 1 to 2 and order below the deep threshold.
    Shallow,
    /// Depth 3 or more, or order at or above the deep threshold.
    Deep,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Action, Band::Shallow, Band::Deep];
}

fn rule_order(path: &CascadePath, rule: &str) -> Option<u32> {
    path.steps().iter().find(|s| s.rule_id == rule).map(|s| s.order)
}

/// Band of an entry given its cause, depth and the path's rule orders.
pub fn band_of(e: &AuditEntry, path: &CascadePath) -> Band {
    if e.depth == 0 {
        return Band::Action;
    }
    let order = match &e.cause {
        Cause::Rule(id) => rule_order(path, id),
        _ => None,
    };
    if e.depth >= DEEP_DEPTH || order.is_some_and(|o| o >= DEEP_ORDER) {
        Band::Deep
    } else {
        Band::Shallow
    }
}

/// Recall within one band, as a fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Recall {
    pub hit: usize,
    pub total: usize,
}

impl Recall {
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hit as f64 / self.total as f64)
    }
}

/// Strict-key recall per band. A truth key belongs to the band of every net
/// change that produced it.
pub fn recall_by_depth(
    predicted: &[PredictedEntry],
    truth: &[AuditEntry],
    path: &CascadePath,
    registry: &SchemaRegistry,
) -> BTreeMap<Band, Recall> {
    let p: BTreeSet<StrictKey> = collapse(predicted, registry).iter().map(NetChange::strict_key).collect();
    let mut bands: BTreeMap<Band, BTreeSet<StrictKey>> = BTreeMap::new();
    for c in collapse(truth, registry) {
        bands.entry(band_of(&c.last, path)).or_default().insert(c.strict_key());
    }
    Band::ALL
        .iter()
        .map(|b| {
            let keys = bands.remove(b).unwrap_or_default();
            (*b, Recall { hit: keys.iter().filter(|k| p.contains(*k)).count(), total: keys.len() })
        })
        .collect()
}

/// Failure pattern of a missed truth change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureTag {
    /// Creation: the field had no prior value.
    P1,
    /// Deep in the cascade.
    P2,
    /// A multi-record write beyond its first matched record.
    P3,
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Miss {
    pub table: String,
    pub field: String,
    pub record_id: String,
    pub new_value: Value,
    pub tags: BTreeSet<FailureTag>,
}

/// Tag every false negative. Predicted changes are matched to truth changes
/// per strict key, greedily in truth ordinal order; unmatched truth changes
/// are the misses.
pub fn attribute_failures(
    predicted: &[PredictedEntry],
    truth: &[AuditEntry],
    path: &CascadePath,
    registry: &SchemaRegistry,
) -> Vec<Miss> {
    let mut supply = counts(collapse(predicted, registry).iter().map(NetChange::strict_key), true);
    let mut g = collapse(truth, registry);
    g.sort_by_key(|c| c.last.ordinal);
    let mut out = Vec::new();
    for c in g {
        if let Some(n) = supply.get_mut(&c.strict_key()).filter(|n| **n > 0) {
            *n -= 1;
            continue;
        }
        let mut tags = BTreeSet::new();
        if c.old_value.as_ref().is_none_or(Value::is_empty) {
            tags.insert(FailureTag::P1);
        }
        if band_of(&c.last, path) == Band::Deep {
            tags.insert(FailureTag::P2);
        }
        if c.last.fanout.is_some_and(|f| f >= 1) {
            tags.insert(FailureTag::P3);
        }
        if tags.is_empty() {
            tags.insert(FailureTag::Other);
        }
        out.push(Miss { table: c.table, field: c.field, record_id: c.record_id, new_value: c.new_value, tags });
    }
    out
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(scores: &[f64], n: usize, level: f64, seed: u64) -> Result<(f64, f64), MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    if n == 0 {
        return Err(MetricsError::NoResamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..n)
        .map(|_| (0..scores.len()).map(|_| scores[rng.gen_range(0..scores.len())]).sum::<f64>() / scores.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level.clamp(0.0, 1.0)) / 2.0;
    let at = |q: f64| means[((n - 1) as f64 * q).round() as usize];
    Ok((at(tail), at(1.0 - tail)))
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::engine::{Phase, PathStep};
    use crate::schema::{FieldDef, TableSchema};

    fn registry() -> Arc<SchemaRegistry> {
        let mut reg = SchemaRegistry::new();
        reg.define_table(TableSchema::new(
            "u_t",
            vec![
                FieldDef::integer("u_a"),
                FieldDef::integer("u_b"),
                FieldDef::integer("u_c"),
                FieldDef::reference("u_r", "u_t"),
                FieldDef::datetime("u_d"),
            ],
        ))
        .unwrap();
        Arc::new(reg)
    }

    fn p(field: &str, v: i64) -> PredictedEntry {
        PredictedEntry { table: "u_t".into(), field: field.into(), old_value: Some(Value::Int(0)), new_value: Value::Int(v), record_id: "u_t_000001".into() }
    }

    fn g(field: &str, v: i64) -> AuditEntry {
        AuditEntry {
            table: "u_t".into(),
            field: field.into(),
            old_value: Some(Value::Int(0)),
            new_value: Value::Int(v),
            record_id: "u_t_000001".into(),
            cause: Cause::Action,
            depth: 0,
            ordinal: 0,
            fanout: None,
        }
    }

    #[test]
    fn set_arithmetic() {
        let reg = registry();
        let s = score(&[p("u_a", 1), p("u_b", 2)], &[g("u_b", 2), g("u_c", 3)], &reg);
        assert_eq!((s.iou_strict, s.iou_tf), (1.0 / 3.0, 1.0 / 3.0));
        let s = score(&[p("u_a", 1)], &[g("u_a", 2)], &reg);
        assert_eq!((s.iou_strict, s.iou_tf), (0.0, 1.0));
        let s = score(&[], &[], &reg);
        assert_eq!((s.iou_strict, s.iou_tf), (1.0, 1.0));
        let s = score(&[], &[g("u_a", 1)], &reg);
        assert_eq!((s.iou_strict, s.iou_tf), (0.0, 0.0));
    }

    #[test]
    fn collapse_keeps_the_last_value() {
        let reg = registry();
        let mut second = g("u_a", 7);
        second.old_value = Some(Value::Int(1));
        let net = collapse(&[g("u_a", 1), second], &reg);
        assert_eq!(net.len(), 1);
        assert_eq!(net[0].new_value, Value::Int(7));
        assert_eq!(net[0].old_value, Some(Value::Int(0)));
        let mut back = g("u_a", 0);
        back.old_value = Some(Value::Int(1));
        assert!(collapse(&[g("u_a", 1), back], &reg).is_empty());
    }

    #[test]
    fn multiplicity_counts_records() {
        let reg = registry();
        let mut other = g("u_a", 1);
        other.record_id = "u_t_000002".into();
        let truth = [g("u_a", 1), other];
        assert_eq!(score(&[p("u_a", 1)], &truth, &reg).iou_strict, 1.0);
        assert_eq!(score_with(&[p("u_a", 1)], &truth, &reg, ScoreOptions { multiplicity: true }).iou_strict, 0.5);
    }

    fn tiers(pairs: &[(&str, Tier)]) -> TierMap {
        TierMap(pairs.iter().map(|(f, t)| (("u_t".to_string(), f.to_string()), *t)).collect())
    }

    #[test]
    fn strata_are_absent_when_empty_and_gaps_are_errors() {
        let reg = registry();
        let s = stratify(&[p("u_a", 1)], &[g("u_a", 1)], &tiers(&[("u_a", Tier::T1)]), &reg).unwrap();
        assert_eq!(s.tier(Tier::T1).map(|x| x.iou), Some(1.0));
        assert!(s.tier(Tier::T2).is_none() && s.tier(Tier::T3).is_none());
        assert_eq!(
            stratify(&[], &[g("u_b", 1)], &tiers(&[]), &reg),
            Err(MetricsError::TierCoverageGap { table: "u_t".into(), field: "u_b".into() })
        );
    }

    #[test]
    fn t3_is_strict_and_t2_is_coarse() {
        let reg = registry();
        let map = tiers(&[("u_a", Tier::T2), ("u_b", Tier::T3)]);
        let s = stratify(&[p("u_a", 9), p("u_b", 9), p("u_c", 1)], &[g("u_a", 1), g("u_b", 1)], &map, &reg).unwrap();
        assert_eq!(s.tier(Tier::T2).unwrap().iou, 1.0);
        assert_eq!(s.tier(Tier::T3).unwrap().iou, 0.0);
        assert_eq!(s.all.predicted_keys, 3);
        assert_eq!(s.all.truth_keys, 2);
    }

    fn path(orders: &[(&str, u32, u32)]) -> CascadePath {
        CascadePath(
            orders
                .iter()
                .map(|(id, order, depth)| PathStep {
                    rule_id: id.to_string(),
                    table: "u_t".into(),
                    record_id: "u_t_000001".into(),
                    depth: *depth,
                    fired_at: 0,
                    phase: Phase::After,
                    order: *order,
                })
                .collect(),
        )
    }

    fn ruled(field: &str, v: i64, rule: &str, depth: u32) -> AuditEntry {
        AuditEntry { cause: Cause::Rule(rule.into()), depth, ..g(field, v) }
    }

    #[test]
    fn bands_follow_depth_and_order() {
        let pi = path(&[("r1", 100, 1), ("r4", 400, 2), ("r5", 200, 3)]);
        assert_eq!(band_of(&g("u_a", 1), &pi), Band::Action);
        assert_eq!(band_of(&ruled("u_a", 1, "r1", 1), &pi), Band::Shallow);
        assert_eq!(band_of(&ruled("u_a", 1, "r4", 2), &pi), Band::Deep);
        assert_eq!(band_of(&ruled("u_a", 1, "r5", 3), &pi), Band::Deep);
    }

    #[test]
    fn failure_tags() {
        let reg = registry();
        let pi = path(&[("r1", 100, 1), ("r5", 500, 3)]);
        let mut created = ruled("u_a", 1, "r1", 1);
        created.old_value = None;
        let mut fanned = ruled("u_b", 2, "r5", 3);
        fanned.fanout = Some(1);
        fanned.ordinal = 1;
        let mut plain = ruled("u_c", 3, "r1", 1);
        plain.ordinal = 2;
        let misses = attribute_failures(&[], &[created, fanned, plain.clone()], &pi, &reg);
        let tags: Vec<Vec<FailureTag>> = misses.iter().map(|m| m.tags.iter().copied().collect()).collect();
        assert_eq!(tags, vec![vec![FailureTag::P1], vec![FailureTag::P2, FailureTag::P3], vec![FailureTag::Other]]);
        assert!(attribute_failures(&[p("u_c", 3)], &[plain], &pi, &reg).is_empty());
    }

    #[test]
    fn bootstrap_basics() {
        assert_eq!(bootstrap_ci(&[0.5; 50], 2000, 0.95, 1), Ok((0.5, 0.5)));
        let two: Vec<f64> = (0..200).map(|i| (i % 2) as f64).collect();
        let (lo, hi) = bootstrap_ci(&two, 2000, 0.95, 1).unwrap();
        assert!(lo < 0.5 && 0.5 < hi);
        assert_eq!(bootstrap_ci(&two, 2000, 0.95, 9), bootstrap_ci(&two, 2000, 0.95, 9));
        assert_eq!(bootstrap_ci(&[], 10, 0.95, 1), Err(MetricsError::EmptySample));
    }

    fn entries() -> impl Strategy<Value = Vec<(usize, usize, i64)>> {
        prop::collection::vec((0usize..5, 0usize..3, 0i64..3), 0..12)
    }

    const FIELDS: [&str; 5] = ["u_a", "u_b", "u_c", "u_r", "u_d"];

    fn build(spec: &[(usize, usize, i64)]) -> (Vec<PredictedEntry>, Vec<AuditEntry>) {
        let mut ps = Vec::new();
        let mut gs = Vec::new();
        for (i, (f, rec, v)) in spec.iter().enumerate() {
            let record_id = format!("u_t_{rec:06}");
            let value = if FIELDS[*f] == "u_r" { Value::text(&record_id) } else { Value::Int(*v) };
            let e = PredictedEntry { table: "u_t".into(), field: FIELDS[*f].into(), old_value: None, new_value: value, record_id };
            if i % 2 == 0 {
                ps.push(e);
            } else {
                gs.push(AuditEntry {
                    table: e.table,
                    field: e.field,
                    old_value: None,
                    new_value: e.new_value,
                    record_id: e.record_id,
                    cause: Cause::Action,
                    depth: 0,
                    ordinal: i as u64,
                    fanout: None,
                });
            }
        }
        (ps, gs)
    }

    proptest! {
        #[test]
        fn coarse_never_below_strict(spec in entries(), multiplicity in any::<bool>()) {
            let reg = registry();
            let (ps, gs) = build(&spec);
            let s = score_with(&ps, &gs, &reg, ScoreOptions { multiplicity });
            prop_assert!(s.iou_tf >= s.iou_strict);
            prop_assert!((0.0..=1.0).contains(&s.iou_strict));
        }

        #[test]
        fn non_content_entries_do_not_move_scores(spec in entries(), extra in entries()) {
            let reg = registry();
            let (ps, gs) = build(&spec);
            let s = score(&ps, &gs, &reg);
            let (mut ps2, mut gs2) = (ps.clone(), gs.clone());
            let (xp, xg) = build(&extra);
            ps2.extend(xp.into_iter().filter(|e| e.field == "u_r" || e.field == "u_d"));
            gs2.extend(xg.into_iter().filter(|e| e.field == "u_r" || e.field == "u_d"));
            prop_assert_eq!(score(&ps2, &gs2, &reg), s);
        }
    }
}
