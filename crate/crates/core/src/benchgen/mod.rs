//! Benchmark generation: sample a cascade, validate and repair it, execute it
//! on the world's seed to record the ground truth, then restore the store.

pub mod sample;
pub mod tiers;
pub mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sample::{sample_cascade, sample_cascade_with, sample_conflict_probe, CascadeSpec, SamplerConfig, SupportRecord, Topology};
pub use tiers::{label_tiers, Tier, TierError, TierMap};
pub use validate::{repair, validate_cascade, Check, CheckFailure, ValidationReport};

use crate::engine::{Action, CascadePath, Engine, EngineError, RuleDef};
use crate::store::{filter_content, AuditSet, StateSnapshot, Store, StoreError};
use crate::world::World;

/// Default repair rounds before a cascade is rejected.
pub const DEFAULT_MAX_REPAIRS: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("world has {tables} tables, too few for a {topology} cascade")]
    InsufficientTables { topology: Topology, tables: usize },
    #[error("no valid {topology} cascade of length {length} found")]
    SamplingExhausted { topology: Topology, length: usize },
    #[error("store reset did not restore the seed")]
    ResetMismatch,
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Why a cascade was dropped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    /// Some check failed and could not be repaired.
    Validation,
    /// Repairs left fewer than the minimum number of rules.
    TooShort { rules: usize },
    CascadeDepthExceeded,
    /// A rule passed validation but never fired.
    Unverified { rules: Vec<String> },
    Execution { message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    #[serde(flatten)]
    pub reason: RejectReason,
    pub report: ValidationReport,
}

/// Ground truth of one action.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub action: Action,
    /// Content audit entries.
    pub audits: AuditSet,
    pub cascade_path: CascadePath,
    pub tiers: TierMap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub world_ref: String,
    pub topology: Topology,
    pub length: usize,
    pub rules: Vec<RuleDef>,
    pub conflict_pairs: Vec<[String; 2]>,
    pub support: Vec<SupportRecord>,
    pub action: Action,
    pub audits: AuditSet,
    pub cascade_path: CascadePath,
    pub tiers: TierMap,
    /// Later actions applied to the post-state, for multi-step rollouts.
    #[serde(default)]
    pub followups: Vec<EpisodeStep>,
}

impl Episode {
    /// The first step as an `EpisodeStep`.
    pub fn first_step(&self) -> EpisodeStep {
        EpisodeStep {
            action: self.action.clone(),
            audits: self.audits.clone(),
            cascade_path: self.cascade_path.clone(),
            tiers: self.tiers.clone(),
        }
    }

    /// Up to `k` steps, the first action included.
    pub fn steps(&self, k: usize) -> Vec<EpisodeStep> {
        std::iter::once(self.first_step()).chain(self.followups.iter().cloned()).take(k).collect()
    }

    /// Seed plus support records: the state the action runs on.
    pub fn initial_state(&self, world: &World) -> Result<StateSnapshot, StoreError> {
        let mut store = Store::from_snapshot(world.registry_arc(), &world.seed)?;
        load_support(&mut store, &self.support)?;
        Ok(store.snapshot())
    }

    /// An engine at the initial state running this episode's rules.
    pub fn engine(&self, world: &World) -> Result<Engine, EngineError> {
        let store = Store::from_snapshot(world.registry_arc(), &self.initial_state(world)?)?;
        episode_engine(world, store, &self.rules, &self.conflict_pairs)
    }
}

fn load_support(store: &mut Store, support: &[SupportRecord]) -> Result<(), StoreError> {
    for s in support {
        store.bulk_insert(&s.table, &s.values)?;
    }
    Ok(())
}

fn episode_engine(world: &World, store: Store, rules: &[RuleDef], pairs: &[[String; 2]]) -> Result<Engine, EngineError> {
    let mut engine = Engine::new(world.registry_arc(), store);
    for [a, b] in pairs {
        engine.waive_conflict(a, b);
    }
    for r in rules {
        engine.register_rule(r.clone())?;
    }
    Ok(engine)
}

/// Validate and repair `spec` for at most `max_repairs` rounds.
pub fn validate_and_repair(world: &World, spec: &CascadeSpec, max_repairs: usize) -> Result<(CascadeSpec, ValidationReport), Rejected> {
    let mut spec = spec.clone();
    let mut report = validate_cascade(world, &spec);
    let mut rounds = 0;
    while !report.passed() {
        let next = if rounds < max_repairs { repair(world, &spec, &report) } else { None };
        let Some(next) = next.filter(|n| *n != spec) else {
            return Err(Rejected { reason: RejectReason::Validation, report });
        };
        rounds += 1;
        spec = next;
        if spec.rules.len() < 3 {
            let report = validate_cascade(world, &spec);
            return Err(Rejected { reason: RejectReason::TooShort { rules: spec.rules.len() }, report });
        }
        report = validate_cascade(world, &spec);
    }
    Ok((spec, report))
}

fn run_step(engine: &mut Engine, world: &World, action: &Action) -> Result<EpisodeStep, EngineError> {
    let out = engine.apply_action(action)?;
    let audits = AuditSet(filter_content(&out.audits.0, &world.registry));
    let tiers = label_tiers(&audits.0, &action.table, &world.registry)
        .map_err(|e| EngineError::InvalidAction(e.to_string()))?;
    Ok(EpisodeStep { action: action.clone(), audits, cascade_path: out.path, tiers })
}

/// Execute a validated spec on `store`, which must hold the world seed. The
/// store is handed back mid-episode; callers reset it.
fn execute(world: &World, spec: &CascadeSpec, store: &mut Store) -> Result<Vec<EpisodeStep>, RejectReason> {
    let exec = |e: EngineError| match e {
        EngineError::CascadeDepthExceeded { .. } => RejectReason::CascadeDepthExceeded,
        other => RejectReason::Execution { message: other.to_string() },
    };
    let working = std::mem::replace(store, Store::new(world.registry_arc()));
    let mut engine = match episode_engine(world, working, &spec.rules, &spec.conflict_pairs) {
        Ok(e) => e,
        Err(e) => return Err(exec(e)),
    };
    let result = (|| {
        load_support(engine.store_mut(), &spec.support).map_err(|e| exec(e.into()))?;
        let mut steps = vec![run_step(&mut engine, world, &spec.action).map_err(exec)?];
        let ids = steps[0].cascade_path.rule_ids();
        if ids.len() < spec.rules.len() {
            let missing = spec.rules.iter().filter(|r| !ids.contains(r.id.as_str())).map(|r| r.id.clone()).collect();
            return Err(RejectReason::Unverified { rules: missing });
        }
        for a in &spec.followups {
            steps.push(run_step(&mut engine, world, a).map_err(exec)?);
        }
        Ok(steps)
    })();
    *store = std::mem::replace(engine.store_mut(), Store::new(world.registry_arc()));
    result
}

/// Validate, repair and execute `spec` against a fresh copy of the seed.
pub fn build_episode(world: &World, world_ref: &str, id: &str, spec: &CascadeSpec, max_repairs: usize) -> Result<Episode, Rejected> {
    let mut store = Store::from_snapshot(world.registry_arc(), &world.seed)
        .map_err(|e| Rejected { reason: RejectReason::Execution { message: e.to_string() }, report: validate_cascade(world, spec) })?;
    build_episode_on(world, world_ref, id, spec, max_repairs, &mut store)
}

/// As [`build_episode`], reusing `store`. The store is reset to the seed on
/// return and the reset is verified.
pub fn build_episode_on(
    world: &World,
    world_ref: &str,
    id: &str,
    spec: &CascadeSpec,
    max_repairs: usize,
    store: &mut Store,
) -> Result<Episode, Rejected> {
    let (spec, report) = validate_and_repair(world, spec, max_repairs)?;
    let result = execute(world, &spec, store);
    store.reset(&world.seed).expect("the seed always loads into its own registry");
    assert_eq!(store.snapshot(), world.seed, "store reset did not restore the seed");
    let mut steps = result.map_err(|reason| Rejected { reason, report })?;
    let first = steps.remove(0);
    Ok(Episode {
        id: id.into(),
        world_ref: world_ref.into(),
        topology: spec.topology,
        length: spec.rules.len(),
        rules: spec.rules,
        conflict_pairs: spec.conflict_pairs,
        support: spec.support,
        action: first.action,
        audits: first.audits,
        cascade_path: first.cascade_path,
        tiers: first.tiers,
        followups: steps,
    })
}

/// Which topologies a bench draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyMix {
    Only(Topology),
    /// Round-robin over all three.
    Mixed,
}

impl fmt::Display for TopologyMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyMix::Only(t) => t.fmt(f),
            TopologyMix::Mixed => f.write_str("mixed"),
        }
    }
}

impl FromStr for TopologyMix {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "mixed" {
            return Ok(TopologyMix::Mixed);
        }
        s.parse().map(TopologyMix::Only)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub episodes: usize,
    pub topology: TopologyMix,
    pub seed: u64,
    pub max_repairs: usize,
    /// Start with one probe episode per world conflict pair (flat and mixed only).
    pub conflict_probes: bool,
    pub sampler: SamplerConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            episodes: 50,
            topology: TopologyMix::Mixed,
            seed: 0,
            max_repairs: DEFAULT_MAX_REPAIRS,
            conflict_probes: true,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Summary of a generated bench.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub world_ref: String,
    pub seed: u64,
    pub attempted: usize,
    pub episodes: usize,
    pub rejected: usize,
    pub rejections: BTreeMap<String, usize>,
    pub topologies: BTreeMap<String, usize>,
    pub lengths: BTreeMap<usize, usize>,
    pub tier_keys: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bench {
    pub episodes: Vec<Episode>,
    pub manifest: Manifest,
}

fn reject_tag(r: &RejectReason) -> &'static str {
    match r {
        RejectReason::Validation => "validation",
        RejectReason::TooShort { .. } => "too_short",
        RejectReason::CascadeDepthExceeded => "cascade_depth_exceeded",
        RejectReason::Unverified { .. } => "unverified",
        RejectReason::Execution { .. } => "execution",
    }
}

/// Generate up to `cfg.episodes` episodes. Attempts that fail to sample or are
/// rejected are counted in the manifest and not retried.
pub fn generate_bench(world: &World, world_ref: &str, cfg: &BenchConfig) -> Result<Bench, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(world.profile.rng(0xBE).gen());
    let mut store = Store::from_snapshot(world.registry_arc(), &world.seed)?;
    let mut manifest = Manifest { world_ref: world_ref.into(), seed: cfg.seed, ..Manifest::default() };
    let probes = match cfg.topology {
        TopologyMix::Only(Topology::Flat) | TopologyMix::Mixed if cfg.conflict_probes => world.conflict_pairs.len(),
        _ => 0,
    };
    let mut episodes = Vec::new();
    for i in 0..cfg.episodes {
        let seed: u64 = rng.gen();
        let sampled = if i < probes {
            sample_conflict_probe(world, &world.conflict_pairs[i], seed, &cfg.sampler)
        } else {
            let topology = match cfg.topology {
                TopologyMix::Only(t) => t,
                TopologyMix::Mixed => Topology::ALL[i % 3],
            };
            sample_cascade_with(world, topology, None, seed, &cfg.sampler)
        };
        manifest.attempted += 1;
        let spec = match sampled {
            Ok(s) => s,
            Err(BenchError::SamplingExhausted { .. }) => {
                *manifest.rejections.entry("sampling_exhausted".into()).or_default() += 1;
                manifest.rejected += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let id = format!("ep_{:04}", i + 1);
        match build_episode_on(world, world_ref, &id, &spec, cfg.max_repairs, &mut store) {
            Ok(ep) => {
                *manifest.topologies.entry(ep.topology.to_string()).or_default() += 1;
                *manifest.lengths.entry(ep.length).or_default() += 1;
                for t in Tier::ALL {
                    *manifest.tier_keys.entry(format!("{t:?}")).or_default() += ep.tiers.count(t);
                }
                episodes.push(ep);
            }
            Err(r) => {
                *manifest.rejections.entry(reject_tag(&r.reason).into()).or_default() += 1;
                manifest.rejected += 1;
            }
        }
    }
    manifest.episodes = episodes.len();
    if store.snapshot() != world.seed {
        return Err(BenchError::ResetMismatch);
    }
    Ok(Bench { episodes, manifest })
}

#[cfg(test)]
mod tests;
