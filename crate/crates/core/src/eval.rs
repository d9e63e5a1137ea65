//! The evaluation harness: run a predictor over a benchmark, score every
//! step and aggregate a report.
//!
//! The report carries no predictor name or budget, so two configurations that
//! predict the same deltas produce byte-identical reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchgen::{Episode, Tier};
use crate::metrics::{self, attribute_failures, bootstrap_ci, recall_by_depth, score, stratify, Band, FailureTag, MetricsError, Recall};
use crate::predict::{rollout, InterpreterReasoner, PredictError, PredictedAuditSet, Predictor, RetrievedContext, DEFAULT_BUDGET};
use crate::query::Instance;
use crate::store::StoreError;
use crate::world::World;

/// Default rollout horizon.
pub const DEFAULT_HORIZON: usize = 1;
/// Default bootstrap confidence level.
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Direct,
    Oracle,
    Discovery,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 3] = [PredictorKind::Direct, PredictorKind::Oracle, PredictorKind::Discovery];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictorKind::Direct => "direct",
            PredictorKind::Oracle => "oracle",
            PredictorKind::Discovery => "discovery",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        PredictorKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown predictor `{s}` (expected direct, oracle or discovery)"))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("episode `{episode}` names unknown world `{world}`")]
    UnknownWorld { episode: String, world: String },
    #[error("episode `{episode}`: {source}")]
    Predict { episode: String, source: PredictError },
    #[error("episode `{episode}`: {source}")]
    Metrics { episode: String, source: MetricsError },
    #[error("episode `{episode}`: {source}")]
    Store { episode: String, source: StoreError },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("no episodes to evaluate")]
    NoEpisodes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub predictor: PredictorKind,
    pub budget: usize,
    /// Rollout horizon; episodes with fewer steps contribute what they have.
    pub k: usize,
    /// Make the rules and SLA tables unreadable to discovery.
    pub block_rules: bool,
    /// Bootstrap seed.
    pub seed: u64,
    pub resamples: usize,
    pub level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            predictor: PredictorKind::Direct,
            budget: DEFAULT_BUDGET,
            k: DEFAULT_HORIZON,
            block_rules: false,
            seed: 0,
            resamples: metrics::DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
        }
    }
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub world_ref: String,
    pub episode_id: String,
    pub step: usize,
    pub audits: PredictedAuditSet,
    pub budget_used: usize,
}

/// Scores of one episode step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub episode_id: String,
    pub world_ref: String,
    pub topology: String,
    pub step: usize,
    pub iou_strict: f64,
    pub iou_tf: f64,
    pub tiers: BTreeMap<Tier, Option<f64>>,
    pub truth_keys: usize,
    pub tier_keys: BTreeMap<Tier, usize>,
    pub recall: BTreeMap<Band, Recall>,
    pub failures: BTreeMap<FailureTag, usize>,
    pub misses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub iou_strict: Summary,
    pub iou_tf: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub hit: usize,
    pub total: usize,
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub n: usize,
    pub iou_strict: f64,
    pub iou_tf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub misses: usize,
    pub tags: BTreeMap<FailureTag, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologySummary {
    pub episodes: usize,
    pub iou_strict: f64,
    pub iou_tf: f64,
}

/// The aggregate report, a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub episodes: usize,
    pub steps: usize,
    /// Episode-level means (each episode averaged over its steps) with
    /// bootstrap intervals over episodes.
    pub overall: Overall,
    /// Per step, scored on its stratum's key; absent when no step had it.
    pub per_tier: BTreeMap<Tier, Option<Summary>>,
    pub per_depth: BTreeMap<Band, BandSummary>,
    pub per_step: Vec<StepSummary>,
    pub failures: FailureSummary,
    pub per_topology: BTreeMap<String, TopologySummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<PredictionRecord>,
    /// Retrieval traces, parallel to `predictions`; `None` for non-discovery runs.
    pub contexts: Vec<Option<RetrievedContext>>,
    pub scores: Vec<StepScore>,
    pub report: Report,
}

/// Worlds by the reference episodes carry.
pub type WorldSet = BTreeMap<String, World>;

/// Evaluate one episode; returns its prediction records, traces and scores.
pub fn evaluate_episode(
    world: &World,
    ep: &Episode,
    cfg: &EvalConfig,
) -> Result<(Vec<PredictionRecord>, Vec<Option<RetrievedContext>>, Vec<StepScore>), EvalError> {
    let episode = || ep.id.clone();
    if cfg.k == 0 {
        return Err(EvalError::ZeroHorizon);
    }
    let reg = world.registry_arc();
    let start = ep.initial_state(world).map_err(|source| EvalError::Store { episode: episode(), source })?;
    let steps = ep.steps(cfg.k);
    let actions: Vec<_> = steps.iter().map(|s| s.action.clone()).collect();
    let mut instance = Instance::for_episode(world, ep, start.clone());
    if cfg.block_rules {
        instance.acl.block_rules();
    }
    let reasoner = InterpreterReasoner;
    let predictor = match cfg.predictor {
        PredictorKind::Direct => Predictor::Direct,
        PredictorKind::Oracle => Predictor::Oracle { rules: &ep.rules, slas: &[] },
        PredictorKind::Discovery => Predictor::Discovery { instance: &instance, budget: cfg.budget, reasoner: &reasoner },
    };
    let preds = rollout(reg.clone(), &start, &actions, &predictor).map_err(|source| EvalError::Predict { episode: episode(), source })?;
    let mut records = Vec::new();
    let mut contexts = Vec::new();
    let mut scores = Vec::new();
    for (i, (pred, truth)) in preds.into_iter().zip(&steps).enumerate() {
        let p = pred.audits.entries();
        let g = truth.audits.entries();
        let s = score(p, g, &reg);
        let strata = stratify(p, g, &truth.tiers, &reg).map_err(|source| EvalError::Metrics { episode: episode(), source })?;
        let misses = attribute_failures(p, g, &truth.cascade_path, &reg);
        let mut failures: BTreeMap<FailureTag, usize> = BTreeMap::new();
        for m in &misses {
            for t in &m.tags {
                *failures.entry(*t).or_default() += 1;
            }
        }
        scores.push(StepScore {
            episode_id: ep.id.clone(),
            world_ref: ep.world_ref.clone(),
            topology: ep.topology.to_string(),
            step: i + 1,
            iou_strict: s.iou_strict,
            iou_tf: s.iou_tf,
            tiers: Tier::ALL.iter().map(|t| (*t, strata.tier(*t).map(|x| x.iou))).collect(),
            truth_keys: strata.all.truth_keys,
            tier_keys: Tier::ALL.iter().map(|t| (*t, strata.tier(*t).map_or(0, |x| x.truth_keys))).collect(),
            recall: recall_by_depth(p, g, &truth.cascade_path, &reg),
            failures,
            misses: misses.len(),
        });
        records.push(PredictionRecord { world_ref: ep.world_ref.clone(), episode_id: ep.id.clone(), step: i + 1, budget_used: pred.budget_used(), audits: pred.audits.clone() });
        contexts.push(pred.context);
    }
    Ok((records, contexts, scores))
}

/// Run `cfg.predictor` over every episode.
pub fn evaluate(worlds: &WorldSet, episodes: &[Episode], cfg: &EvalConfig) -> Result<Evaluation, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::NoEpisodes);
    }
    let mut predictions = Vec::new();
    let mut contexts = Vec::new();
    let mut scores = Vec::new();
    for ep in episodes {
        let world = worlds
            .get(&ep.world_ref)
            .ok_or_else(|| EvalError::UnknownWorld { episode: ep.id.clone(), world: ep.world_ref.clone() })?;
        let (r, c, s) = evaluate_episode(world, ep, cfg)?;
        predictions.extend(r);
        contexts.extend(c);
        scores.extend(s);
    }
    let report = build_report(&scores, cfg)?;
    Ok(Evaluation { predictions, contexts, scores, report })
}

fn summarize(xs: &[f64], cfg: &EvalConfig, salt: u64) -> Result<Summary, MetricsError> {
    let (ci_low, ci_high) = bootstrap_ci(xs, cfg.resamples, cfg.level, cfg.seed.wrapping_add(salt))?;
    Ok(Summary { n: xs.len(), mean: metrics::mean(xs).unwrap_or(0.0), ci_low, ci_high })
}

/// Aggregate step scores into a report.
pub fn build_report(scores: &[StepScore], cfg: &EvalConfig) -> Result<Report, EvalError> {
    let wrap = |source| EvalError::Metrics { episode: String::new(), source };
    let mut by_episode: BTreeMap<(&str, &str), Vec<&StepScore>> = BTreeMap::new();
    for s in scores {
        by_episode.entry((&s.world_ref, &s.episode_id)).or_default().push(s);
    }
    let ep_mean = |f: fn(&StepScore) -> f64| -> Vec<f64> {
        by_episode.values().map(|ss| ss.iter().map(|s| f(s)).sum::<f64>() / ss.len() as f64).collect()
    };
    let overall = Overall {
        iou_strict: summarize(&ep_mean(|s| s.iou_strict), cfg, 1).map_err(wrap)?,
        iou_tf: summarize(&ep_mean(|s| s.iou_tf), cfg, 2).map_err(wrap)?,
    };
    let mut per_tier = BTreeMap::new();
    for (i, t) in Tier::ALL.iter().enumerate() {
        let xs: Vec<f64> = scores.iter().filter_map(|s| s.tiers.get(t).copied().flatten()).collect();
        let summary = if xs.is_empty() { None } else { Some(summarize(&xs, cfg, 3 + i as u64).map_err(wrap)?) };
        per_tier.insert(*t, summary);
    }
    let per_depth = Band::ALL
        .iter()
        .map(|b| {
            let mut r = Recall::default();
            for s in scores {
                let x = s.recall.get(b).copied().unwrap_or_default();
                r.hit += x.hit;
                r.total += x.total;
            }
            (*b, BandSummary { hit: r.hit, total: r.total, recall: r.value() })
        })
        .collect();
    let mut steps: BTreeMap<usize, Vec<&StepScore>> = BTreeMap::new();
    for s in scores {
        steps.entry(s.step).or_default().push(s);
    }
    let avg = |ss: &[&StepScore], f: fn(&StepScore) -> f64| ss.iter().map(|s| f(s)).sum::<f64>() / ss.len() as f64;
    let per_step = steps
        .iter()
        .map(|(step, ss)| StepSummary { step: *step, n: ss.len(), iou_strict: avg(ss, |s| s.iou_strict), iou_tf: avg(ss, |s| s.iou_tf) })
        .collect();
    let mut tags = BTreeMap::new();
    for s in scores {
        for (t, n) in &s.failures {
            *tags.entry(*t).or_default() += n;
        }
    }
    let failures = FailureSummary { misses: scores.iter().map(|s| s.misses).sum(), tags };
    let mut topo: BTreeMap<String, Vec<&StepScore>> = BTreeMap::new();
    for s in scores {
        topo.entry(s.topology.clone()).or_default().push(s);
    }
    let per_topology = topo
        .into_iter()
        .map(|(t, ss)| {
            let episodes = ss.iter().map(|s| (&s.world_ref, &s.episode_id)).collect::<BTreeSet<_>>().len();
            (t, TopologySummary { episodes, iou_strict: avg(&ss, |s| s.iou_strict), iou_tf: avg(&ss, |s| s.iou_tf) })
        })
        .collect();
    Ok(Report {
        episodes: by_episode.len(),
        steps: scores.len(),
        overall,
        per_tier,
        per_depth,
        per_step,
        failures,
        per_topology,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    episode_id: &'a str,
    world_ref: &'a str,
    topology: &'a str,
    step: usize,
    iou_strict: f64,
    iou_tf: f64,
    t1: Option<f64>,
    t2: Option<f64>,
    t3: Option<f64>,
    action_recall: Option<f64>,
    shallow_recall: Option<f64>,
    deep_recall: Option<f64>,
    misses: usize,
    p1: usize,
    p2: usize,
    p3: usize,
    other: usize,
}

/// Per-step rows as CSV.
pub fn scores_csv(scores: &[StepScore]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scores {
        let tier = |t| s.tiers.get(&t).copied().flatten();
        let recall = |b| s.recall.get(&b).and_then(Recall::value);
        let tag = |t| s.failures.get(&t).copied().unwrap_or(0);
        w.serialize(CsvRow {
            episode_id: &s.episode_id,
            world_ref: &s.world_ref,
            topology: &s.topology,
            step: s.step,
            iou_strict: s.iou_strict,
            iou_tf: s.iou_tf,
            t1: tier(Tier::T1),
            t2: tier(Tier::T2),
            t3: tier(Tier::T3),
            action_recall: recall(Band::Action),
            shallow_recall: recall(Band::Shallow),
            deep_recall: recall(Band::Deep),
            misses: s.misses,
            p1: tag(FailureTag::P1),
            p2: tag(FailureTag::P2),
            p3: tag(FailureTag::P3),
            other: tag(FailureTag::Other),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row of the three-predictor comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichRow {
    pub predictor: PredictorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    pub iou_strict: f64,
    pub iou_tf: f64,
    pub tiers: BTreeMap<Tier, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    pub rows: Vec<SandwichRow>,
    /// `world/episode` names whose discovery at the largest budget closed
    /// retrieval yet differed from the oracle on some step.
    pub closure_mismatches: Vec<String>,
}

impl Sandwich {
    /// Means are non-decreasing from direct through each budget to oracle.
    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].iou_strict <= w[1].iou_strict + 1e-12 && w[0].iou_tf <= w[1].iou_tf + 1e-12)
    }
}

fn row(kind: PredictorKind, budget: Option<usize>, ev: &Evaluation) -> SandwichRow {
    SandwichRow {
        predictor: kind,
        budget,
        iou_strict: ev.report.overall.iou_strict.mean,
        iou_tf: ev.report.overall.iou_tf.mean,
        tiers: ev.report.per_tier.iter().map(|(t, s)| (*t, s.as_ref().map(|s| s.mean))).collect(),
    }
}

/// Direct, discovery at each budget (ascending) and oracle over one benchmark.
pub fn compare(worlds: &WorldSet, episodes: &[Episode], cfg: &EvalConfig, budgets: &[usize]) -> Result<(Sandwich, BTreeMap<String, Evaluation>), EvalError> {
    let run = |predictor, budget| evaluate(worlds, episodes, &EvalConfig { predictor, budget, ..cfg.clone() });
    let mut budgets = budgets.to_vec();
    budgets.sort_unstable();
    budgets.dedup();
    let direct = run(PredictorKind::Direct, cfg.budget)?;
    let oracle = run(PredictorKind::Oracle, cfg.budget)?;
    let mut rows = vec![row(PredictorKind::Direct, None, &direct)];
    let mut evals = BTreeMap::new();
    let mut closure_mismatches = Vec::new();
    for (i, b) in budgets.iter().enumerate() {
        let ev = run(PredictorKind::Discovery, *b)?;
        rows.push(row(PredictorKind::Discovery, Some(*b), &ev));
        if i + 1 == budgets.len() {
            for ((p, c), o) in ev.predictions.iter().zip(&ev.contexts).zip(&oracle.predictions) {
                let closed = c.as_ref().is_some_and(|c| c.closed);
                let name = format!("{}/{}", p.world_ref, p.episode_id);
                if closed && p.audits != o.audits && !closure_mismatches.contains(&name) {
                    closure_mismatches.push(name);
                }
            }
        }
        evals.insert(format!("discovery@{b}"), ev);
    }
    rows.push(row(PredictorKind::Oracle, None, &oracle));
    evals.insert("direct".into(), direct);
    evals.insert("oracle".into(), oracle);
    Ok((Sandwich { rows, closure_mismatches }, evals))
}
