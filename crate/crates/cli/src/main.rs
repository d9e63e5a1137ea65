//! `rulecascade`: generate worlds and benchmarks, run predictors, write reports.
//!
//! Exit codes: 0 success, 1 I/O or malformed input, 2 validation rejection,
//! 3 internal invariant violation.

mod files;

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rulecascade::benchgen::{
    generate_bench, validate_cascade, BenchConfig, BenchError, CascadeSpec, Episode, Manifest, TopologyMix,
    DEFAULT_MAX_REPAIRS,
};
use rulecascade::eval::{compare, evaluate, scores_csv, EvalConfig, EvalError, Evaluation, PredictorKind, WorldSet};
use rulecascade::predict::DEFAULT_BUDGET;
use rulecascade::world::World;
use rulecascade::worldgen::{generate_world, Automation, Industry, Size, WorldProfile, WorldgenError};

use files::{load_bench, load_world, world_ref, write_atomic, write_jsonl};

#[derive(Parser, Debug)]
#[command(name = "rulecascade", version, about = "Business-rule cascade worlds, benchmarks and predictor evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a world or a benchmark.
    #[command(subcommand)]
    Generate(Generate),
    /// Run a predictor over a benchmark and score it.
    Eval(EvalArgs),
}

#[derive(Subcommand, Debug)]
enum Generate {
    /// Write a world file.
    World(WorldArgs),
    /// Write a benchmark (JSON Lines) and its manifest.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct WorldArgs {
    #[arg(long, value_parser = parse::<Industry>)]
    industry: Industry,
    #[arg(long, value_parser = parse::<Size>, default_value = "small")]
    size: Size,
    #[arg(long, value_parser = parse::<Automation>, default_value = "heavy")]
    automation: Automation,
    /// Fraction of eligible tables that receive an injected rule conflict.
    #[arg(long, default_value_t = 0.3)]
    conflict_density: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "world.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    world: PathBuf,
    /// flat, linear, complete or mixed.
    #[arg(long, value_parser = parse::<TopologyMix>, default_value = "mixed")]
    topology: TopologyMix,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_REPAIRS)]
    max_repairs: usize,
    /// Episode file; the manifest is written next to it.
    #[arg(long, default_value = "bench.jsonl")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AclOverride {
    /// Make the rules and SLA tables unreadable to discovery.
    BlockRules,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// World file; repeat for benchmarks spanning several worlds. When omitted,
    /// worlds are resolved from episode references next to the benchmark.
    #[arg(long)]
    world: Vec<PathBuf>,
    #[arg(long)]
    bench: PathBuf,
    #[arg(long, value_parser = parse::<PredictorKind>, default_value = "direct")]
    predictor: PredictorKind,
    /// Retrieval budget for discovery; with --compare, a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    budget: Vec<usize>,
    /// Rollout horizon.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    acl: Option<AclOverride>,
    /// Run direct, discovery at each budget and oracle, and write the sandwich table.
    #[arg(long)]
    compare: bool,
    #[arg(long, default_value = "eval_out")]
    out: PathBuf,
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

/// A failed run and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    error: anyhow::Error,
    /// Extra detail for standard error, such as a validation report.
    detail: Option<String>,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure { code, error: error.into(), detail: None }
    }

    pub fn io(error: impl Into<anyhow::Error>) -> Self {
        Self::new(1, error)
    }

    pub fn validation(error: impl Into<anyhow::Error>) -> Self {
        Self::new(2, error)
    }

    pub fn internal(error: impl Into<anyhow::Error>) -> Self {
        Self::new(3, error)
    }

    fn with_detail(mut self, detail: String) -> Self {
        self.detail = Some(detail);
        self
    }

    pub fn context(mut self, ctx: impl Display + Send + Sync + 'static) -> Self {
        self.error = self.error.context(ctx);
        self
    }
}

type Run<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(Generate::World(a)) => cmd_world(&a),
        Command::Generate(Generate::Bench(a)) => cmd_bench(&a),
        Command::Eval(a) => cmd_eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            if let Some(d) = f.detail {
                eprintln!("{d}");
            }
            ExitCode::from(f.code)
        }
    }
}

fn worldgen_failure(e: WorldgenError) -> Failure {
    match e {
        WorldgenError::InvalidProfile(_) => Failure::validation(e),
        _ => Failure::internal(e),
    }
}

fn cmd_world(a: &WorldArgs) -> Run {
    let profile = WorldProfile::new(a.industry, a.size, a.automation, a.conflict_density, a.seed);
    let world = generate_world(&profile).map_err(worldgen_failure)?;
    let json = serde_json::to_string_pretty(&world).map_err(Failure::internal)?;
    write_atomic(&a.out, format!("{json}\n").as_bytes())?;
    println!(
        "world {}: {} tables, {} rules, {} slas, {} conflict pairs",
        a.out.display(),
        world.registry.tables().count(),
        world.rules.len(),
        world.slas.len(),
        world.conflict_pairs.len()
    );
    Ok(())
}

/// `bench.jsonl` -> `bench.manifest.json`.
fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn print_manifest(m: &Manifest) {
    println!("episodes: {} of {} attempted ({} rejected)", m.episodes, m.attempted, m.rejected);
    for (reason, n) in &m.rejections {
        println!("  rejected {reason}: {n}");
    }
    for (t, n) in &m.topologies {
        println!("  topology {t}: {n}");
    }
    for (tier, n) in &m.tier_keys {
        println!("  {tier}: {n} keys");
    }
}

fn cmd_bench(a: &BenchArgs) -> Run {
    let world = load_world(&a.world)?;
    let cfg = BenchConfig { episodes: a.episodes, topology: a.topology, seed: a.seed, max_repairs: a.max_repairs, ..BenchConfig::default() };
    let bench = generate_bench(&world, &world_ref(&a.world)?, &cfg).map_err(|e| match e {
        BenchError::InsufficientTables { .. } => Failure::validation(e),
        _ => Failure::internal(e),
    })?;
    if a.episodes > 0 && bench.episodes.is_empty() {
        let detail = serde_json::to_string_pretty(&bench.manifest).map_err(Failure::internal)?;
        return Err(Failure::validation(anyhow::anyhow!("every sampled cascade was rejected")).with_detail(detail));
    }
    write_jsonl(&a.out, &bench.episodes)?;
    let manifest = serde_json::to_string_pretty(&bench.manifest).map_err(Failure::internal)?;
    write_atomic(&manifest_path(&a.out), format!("{manifest}\n").as_bytes())?;
    print_manifest(&bench.manifest);
    Ok(())
}

/// The cascade an episode was built from, for re-validation.
fn episode_spec(ep: &Episode) -> CascadeSpec {
    CascadeSpec {
        topology: ep.topology,
        length: ep.length,
        action: ep.action.clone(),
        rules: ep.rules.clone(),
        support: ep.support.clone(),
        conflict_pairs: ep.conflict_pairs.clone(),
        followups: ep.followups.iter().map(|s| s.action.clone()).collect(),
    }
}

fn load_worlds(a: &EvalArgs, episodes: &[Episode]) -> Run<WorldSet> {
    let mut worlds = WorldSet::new();
    for p in &a.world {
        worlds.insert(world_ref(p)?, load_world(p)?);
    }
    if a.world.is_empty() {
        let dir = a.bench.parent().unwrap_or(Path::new("."));
        for ep in episodes {
            if !worlds.contains_key(&ep.world_ref) {
                let w = load_world(&dir.join(&ep.world_ref))?;
                worlds.insert(ep.world_ref.clone(), w);
            }
        }
    }
    Ok(worlds)
}

fn revalidate(worlds: &WorldSet, episodes: &[Episode]) -> Run {
    for ep in episodes {
        let world: &World = worlds.get(&ep.world_ref).ok_or_else(|| {
            Failure::validation(anyhow::anyhow!("episode `{}` names unknown world `{}`", ep.id, ep.world_ref))
        })?;
        let report = validate_cascade(world, &episode_spec(ep));
        if !report.passed() {
            let detail = serde_json::to_string_pretty(&report).map_err(Failure::internal)?;
            return Err(Failure::validation(anyhow::anyhow!("episode `{}` fails validation", ep.id)).with_detail(detail));
        }
    }
    Ok(())
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::UnknownWorld { .. } | EvalError::ZeroHorizon | EvalError::NoEpisodes => Failure::validation(e),
        _ => Failure::internal(e),
    }
}

/// Reject flags the chosen predictor does not use.
fn check_flags(a: &EvalArgs) -> Run {
    let bad = |msg: String| Err(Failure::validation(anyhow::anyhow!(msg)));
    if a.compare {
        if a.acl.is_some() {
            return bad("--acl applies to a single discovery run, not --compare".into());
        }
        return Ok(());
    }
    if a.budget.len() > 1 {
        return bad("several budgets need --compare".into());
    }
    if a.predictor != PredictorKind::Discovery {
        if !a.budget.is_empty() {
            return bad(format!("--budget does not apply to the {} predictor", a.predictor));
        }
        if a.acl.is_some() {
            return bad(format!("--acl does not apply to the {} predictor", a.predictor));
        }
    }
    Ok(())
}

fn write_evaluation(dir: &Path, ev: &Evaluation) -> Run {
    write_jsonl(&dir.join("predictions.jsonl"), &ev.predictions)?;
    if ev.contexts.iter().any(Option::is_some) {
        let traces: Vec<_> = ev.contexts.iter().flatten().collect();
        write_jsonl(&dir.join("contexts.jsonl"), &traces)?;
    }
    let report = serde_json::to_string_pretty(&ev.report).map_err(Failure::internal)?;
    write_atomic(&dir.join("report.json"), format!("{report}\n").as_bytes())?;
    let csv = scores_csv(&ev.scores).map_err(Failure::internal)?;
    write_atomic(&dir.join("scores.csv"), csv.as_bytes())
}

fn cmd_eval(a: &EvalArgs) -> Run {
    check_flags(a)?;
    let episodes = load_bench(&a.bench)?;
    let worlds = load_worlds(a, &episodes)?;
    revalidate(&worlds, &episodes)?;
    let cfg = EvalConfig {
        predictor: a.predictor,
        budget: a.budget.first().copied().unwrap_or(DEFAULT_BUDGET),
        k: a.k as usize,
        block_rules: a.acl == Some(AclOverride::BlockRules),
        seed: a.seed,
        ..EvalConfig::default()
    };
    if a.compare {
        let budgets = if a.budget.is_empty() { vec![DEFAULT_BUDGET] } else { a.budget.clone() };
        let (sandwich, evals) = compare(&worlds, &episodes, &cfg, &budgets).map_err(eval_failure)?;
        for (name, ev) in &evals {
            write_evaluation(&a.out.join(name.replace('@', "-")), ev)?;
        }
        let json = serde_json::to_string_pretty(&sandwich).map_err(Failure::internal)?;
        write_atomic(&a.out.join("sandwich.json"), format!("{json}\n").as_bytes())?;
        for r in &sandwich.rows {
            let name = match r.budget {
                Some(b) => format!("{}@{b}", r.predictor),
                None => r.predictor.to_string(),
            };
            println!("{name:<14} iou_strict {:.4}  iou_tf {:.4}", r.iou_strict, r.iou_tf);
        }
        if !sandwich.is_monotone() {
            return Err(Failure::internal(anyhow::anyhow!("the comparison is not monotone in budget")));
        }
        if !sandwich.closure_mismatches.is_empty() {
            return Err(Failure::internal(anyhow::anyhow!(
                "closed retrieval differs from the oracle on {}",
                sandwich.closure_mismatches.join(", ")
            )));
        }
        return Ok(());
    }
    let ev = evaluate(&worlds, &episodes, &cfg).map_err(eval_failure)?;
    write_evaluation(&a.out, &ev)?;
    let o = &ev.report.overall;
    let per_tier: BTreeMap<_, _> = ev.report.per_tier.iter().map(|(t, s)| (format!("{t:?}"), s.as_ref().map(|s| s.mean))).collect();
    println!("{} episodes, {} steps", ev.report.episodes, ev.report.steps);
    println!("iou_strict {:.4} [{:.4}, {:.4}]", o.iou_strict.mean, o.iou_strict.ci_low, o.iou_strict.ci_high);
    println!("iou_tf     {:.4} [{:.4}, {:.4}]", o.iou_tf.mean, o.iou_tf.ci_low, o.iou_tf.ci_high);
    for (t, m) in per_tier {
        match m {
            Some(m) => println!("  {t}: {m:.4}"),
            None => println!("  {t}: n/a"),
        }
    }
    Ok(())
}
