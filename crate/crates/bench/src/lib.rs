//! Shared fixtures for the criterion benches.

use rulecascade::benchgen::{generate_bench, BenchConfig, Episode, TopologyMix};
use rulecascade::eval::WorldSet;
use rulecascade::world::World;
use rulecascade::worldgen::{generate_world, Automation, Industry, Size, WorldProfile};

/// File name the fixture episodes use for their world.
pub const WORLD_REF: &str = "bench_world.json";

/// A deterministic world of the given size.
pub fn world(size: Size, seed: u64) -> World {
    generate_world(&WorldProfile::new(Industry::Technology, size, Automation::Heavy, 0.3, seed)).expect("fixture profile is valid")
}

/// `n` mixed-topology episodes over `world`.
pub fn episodes(world: &World, n: usize, seed: u64) -> Vec<Episode> {
    let cfg = BenchConfig { episodes: n, topology: TopologyMix::Mixed, seed, ..BenchConfig::default() };
    generate_bench(world, WORLD_REF, &cfg).expect("fixture bench generates").episodes
}

/// The world keyed the way `episodes` refers to it.
pub fn world_set(world: &World) -> WorldSet {
    WorldSet::from([(WORLD_REF.to_string(), world.clone())])
}
