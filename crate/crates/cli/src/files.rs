//! Reading inputs and writing outputs atomically.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::anyhow;
use rulecascade::benchgen::Episode;
use rulecascade::world::World;
use serde::Serialize;

use crate::Failure;

/// Write `bytes` to a sibling temp file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let ctx = || format!("writing {}", path.display());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(e).context(ctx()))?;
    }
    let name = path.file_name().ok_or_else(|| Failure::io(anyhow!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let written = fs::File::create(&tmp).and_then(|mut f| {
        f.write_all(bytes)?;
        f.sync_all()
    });
    if let Err(e) = written.and_then(|()| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(Failure::io(e).context(ctx()));
    }
    Ok(())
}

/// One compact JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), Failure> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(Failure::internal)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(e).context(format!("reading {}", path.display())))
}

/// The name episodes use to refer to a world file.
pub fn world_ref(path: &Path) -> Result<String, Failure> {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Failure::io(anyhow!("{} is not a file path", path.display())))
}

/// Parse a world file and check that its seed and rules load.
pub fn load_world(path: &Path) -> Result<World, Failure> {
    let malformed = |e: anyhow::Error| Failure::io(e).context(format!("malformed world file {}", path.display()));
    let world: World = serde_json::from_str(&read(path)?).map_err(|e| malformed(e.into()))?;
    world.engine().map_err(|e| malformed(e.into()))?;
    Ok(world)
}

pub fn load_bench(path: &Path) -> Result<Vec<Episode>, Failure> {
    let text = read(path)?;
    let mut episodes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ep = serde_json::from_str(line)
            .map_err(|e| Failure::io(e).context(format!("malformed episode on line {} of {}", i + 1, path.display())))?;
        episodes.push(ep);
    }
    Ok(episodes)
}
