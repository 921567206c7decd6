use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::world::World;
use crate::error::{FaeError, Result};

/// Writes one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| FaeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| FaeError::io(path, e))?;
    }
    w.flush().map_err(|e| FaeError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| FaeError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FaeError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FaeError::Parse {
            location: format!("{}:{}", path.display(), i + 1),
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_world(path: &Path, world: &World) -> Result<()> {
    let text = serde_json::to_string_pretty(world)?;
    fs::write(path, text).map_err(|e| FaeError::io(path, e))
}

pub fn read_world(path: &Path) -> Result<World> {
    let text = fs::read_to_string(path).map_err(|e| FaeError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FaeError::Parse {
        location: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Tab-separated `id<TAB>name` lines for entities and relations.
pub fn write_vocab_files(dir: &Path, world: &World) -> Result<()> {
    let mut ents = String::from("# id\tname\n");
    for (i, e) in world.entities.iter().enumerate() {
        ents.push_str(&format!("{i}\t{}\n", e.name));
    }
    let mut rels = String::from("# id\tname\n");
    for (i, r) in world.relations.iter().enumerate() {
        rels.push_str(&format!("{i}\t{}\n", r.name));
    }
    let p = dir.join("entities.tsv");
    fs::write(&p, ents).map_err(|e| FaeError::io(&p, e))?;
    let p = dir.join("relations.tsv");
    fs::write(&p, rels).map_err(|e| FaeError::io(&p, e))
}
