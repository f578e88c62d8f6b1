//! JSONL trajectory logs: one header line, then one trajectory per line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Trajectory;
use crate::FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format_version: u32,
    pub kind: String,
    pub count: usize,
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = LogHeader {
        format_version: FORMAT_VERSION,
        kind: "trajectories".into(),
        count: trajectories.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a log and checks every trajectory against the MDP invariants.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: LogHeader = serde_json::from_str(&first)?;
    if header.format_version != FORMAT_VERSION || header.kind != "trajectories" {
        return Err(Error::Data(format!(
            "{}: unsupported log (kind {}, format {})",
            path.display(),
            header.kind,
            header.format_version
        )));
    }
    let mut out = Vec::with_capacity(header.count);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line)?;
        if let Some(v) = crate::mdp::validate(&t).first() {
            return Err(Error::Data(format!("episode {}: {v:?}", t.episode_id)));
        }
        out.push(t);
    }
    if out.len() != header.count {
        return Err(Error::Data(format!(
            "{}: header says {} trajectories, found {}",
            path.display(),
            header.count,
            out.len()
        )));
    }
    Ok(out)
}
