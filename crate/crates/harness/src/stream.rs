//! JSONL event streams: one object per line, tagged by `op`.

use std::io::{BufRead, Write};

use anyhow::{bail, Context, Result};
use aqp_core::{Event, Query, Tuple};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Op {
    Insert(Tuple),
    Delete { id: u64 },
    Query(Query),
}

impl Op {
    pub fn event(&self) -> Option<Event> {
        match self {
            Op::Insert(t) => Some(Event::Insert(t.clone())),
            Op::Delete { id } => Some(Event::Delete { id: *id }),
            Op::Query(_) => None,
        }
    }
}

impl From<Event> for Op {
    fn from(e: Event) -> Self {
        match e {
            Event::Insert(t) => Op::Insert(t),
            Event::Delete { id } => Op::Delete { id },
        }
    }
}

/// Parses a stream, failing on the first malformed line with its 1-based number.
pub fn read_ops<R: BufRead>(r: R) -> Result<Vec<Op>> {
    let mut ops = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.with_context(|| format!("line {}: read failed", i + 1))?;
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        let op: Op = serde_json::from_str(s).with_context(|| format!("line {}: malformed event", i + 1))?;
        if let Op::Insert(t) = &op {
            if t.coords.iter().chain([&t.value]).any(|x| !x.is_finite()) {
                bail!("line {}: non-finite coordinate or value", i + 1);
            }
        }
        ops.push(op);
    }
    Ok(ops)
}

pub fn read_ops_file(path: &std::path::Path) -> Result<Vec<Op>> {
    let f = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_ops(std::io::BufReader::new(f)).with_context(|| format!("in {}", path.display()))
}

pub fn write_ops<W: Write>(mut w: W, ops: &[Op]) -> Result<()> {
    for op in ops {
        serde_json::to_writer(&mut w, op)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
