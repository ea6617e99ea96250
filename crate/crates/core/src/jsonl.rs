//! Line-oriented JSON persistence for queries and preference pairs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{
    BoundingBox, ChainStep, InvariantError, PairMeta, PreferencePair, ResponseChain,
    ScoredResponse, StepRole,
};

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: malformed JSON at `{path}`: {message}")]
    Malformed {
        line: usize,
        path: String,
        message: String,
    },
    #[error("line {line}: {source}")]
    Invariant {
        line: usize,
        #[source]
        source: InvariantError,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl JsonlError {
    /// Field path of the failure, when one is known.
    pub fn field_path(&self) -> Option<&str> {
        match self {
            JsonlError::Malformed { path, .. } => Some(path),
            JsonlError::Invariant { source, .. } => Some(&source.path),
            JsonlError::Io { .. } => None,
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            JsonlError::Malformed { line, .. } | JsonlError::Invariant { line, .. } => Some(*line),
            JsonlError::Io { .. } => None,
        }
    }

    fn at_line(self, n: usize) -> Self {
        match self {
            JsonlError::Malformed { path, message, .. } => JsonlError::Malformed {
                line: n,
                path,
                message,
            },
            JsonlError::Invariant { source, .. } => JsonlError::Invariant { line: n, source },
            other => other,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepWire {
    role: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseWire {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    score: f64,
    score_cur: f64,
    score_next: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaWire {
    gamma: f64,
    n_candidates: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairWire {
    query_id: String,
    timestep: usize,
    context: Vec<StepWire>,
    winner: ResponseWire,
    loser: ResponseWire,
    meta: MetaWire,
}

fn step_to_wire(step: &ChainStep) -> StepWire {
    StepWire {
        role: step.role().as_str().to_string(),
        text: step.text().to_string(),
        bbox: step.bbox().map(BoundingBox::to_array),
    }
}

fn response_to_wire(r: &ScoredResponse) -> ResponseWire {
    ResponseWire {
        text: r.step().text().to_string(),
        bbox: r.step().bbox().map(BoundingBox::to_array),
        score: r.score(),
        score_cur: r.score_cur(),
        score_next: r.score_next(),
    }
}

fn bbox_from_wire(v: Option<[f64; 4]>) -> Result<Option<BoundingBox>, InvariantError> {
    v.map(BoundingBox::from_array).transpose()
}

fn response_from_wire(w: ResponseWire) -> Result<ScoredResponse, InvariantError> {
    let bbox = bbox_from_wire(w.bbox)?;
    // Responses carry no role on the wire: a box marks a region step.
    let step = match bbox {
        Some(b) => ChainStep::region(w.text, b),
        None => ChainStep::answer(w.text),
    };
    ScoredResponse::from_parts(step, w.score_cur, w.score_next, w.score)
}

/// One JSON object, no embedded newlines. Floats use the shortest
/// round-trip decimal form.
pub fn serialize_pair(pair: &PreferencePair) -> String {
    let wire = PairWire {
        query_id: pair.query_id().to_string(),
        timestep: pair.timestep(),
        context: pair.context().steps().iter().map(step_to_wire).collect(),
        winner: response_to_wire(pair.winner()),
        loser: response_to_wire(pair.loser()),
        meta: MetaWire {
            gamma: pair.meta().gamma,
            n_candidates: pair.meta().n_candidates,
        },
    };
    serde_json::to_string(&wire).expect("pair wire format is always serializable")
}

/// Parses and validates one pair line. Errors carry the field path.
pub fn deserialize_pair(line: &str) -> Result<PreferencePair, JsonlError> {
    let de = &mut serde_json::Deserializer::from_str(line);
    let wire: PairWire = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        JsonlError::Malformed {
            line: 0,
            path,
            message: e.into_inner().to_string(),
        }
    })?;
    let inv = |source: InvariantError| JsonlError::Invariant { line: 0, source };

    let mut steps = Vec::with_capacity(wire.context.len());
    for (i, s) in wire.context.into_iter().enumerate() {
        let path = format!("context[{i}]");
        let role = StepRole::parse(&s.role).ok_or_else(|| {
            inv(InvariantError::new(
                format!("{path}.role"),
                format!("unknown role `{}`", s.role),
            ))
        })?;
        let bbox = bbox_from_wire(s.bbox).map_err(|e| inv(e.within(&path)))?;
        let step = ChainStep::new(role, s.text, bbox).map_err(|e| inv(e.within(&path)))?;
        steps.push(step);
    }
    let context = ResponseChain::from_steps(wire.query_id.clone(), steps).map_err(|v| {
        inv(InvariantError::new(
            "context",
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join("; "),
        ))
    })?;
    let winner = response_from_wire(wire.winner).map_err(|e| inv(e.within("winner")))?;
    let loser = response_from_wire(wire.loser).map_err(|e| inv(e.within("loser")))?;
    let meta = PairMeta {
        gamma: wire.meta.gamma,
        n_candidates: wire.meta.n_candidates,
    };
    PreferencePair::new(context, wire.timestep, winner, loser, meta).map_err(inv)
}

/// One line of a query file. `task` is opaque here: a synthetic task
/// payload for the simulator, or prompt material for an HTTP backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub question: String,
    pub task: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> JsonlError + '_ {
    move |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_lines<T>(
    path: &Path,
    mut parse: impl FnMut(&str) -> Result<T, JsonlError>,
) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|e| e.at_line(i + 1))?);
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>, JsonlError> {
    read_lines(path, deserialize_pair)
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<(), JsonlError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        writeln!(w, "{}", serialize_pair(p)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn parse_query(line: &str) -> Result<Query, JsonlError> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| JsonlError::Malformed {
        line: 0,
        path: e.path().to_string(),
        message: e.into_inner().to_string(),
    })
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>, JsonlError> {
    read_lines(path, parse_query)
}

pub fn write_queries(path: &Path, queries: &[Query]) -> Result<(), JsonlError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for q in queries {
        let line = serde_json::to_string(q).expect("query is serializable");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
