//! Domain types shared by every stage of the pipeline.
//!
//! All values are immutable after construction. Constructors validate the
//! invariants, so anything holding a `BoundingBox` or `PreferencePair` can
//! rely on them without re-checking.

use std::fmt;

use thiserror::Error;

/// Violation of a domain invariant, tagged with the offending field path.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invariant violated at `{path}`: {message}")]
pub struct InvariantError {
    pub path: String,
    pub message: String,
}

impl InvariantError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Prefix the field path, e.g. `bbox` becomes `winner.bbox`.
    pub fn within(mut self, parent: &str) -> Self {
        self.path = if self.path.is_empty() {
            parent.to_string()
        } else {
            format!("{parent}.{}", self.path)
        };
        self
    }
}

/// Normalized rectangular region; coordinates are fractions of image
/// width/height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    /// Checks `0 <= x1 < x2 <= 1` and `0 <= y1 < y2 <= 1`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, InvariantError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(InvariantError::new("bbox", "coordinates must be finite"));
        }
        if !(0.0..=1.0).contains(&x1) || !(0.0..=1.0).contains(&x2) {
            return Err(InvariantError::new(
                "bbox",
                "x coordinates must lie in [0,1]",
            ));
        }
        if !(0.0..=1.0).contains(&y1) || !(0.0..=1.0).contains(&y2) {
            return Err(InvariantError::new(
                "bbox",
                "y coordinates must lie in [0,1]",
            ));
        }
        if x1 >= x2 {
            return Err(InvariantError::new(
                "bbox",
                format!("x1 ({x1}) >= x2 ({x2})"),
            ));
        }
        if y1 >= y2 {
            return Err(InvariantError::new(
                "bbox",
                format!("y1 ({y1}) >= y2 ({y2})"),
            ));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self, InvariantError> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Always in (0, 1].
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Closed containment test.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        other.x1 >= self.x1 && other.x2 <= self.x2 && other.y1 >= self.y1 && other.y2 <= self.y2
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Coordinate-wise equality within `tol`.
    pub fn approx_eq(&self, other: &BoundingBox, tol: f64) -> bool {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x1, self.y1, self.x2, self.y2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepRole {
    Query,
    Region,
    Answer,
}

impl StepRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepRole::Query => "query",
            StepRole::Region => "region",
            StepRole::Answer => "answer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "query" => Some(StepRole::Query),
            "region" => Some(StepRole::Region),
            "answer" => Some(StepRole::Answer),
            _ => None,
        }
    }
}

impl fmt::Display for StepRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One element `y_t` of a reasoning chain. A region step always carries a
/// box; the other roles never do.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStep {
    role: StepRole,
    text: String,
    bbox: Option<BoundingBox>,
}

impl ChainStep {
    pub fn query(text: impl Into<String>) -> Self {
        Self {
            role: StepRole::Query,
            text: text.into(),
            bbox: None,
        }
    }

    pub fn region(text: impl Into<String>, bbox: BoundingBox) -> Self {
        Self {
            role: StepRole::Region,
            text: text.into(),
            bbox: Some(bbox),
        }
    }

    pub fn answer(text: impl Into<String>) -> Self {
        Self {
            role: StepRole::Answer,
            text: text.into(),
            bbox: None,
        }
    }

    pub fn new(
        role: StepRole,
        text: impl Into<String>,
        bbox: Option<BoundingBox>,
    ) -> Result<Self, InvariantError> {
        match (role, bbox.is_some()) {
            (StepRole::Region, false) => Err(InvariantError::new(
                "bbox",
                "region step requires a bounding box",
            )),
            (StepRole::Query | StepRole::Answer, true) => Err(InvariantError::new(
                "bbox",
                format!("{role} step must not carry a bounding box"),
            )),
            _ => Ok(Self {
                role,
                text: text.into(),
                bbox,
            }),
        }
    }

    pub fn role(&self) -> StepRole {
        self.role
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn bbox(&self) -> Option<&BoundingBox> {
        self.bbox.as_ref()
    }
}

/// A problem found by [`validate_chain`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainViolation {
    Empty,
    QueryNotFirst,
    QueryAfterStart {
        position: usize,
    },
    ExpectedRole {
        position: usize,
        expected: StepRole,
        found: StepRole,
    },
    MissingBbox {
        position: usize,
    },
    UnexpectedBbox {
        position: usize,
    },
}

impl fmt::Display for ChainViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainViolation::Empty => f.write_str("chain is empty"),
            ChainViolation::QueryNotFirst => f.write_str("query not first"),
            ChainViolation::QueryAfterStart { position } => {
                write!(f, "query step at position {position}")
            }
            ChainViolation::ExpectedRole {
                position,
                expected,
                found,
            } => write!(
                f,
                "expected {expected} at position {position}, found {found}"
            ),
            ChainViolation::MissingBbox { position } => {
                write!(f, "region step at position {position} has no bbox")
            }
            ChainViolation::UnexpectedBbox { position } => {
                write!(f, "non-region step at position {position} carries a bbox")
            }
        }
    }
}

/// Checks the chain invariants: non-empty, query first and only first,
/// then alternating region/answer steps, boxes exactly on region steps.
pub fn validate_chain(chain: &ResponseChain) -> Vec<ChainViolation> {
    validate_steps(&chain.steps)
}

fn validate_steps(steps: &[ChainStep]) -> Vec<ChainViolation> {
    let mut out = Vec::new();
    if steps.is_empty() {
        out.push(ChainViolation::Empty);
        return out;
    }
    if steps[0].role != StepRole::Query {
        out.push(ChainViolation::QueryNotFirst);
    }
    for (pos, step) in steps.iter().enumerate() {
        match (step.role, step.bbox.is_some()) {
            (StepRole::Region, false) => out.push(ChainViolation::MissingBbox { position: pos }),
            (StepRole::Query | StepRole::Answer, true) => {
                out.push(ChainViolation::UnexpectedBbox { position: pos })
            }
            _ => {}
        }
        if pos == 0 {
            continue;
        }
        if step.role == StepRole::Query {
            out.push(ChainViolation::QueryAfterStart { position: pos });
            continue;
        }
        let expected = if pos % 2 == 1 {
            StepRole::Region
        } else {
            StepRole::Answer
        };
        if step.role != expected {
            out.push(ChainViolation::ExpectedRole {
                position: pos,
                expected,
                found: step.role,
            });
        }
    }
    out
}

/// Ordered steps `y_0..y_t` of one reasoning episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseChain {
    query_id: String,
    steps: Vec<ChainStep>,
}

impl ResponseChain {
    /// Chain holding only the query step `y_0`.
    pub fn start(query_id: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            steps: vec![ChainStep::query(question)],
        }
    }

    pub fn from_steps(
        query_id: impl Into<String>,
        steps: Vec<ChainStep>,
    ) -> Result<Self, Vec<ChainViolation>> {
        let violations = validate_steps(&steps);
        if violations.is_empty() {
            Ok(Self {
                query_id: query_id.into(),
                steps,
            })
        } else {
            Err(violations)
        }
    }

    /// Builds a chain without checking it; used by tests that need to
    /// exercise [`validate_chain`] on malformed input.
    pub fn from_steps_unchecked(query_id: impl Into<String>, steps: Vec<ChainStep>) -> Self {
        Self {
            query_id: query_id.into(),
            steps,
        }
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn steps(&self) -> &[ChainStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn question(&self) -> &str {
        self.steps.first().map(|s| s.text()).unwrap_or("")
    }

    pub fn last_region(&self) -> Option<&BoundingBox> {
        self.steps
            .iter()
            .rev()
            .find(|s| s.role == StepRole::Region)
            .and_then(|s| s.bbox())
    }

    pub fn last_answer(&self) -> Option<&ChainStep> {
        self.steps.iter().rev().find(|s| s.role == StepRole::Answer)
    }

    /// Number of completed region steps.
    pub fn region_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.role == StepRole::Region)
            .count()
    }

    /// Returns a new chain with `step` appended; `self` is untouched.
    pub fn appended(&self, step: ChainStep) -> Self {
        let mut steps = self.steps.clone();
        steps.push(step);
        Self {
            query_id: self.query_id.clone(),
            steps,
        }
    }
}

/// A candidate response with its evaluator scores:
/// `score = score_cur + gamma * score_next`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredResponse {
    step: ChainStep,
    score_cur: f64,
    score_next: f64,
    score: f64,
}

impl ScoredResponse {
    /// Combines the two evaluator scores with `gamma`.
    pub fn combine(
        step: ChainStep,
        score_cur: f64,
        score_next: f64,
        gamma: f64,
    ) -> Result<Self, InvariantError> {
        Self::from_parts(step, score_cur, score_next, score_cur + gamma * score_next)
    }

    /// Rebuilds a stored response; the combined score is taken verbatim.
    pub fn from_parts(
        step: ChainStep,
        score_cur: f64,
        score_next: f64,
        score: f64,
    ) -> Result<Self, InvariantError> {
        if step.role == StepRole::Query {
            return Err(InvariantError::new(
                "text",
                "a response cannot be a query step",
            ));
        }
        if !(0.0..=1.0).contains(&score_cur) {
            return Err(InvariantError::new(
                "score_cur",
                format!("{score_cur} outside [0,1]"),
            ));
        }
        if !(0.0..=1.0).contains(&score_next) {
            return Err(InvariantError::new(
                "score_next",
                format!("{score_next} outside [0,1]"),
            ));
        }
        if !score.is_finite() || score < 0.0 {
            return Err(InvariantError::new(
                "score",
                format!("{score} must be finite and >= 0"),
            ));
        }
        Ok(Self {
            step,
            score_cur,
            score_next,
            score,
        })
    }

    pub fn step(&self) -> &ChainStep {
        &self.step
    }
    pub fn score_cur(&self) -> f64 {
        self.score_cur
    }
    pub fn score_next(&self) -> f64 {
        self.score_next
    }
    pub fn score(&self) -> f64 {
        self.score
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMeta {
    pub gamma: f64,
    pub n_candidates: usize,
}

/// `{y_w, s_w, y_l, s_l}` sharing the context `y_{0:t-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    query_id: String,
    timestep: usize,
    context: ResponseChain,
    winner: ScoredResponse,
    loser: ScoredResponse,
    meta: PairMeta,
}

impl PreferencePair {
    pub fn new(
        context: ResponseChain,
        timestep: usize,
        winner: ScoredResponse,
        loser: ScoredResponse,
        meta: PairMeta,
    ) -> Result<Self, InvariantError> {
        if timestep < 1 {
            return Err(InvariantError::new("timestep", "must be >= 1"));
        }
        let violations = validate_chain(&context);
        if let Some(v) = violations.first() {
            return Err(InvariantError::new("context", v.to_string()));
        }
        if winner.score <= loser.score {
            return Err(InvariantError::new(
                "winner.score",
                format!(
                    "winner score {} must be strictly greater than loser score {}",
                    winner.score, loser.score
                ),
            ));
        }
        if winner.step == loser.step {
            return Err(InvariantError::new(
                "winner",
                "winner and loser steps are identical",
            ));
        }
        if !meta.gamma.is_finite() || meta.gamma < 0.0 {
            return Err(InvariantError::new("meta.gamma", "must be finite and >= 0"));
        }
        Ok(Self {
            query_id: context.query_id.clone(),
            timestep,
            context,
            winner,
            loser,
            meta,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }
    pub fn timestep(&self) -> usize {
        self.timestep
    }
    pub fn context(&self) -> &ResponseChain {
        &self.context
    }
    pub fn winner(&self) -> &ScoredResponse {
        &self.winner
    }
    pub fn loser(&self) -> &ScoredResponse {
        &self.loser
    }
    pub fn meta(&self) -> &PairMeta {
        &self.meta
    }

    pub fn score_gap(&self) -> f64 {
        self.winner.score - self.loser.score
    }
}
