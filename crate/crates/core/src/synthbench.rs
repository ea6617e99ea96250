//! Grid region-reasoning benchmark.
//!
//! A task is a `G x G` grid of glyphs and a question about one cell (the
//! key cell). Regions are grid-aligned boxes in normalized coordinates:
//! cell `(r, c)` spans `x in [c/G, (c+1)/G]`, `y in [r/G, (r+1)/G]`.
//! In two-stage mode the first step picks one of four quadrants and the
//! second picks a cell inside the chosen quadrant.
//!
//! The answer oracle only reads glyphs through regions no larger than a
//! cell. A quadrant is too coarse to read, so any answer given from a
//! quadrant alone is a blind guess: the quadrant choice only pays off
//! through the answer reached after the next step.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::Query;
use crate::policy::{argmax, PolicyError, RegionFeatures, ToyPolicy};
use crate::seed::{rng_from, stable_hash};
use crate::types::BoundingBox;

/// Size of the glyph alphabet; glyph `i` is rendered as the `i`-th capital letter.
pub const N_GLYPHS: u32 = 26;
/// Features per region at one stage.
pub const STAGE_FEATURES: usize = 8;
/// Index of the `both_match` feature within a stage block.
pub const BOTH_MATCH: usize = 2;
/// Tolerance used when matching boxes against candidate regions.
pub const BOX_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("grid_size must be >= 2, got {0}")]
    GridSize(usize),
    #[error("p_hit must lie in (0, 1], got {0}")]
    PHit(f64),
    #[error("stage {stage} is not valid for a {mode:?} task")]
    Stage { stage: usize, mode: StageMode },
    #[error("invalid parent region: {0}")]
    ParentRegion(String),
    #[error("task payload for `{query_id}`: {message}")]
    Payload { query_id: String, message: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("task list is empty")]
    NoTasks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Single,
    TwoStage,
}

impl StageMode {
    pub fn stages(&self) -> usize {
        match self {
            StageMode::Single => 1,
            StageMode::TwoStage => 2,
        }
    }

    /// Policy feature dimension. Each stage owns its own block of weights.
    pub fn feature_dim(&self) -> usize {
        STAGE_FEATURES * self.stages()
    }
}

pub fn glyph_text(glyph: u32) -> String {
    char::from_u32('A' as u32 + glyph)
        .map(String::from)
        .unwrap_or_else(|| format!("#{glyph}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub task_id: String,
    pub grid_size: usize,
    pub symbols: Vec<Vec<u32>>,
    pub key_row: usize,
    pub key_col: usize,
    pub question: String,
    pub ground_truth: u32,
    pub stage_mode: StageMode,
    pub p_hit: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskPayload {
    grid_size: usize,
    symbols: Vec<Vec<u32>>,
    key: [usize; 2],
    stage_mode: StageMode,
    p_hit: f64,
    seed: u64,
}

pub fn question_text(row: usize, col: usize) -> String {
    format!("What symbol is at row {row}, col {col}?")
}

/// Seeded uniform glyph fill and uniform key cell.
pub fn make_task(
    seed: u64,
    grid_size: usize,
    stage_mode: StageMode,
    p_hit: f64,
) -> Result<SyntheticTask, BenchError> {
    if grid_size < 2 {
        return Err(BenchError::GridSize(grid_size));
    }
    if !(p_hit > 0.0 && p_hit <= 1.0) {
        return Err(BenchError::PHit(p_hit));
    }
    let mut rng = rng_from(stable_hash("make_task", &[seed]));
    let symbols: Vec<Vec<u32>> = (0..grid_size)
        .map(|_| {
            (0..grid_size)
                .map(|_| rng.random_range(0..N_GLYPHS))
                .collect()
        })
        .collect();
    let key_row = rng.random_range(0..grid_size);
    let key_col = rng.random_range(0..grid_size);
    Ok(SyntheticTask {
        task_id: format!("task-{seed}"),
        grid_size,
        ground_truth: symbols[key_row][key_col],
        symbols,
        key_row,
        key_col,
        question: question_text(key_row, key_col),
        stage_mode,
        p_hit,
        seed,
    })
}

impl SyntheticTask {
    pub fn ground_truth_text(&self) -> String {
        glyph_text(self.ground_truth)
    }

    pub fn to_query(&self) -> Query {
        let payload = TaskPayload {
            grid_size: self.grid_size,
            symbols: self.symbols.clone(),
            key: [self.key_row, self.key_col],
            stage_mode: self.stage_mode,
            p_hit: self.p_hit,
            seed: self.seed,
        };
        Query {
            query_id: self.task_id.clone(),
            question: self.question.clone(),
            task: serde_json::to_value(payload).expect("payload is serializable"),
        }
    }

    pub fn from_query(query: &Query) -> Result<Self, BenchError> {
        let err = |message: String| BenchError::Payload {
            query_id: query.query_id.clone(),
            message,
        };
        let p: TaskPayload =
            serde_json::from_value(query.task.clone()).map_err(|e| err(e.to_string()))?;
        let g = p.grid_size;
        if g < 2 {
            return Err(BenchError::GridSize(g));
        }
        if !(p.p_hit > 0.0 && p.p_hit <= 1.0) {
            return Err(BenchError::PHit(p.p_hit));
        }
        if p.symbols.len() != g || p.symbols.iter().any(|r| r.len() != g) {
            return Err(err(format!("symbols must be a {g}x{g} array")));
        }
        let [key_row, key_col] = p.key;
        if key_row >= g || key_col >= g {
            return Err(err(format!("key {:?} out of range", p.key)));
        }
        Ok(Self {
            task_id: query.query_id.clone(),
            grid_size: g,
            ground_truth: p.symbols[key_row][key_col],
            symbols: p.symbols,
            key_row,
            key_col,
            question: query.question.clone(),
            stage_mode: p.stage_mode,
            p_hit: p.p_hit,
            seed: p.seed,
        })
    }

    fn cell_size(&self) -> f64 {
        1.0 / self.grid_size as f64
    }

    /// Center of the key cell in normalized coordinates.
    pub fn key_center(&self) -> (f64, f64) {
        let g = self.grid_size as f64;
        (
            (self.key_col as f64 + 0.5) / g,
            (self.key_row as f64 + 0.5) / g,
        )
    }

    pub fn region_hits_key(&self, region: &BoundingBox) -> bool {
        let (x, y) = self.key_center();
        region.contains_point(x, y)
    }

    /// A region can be read only if it is no larger than one cell.
    pub fn is_legible(&self, region: &BoundingBox) -> bool {
        let cell = self.cell_size();
        region.area() <= cell * cell * (1.0 + 1e-9)
    }
}

/// Grid-aligned block of cells, rows `r0..r1` and columns `c0..c1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpan {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl CellSpan {
    pub fn to_box(&self, grid_size: usize) -> BoundingBox {
        let g = grid_size as f64;
        BoundingBox::new(
            self.c0 as f64 / g,
            self.r0 as f64 / g,
            self.c1 as f64 / g,
            self.r1 as f64 / g,
        )
        .expect("grid spans are non-empty")
    }

    fn cells(&self) -> impl Iterator<Item = CellSpan> + '_ {
        (self.r0..self.r1).flat_map(move |r| {
            (self.c0..self.c1).map(move |c| CellSpan {
                r0: r,
                r1: r + 1,
                c0: c,
                c1: c + 1,
            })
        })
    }
}

fn quadrants(g: usize) -> [CellSpan; 4] {
    let h = g / 2;
    [
        CellSpan {
            r0: 0,
            r1: h,
            c0: 0,
            c1: h,
        },
        CellSpan {
            r0: 0,
            r1: h,
            c0: h,
            c1: g,
        },
        CellSpan {
            r0: h,
            r1: g,
            c0: 0,
            c1: h,
        },
        CellSpan {
            r0: h,
            r1: g,
            c0: h,
            c1: g,
        },
    ]
}

/// Candidate regions for one step, with features aligned to `regions`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub regions: Vec<BoundingBox>,
    pub features: Vec<RegionFeatures>,
    pub spans: Vec<CellSpan>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Index of the candidate whose box matches `region` within [`BOX_TOL`].
    pub fn find(&self, region: &BoundingBox) -> Option<usize> {
        self.regions
            .iter()
            .position(|r| r.approx_eq(region, BOX_TOL))
    }

    /// Candidate covering the key cell center.
    pub fn key_index(&self, task: &SyntheticTask) -> Option<usize> {
        self.regions.iter().position(|r| task.region_hits_key(r))
    }
}

fn span_features(task: &SyntheticTask, span: &CellSpan, noise: [f64; 2]) -> [f64; STAGE_FEATURES] {
    let g = task.grid_size as f64;
    let row_match = (span.r0..span.r1).contains(&task.key_row);
    let col_match = (span.c0..span.c1).contains(&task.key_col);
    let center_r = 0.5 * (span.r0 + span.r1) as f64;
    let center_c = 0.5 * (span.c0 + span.c1) as f64;
    let key_r = task.key_row as f64 + 0.5;
    let key_c = task.key_col as f64 + 0.5;
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    [
        flag(row_match),
        flag(col_match),
        flag(row_match && col_match),
        1.0 - (center_r - key_r).abs() / g,
        1.0 - (center_c - key_c).abs() / g,
        1.0,
        noise[0],
        noise[1],
    ]
}

/// Candidates at `stage` (1-based). Two-stage tasks need the chosen
/// quadrant as `parent_region` at stage 2; single-stage tasks ignore it.
pub fn candidate_set(
    task: &SyntheticTask,
    stage: usize,
    parent_region: Option<&BoundingBox>,
) -> Result<CandidateSet, BenchError> {
    let g = task.grid_size;
    let whole = CellSpan {
        r0: 0,
        r1: g,
        c0: 0,
        c1: g,
    };
    let (spans, parent_idx): (Vec<CellSpan>, u64) = match (task.stage_mode, stage) {
        (StageMode::Single, 1) => (whole.cells().collect(), 0),
        (StageMode::TwoStage, 1) => (quadrants(g).to_vec(), 0),
        (StageMode::TwoStage, 2) => {
            let parent = parent_region.ok_or_else(|| {
                BenchError::ParentRegion("stage 2 requires a parent quadrant".into())
            })?;
            let quads = quadrants(g);
            let qi = quads
                .iter()
                .position(|q| q.to_box(g).approx_eq(parent, BOX_TOL))
                .ok_or_else(|| BenchError::ParentRegion(format!("{parent} is not a quadrant")))?;
            (quads[qi].cells().collect(), qi as u64 + 1)
        }
        (mode, stage) => return Err(BenchError::Stage { stage, mode }),
    };
    let dim = task.stage_mode.feature_dim();
    let offset = (stage - 1) * STAGE_FEATURES;
    let mut rng = rng_from(stable_hash(
        "features",
        &[task.seed, stage as u64, parent_idx],
    ));
    let mut regions = Vec::with_capacity(spans.len());
    let mut features = Vec::with_capacity(spans.len());
    for span in &spans {
        let noise = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let mut v = vec![0.0; dim];
        v[offset..offset + STAGE_FEATURES].copy_from_slice(&span_features(task, span, noise));
        regions.push(span.to_box(g));
        features.push(RegionFeatures::new(v)?);
    }
    Ok(CandidateSet {
        regions,
        features,
        spans,
    })
}

/// The fixed answer head. Reads the key glyph (with probability `p_hit`)
/// when a legible region covers the key cell; answers from other legible
/// regions are wrong with probability `p_hit`; illegible regions yield a
/// uniform guess over the alphabet.
pub fn oracle_answer(task: &SyntheticTask, region: &BoundingBox, seed: u64) -> u32 {
    let mut rng = rng_from(seed);
    if !task.is_legible(region) {
        return rng.random_range(0..N_GLYPHS);
    }
    let hit = rng.random_bool(task.p_hit);
    let correct = if task.region_hits_key(region) {
        hit
    } else {
        !hit
    };
    if correct {
        task.ground_truth
    } else {
        let g = rng.random_range(0..N_GLYPHS - 1);
        if g >= task.ground_truth {
            g + 1
        } else {
            g
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub region_accuracy: f64,
    pub answer_score: f64,
}

/// Final region chosen greedily stage by stage.
pub fn greedy_region(policy: &ToyPolicy, task: &SyntheticTask) -> Result<BoundingBox, BenchError> {
    let mut parent: Option<BoundingBox> = None;
    for stage in 1..=task.stage_mode.stages() {
        let cs = candidate_set(task, stage, parent.as_ref())?;
        let logits = policy.logits(&cs.features)?;
        parent = Some(cs.regions[argmax(&logits)]);
    }
    Ok(parent.expect("at least one stage"))
}

/// Greedy evaluation with a noise-free evaluator.
pub fn evaluate_policy(
    policy: &ToyPolicy,
    tasks: &[SyntheticTask],
) -> Result<EvalResult, BenchError> {
    if tasks.is_empty() {
        return Err(BenchError::NoTasks);
    }
    let mut hits = 0usize;
    let mut correct = 0usize;
    for task in tasks {
        let region = greedy_region(policy, task)?;
        if task.region_hits_key(&region) {
            hits += 1;
        }
        let seed = stable_hash(&task.task_id, &[crate::seed::Purpose::EvalAnswer as u64]);
        if oracle_answer(task, &region, seed) == task.ground_truth {
            correct += 1;
        }
    }
    let n = tasks.len() as f64;
    Ok(EvalResult {
        region_accuracy: hits as f64 / n,
        answer_score: correct as f64 / n,
    })
}

/// Weights on `both_match` only: picks the key region at every stage.
pub fn oracle_policy(stage_mode: StageMode, strength: f64) -> ToyPolicy {
    let mut w = vec![0.0; stage_mode.feature_dim()];
    for s in 0..stage_mode.stages() {
        w[s * STAGE_FEATURES + BOTH_MATCH] = strength;
    }
    ToyPolicy::from_weights(w).expect("finite weights")
}

/// `count` tasks with seeds `first_seed..first_seed + count`.
pub fn make_tasks(
    first_seed: u64,
    count: usize,
    grid_size: usize,
    stage_mode: StageMode,
    p_hit: f64,
) -> Result<Vec<SyntheticTask>, BenchError> {
    (0..count as u64)
        .map(|i| make_task(first_seed + i, grid_size, stage_mode, p_hit))
        .collect()
}
