//! Benchmark score aggregation.
//!
//! Each sample carries four 5-point judge ratings. `Overall` is the mean over
//! samples of the four-way average. `Weighted` replaces consistency with
//! `(effect / divisor) * consistency` before averaging, so an edit that
//! changes nothing cannot score well on consistency alone. The divisor
//! defaults to the rating maximum and is reported in every summary.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const METRIC_VERSION: &str = "1";
pub const DEFAULT_NORMALIZATION_DIVISOR: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("no score records")]
    Empty,
    #[error("sample {sample_id}: {field} = {value} is outside [1, 5]")]
    Rating { sample_id: String, field: &'static str, value: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("normalization divisor must be positive, got {0}")]
    Divisor(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferringType {
    Visual,
    Structural,
    Content,
    Feature,
    Spatial,
    Knowledge,
    Understanding,
}

impl ReferringType {
    pub const ALL: [ReferringType; 7] = [
        Self::Visual,
        Self::Structural,
        Self::Content,
        Self::Feature,
        Self::Spatial,
        Self::Knowledge,
        Self::Understanding,
    ];

    /// Sample count of this category in the released benchmark.
    pub fn published_count(self) -> usize {
        match self {
            Self::Visual => 90,
            Self::Structural => 87,
            Self::Content => 92,
            Self::Feature => 135,
            Self::Spatial => 152,
            Self::Knowledge => 111,
            Self::Understanding => 136,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Add,
    Delete,
    Replacement,
    Attribute,
    PartsModification,
    StateModification,
    ModifyHumanAnimal,
    Interaction,
    Prediction,
    PhysicsReasoning,
    ScenarioReasoning,
    OpenEndedReasoning,
    KnowledgeReasoning,
    TextContentEdit,
    TextStyleEdit,
    TextReasoningEdit,
}

impl TaskType {
    pub const ALL: [TaskType; 16] = [
        Self::Add,
        Self::Delete,
        Self::Replacement,
        Self::Attribute,
        Self::PartsModification,
        Self::StateModification,
        Self::ModifyHumanAnimal,
        Self::Interaction,
        Self::Prediction,
        Self::PhysicsReasoning,
        Self::ScenarioReasoning,
        Self::OpenEndedReasoning,
        Self::KnowledgeReasoning,
        Self::TextContentEdit,
        Self::TextStyleEdit,
        Self::TextReasoningEdit,
    ];

    pub fn published_count(self) -> usize {
        match self {
            Self::Add => 10,
            Self::Delete => 27,
            Self::Replacement => 41,
            Self::Attribute => 59,
            Self::PartsModification => 38,
            Self::StateModification => 32,
            Self::ModifyHumanAnimal => 18,
            Self::Interaction => 32,
            Self::Prediction => 120,
            Self::PhysicsReasoning => 53,
            Self::ScenarioReasoning => 54,
            Self::OpenEndedReasoning => 6,
            Self::KnowledgeReasoning => 44,
            Self::TextContentEdit => 122,
            Self::TextStyleEdit => 70,
            Self::TextReasoningEdit => 77,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub target: f64,
    pub consistency: f64,
    pub quality: f64,
    pub effect: f64,
    pub referring_type: ReferringType,
    pub task_type: TaskType,
    pub region_count: u32,
}

impl ScoreRecord {
    pub fn validate(&self) -> Result<(), BenchError> {
        for (field, value) in [
            ("target", self.target),
            ("consistency", self.consistency),
            ("quality", self.quality),
            ("effect", self.effect),
        ] {
            if !(1.0..=5.0).contains(&value) {
                return Err(BenchError::Rating { sample_id: self.sample_id.clone(), field, value });
            }
        }
        Ok(())
    }

    pub fn overall(&self) -> f64 {
        (self.target + self.consistency + self.quality + self.effect) / 4.0
    }

    pub fn weighted(&self, divisor: f64) -> f64 {
        (self.target + self.quality + self.effect + self.effect / divisor * self.consistency) / 4.0
    }
}

/// Instruction metadata line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionMeta {
    pub sample_id: String,
    pub instruction: String,
    pub referring_type: ReferringType,
    pub task_type: TaskType,
    pub region_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub normalization_divisor: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { normalization_divisor: DEFAULT_NORMALIZATION_DIVISOR }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionMeans {
    pub quality: f64,
    pub target: f64,
    pub effect: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub count: usize,
    pub overall: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
    /// Word count -> number of instructions.
    pub histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sample_count: usize,
    pub words: Option<WordStats>,
    pub multi_region_count: usize,
    pub region_count_histogram: BTreeMap<u32, usize>,
    pub referring_counts: BTreeMap<ReferringType, usize>,
    pub task_counts: BTreeMap<TaskType, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub metric_version: String,
    pub normalization_divisor: f64,
    pub sample_count: usize,
    pub overall: f64,
    pub weighted: f64,
    pub dimensions: DimensionMeans,
    pub by_referring_type: BTreeMap<ReferringType, CategorySummary>,
    pub by_task_type: BTreeMap<TaskType, CategorySummary>,
}

/// Signed `b - a` for each aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryDelta {
    pub overall: f64,
    pub weighted: f64,
    pub quality: f64,
    pub target: f64,
    pub effect: f64,
    pub consistency: f64,
    pub sample_count: i64,
}

fn mean_of(records: &[ScoreRecord], f: impl Fn(&ScoreRecord) -> f64) -> f64 {
    records.iter().map(f).sum::<f64>() / records.len() as f64
}

fn check(records: &[ScoreRecord]) -> Result<(), BenchError> {
    if records.is_empty() {
        return Err(BenchError::Empty);
    }
    records.iter().try_for_each(ScoreRecord::validate)
}

pub fn overall_score(records: &[ScoreRecord]) -> Result<f64, BenchError> {
    check(records)?;
    Ok(mean_of(records, ScoreRecord::overall))
}

pub fn weighted_score(records: &[ScoreRecord], cfg: &BenchConfig) -> Result<f64, BenchError> {
    check(records)?;
    if !(cfg.normalization_divisor > 0.0 && cfg.normalization_divisor.is_finite()) {
        return Err(BenchError::Divisor(cfg.normalization_divisor));
    }
    Ok(mean_of(records, |r| r.weighted(cfg.normalization_divisor)))
}

fn by_category<K: Ord + Copy>(
    records: &[ScoreRecord],
    key: impl Fn(&ScoreRecord) -> K,
    divisor: f64,
) -> BTreeMap<K, CategorySummary> {
    let mut groups: BTreeMap<K, Vec<ScoreRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(key(r)).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(k, rs)| {
            let summary = CategorySummary {
                count: rs.len(),
                overall: mean_of(&rs, ScoreRecord::overall),
                weighted: mean_of(&rs, |r| r.weighted(divisor)),
            };
            (k, summary)
        })
        .collect()
}

pub fn summarize(records: &[ScoreRecord], cfg: &BenchConfig) -> Result<BenchmarkSummary, BenchError> {
    let overall = overall_score(records)?;
    let weighted = weighted_score(records, cfg)?;
    let d = cfg.normalization_divisor;
    Ok(BenchmarkSummary {
        metric_version: METRIC_VERSION.to_string(),
        normalization_divisor: d,
        sample_count: records.len(),
        overall,
        weighted,
        dimensions: DimensionMeans {
            quality: mean_of(records, |r| r.quality),
            target: mean_of(records, |r| r.target),
            effect: mean_of(records, |r| r.effect),
            consistency: mean_of(records, |r| r.consistency),
        },
        by_referring_type: by_category(records, |r| r.referring_type, d),
        by_task_type: by_category(records, |r| r.task_type, d),
    })
}

pub fn compare_runs(a: &BenchmarkSummary, b: &BenchmarkSummary) -> SummaryDelta {
    SummaryDelta {
        overall: b.overall - a.overall,
        weighted: b.weighted - a.weighted,
        quality: b.dimensions.quality - a.dimensions.quality,
        target: b.dimensions.target - a.dimensions.target,
        effect: b.dimensions.effect - a.dimensions.effect,
        consistency: b.dimensions.consistency - a.dimensions.consistency,
        sample_count: b.sample_count as i64 - a.sample_count as i64,
    }
}

/// Dataset statistics. Taxonomy and region counts come from `instructions`
/// when any are given, otherwise from `records`; word statistics need
/// instruction text and are `None` without it.
pub fn dataset_stats(records: &[ScoreRecord], instructions: &[InstructionMeta]) -> DatasetStats {
    let labels: Vec<(ReferringType, TaskType, u32)> = if instructions.is_empty() {
        records.iter().map(|r| (r.referring_type, r.task_type, r.region_count)).collect()
    } else {
        instructions.iter().map(|m| (m.referring_type, m.task_type, m.region_count)).collect()
    };

    let mut referring_counts = BTreeMap::new();
    let mut task_counts = BTreeMap::new();
    let mut region_count_histogram = BTreeMap::new();
    for &(rt, tt, rc) in &labels {
        *referring_counts.entry(rt).or_insert(0) += 1;
        *task_counts.entry(tt).or_insert(0) += 1;
        *region_count_histogram.entry(rc).or_insert(0) += 1;
    }

    let words = (!instructions.is_empty()).then(|| {
        let counts: Vec<usize> = instructions.iter().map(|m| m.instruction.split_whitespace().count()).collect();
        let mut histogram = BTreeMap::new();
        for &c in &counts {
            *histogram.entry(c).or_insert(0) += 1;
        }
        WordStats {
            mean: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
            min: counts.iter().copied().min().unwrap_or(0),
            max: counts.iter().copied().max().unwrap_or(0),
            histogram,
        }
    });

    DatasetStats {
        sample_count: labels.len(),
        words,
        multi_region_count: labels.iter().filter(|l| l.2 >= 2).count(),
        region_count_histogram,
        referring_counts,
        task_counts,
    }
}

/// Parses one JSON object per non-blank line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, BenchError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| BenchError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}
