//! JSON documents written by the subcommands. Each has a schema under
//! `schemas/`.

use safe_core::cache::{CacheGridCell, CacheMode};
use safe_core::correspondence::PixelPoint;
use safe_core::store::FewShotSet;
use safe_core::trainer::{GridCell, TrainConfig, TrainSummary};
use serde::{Deserialize, Serialize};

pub const RUN_FILE: &str = "run.json";
pub const CACHE_FILE: &str = "cache.json";
pub const EVAL_FILE: &str = "eval.json";
pub const CORRESPOND_FILE: &str = "correspond.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    /// `train` or `grid`.
    pub command: String,
    pub manifest: String,
    pub precision: String,
    pub shots: usize,
    pub config: TrainConfig,
    pub zero_shot_accuracy: f64,
    pub folds: Vec<FoldReport>,
    pub mean_test_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub seed: u64,
    /// Relative to the run directory.
    pub checkpoint: String,
    pub test_accuracy: f64,
    pub training: TrainSummary,
    /// Every grid cell, for `grid` runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<GridCell>>,
    pub fewshot: FewShotSet,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalDoc {
    pub manifest: String,
    pub split: String,
    /// `zero-shot` or `blended`.
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<Option<f64>>,
    pub predictions: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CacheDoc {
    pub manifest: String,
    pub mode: CacheMode,
    pub beta: f64,
    pub alphas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub folds: Vec<CacheFold>,
    pub mean_test_accuracy: f64,
    /// Same folds without the cache term.
    pub mean_base_test_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CacheFold {
    pub seed: u64,
    pub alpha: f64,
    pub gamma: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub base_test_accuracy: f64,
    pub cache: String,
    pub cells: Vec<CacheGridCell>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorrespondDoc {
    pub source: String,
    pub target: String,
    pub height: usize,
    pub width: usize,
    pub query: PixelPoint,
    #[serde(rename = "match")]
    pub matched: PixelPoint,
    pub score: f64,
    pub heatmap_pgm: String,
    pub heatmap_csv: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportDoc {
    pub run: String,
    pub shots: usize,
    pub zero_shot_accuracy: f64,
    pub safe: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safe_a: Option<Summary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub per_fold: Vec<FoldAccuracy>,
    pub mean: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FoldAccuracy {
    pub seed: u64,
    pub accuracy: f64,
}
