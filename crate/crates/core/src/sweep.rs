//! Ablation sweeps: train and evaluate a list of cells that share a base
//! run config and seed, and tabulate the recalls.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetLayout, SplitConfig};
use crate::error::{Error, Result};
use crate::evaluation::{Direction, RecallReport};
use crate::pipeline::{train_and_evaluate, RunConfig};
use crate::projection::ProjectionConfig;
use crate::trainer::LossKind;

/// Evaluation data other than the training dataset (zero-shot cells).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTarget {
    pub dataset_root: PathBuf,
    #[serde(default)]
    pub layout: DatasetLayout,
    pub sequences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub name: String,
    pub split: SplitConfig,
    /// Replaces the base projection when set.
    #[serde(default)]
    pub projection: Option<ProjectionConfig>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Defaults to the split's eval sequences on the training dataset.
    #[serde(default)]
    pub eval: Option<EvalTarget>,
}

fn default_loss() -> LossKind {
    LossKind::BatchedSymmetric
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default)]
    pub base: RunConfig,
    pub cells: Vec<SweepCell>,
    #[serde(default = "default_directions")]
    pub directions: Vec<Direction>,
}

fn default_directions() -> Vec<Direction> {
    vec![Direction::TwoDToThreeD]
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: String,
    pub loss: LossKind,
    pub train_split: String,
    pub distance_threshold: Option<f64>,
    pub eval_dataset: String,
    pub report: RecallReport,
}

/// One cell per distance threshold (`None` keeps all points) on one split.
pub fn threshold_cells(split: &str, thresholds: &[Option<f64>], base: &ProjectionConfig) -> Vec<SweepCell> {
    thresholds
        .iter()
        .map(|t| SweepCell {
            name: format!("threshold_{}", threshold_label(*t)),
            split: SplitConfig::Preset(split.into()),
            projection: Some(ProjectionConfig {
                distance_threshold: *t,
                ..base.clone()
            }),
            loss: LossKind::BatchedSymmetric,
            eval: None,
        })
        .collect()
}

/// One cell per split preset.
pub fn preset_cells(presets: &[&str]) -> Vec<SweepCell> {
    presets
        .iter()
        .map(|p| SweepCell {
            name: (*p).into(),
            split: SplitConfig::Preset((*p).into()),
            projection: None,
            loss: LossKind::BatchedSymmetric,
            eval: None,
        })
        .collect()
}

fn threshold_label(t: Option<f64>) -> String {
    t.map_or_else(|| "none".into(), |v| v.to_string())
}

/// Train and evaluate every cell with the base seed. `root` is the
/// training dataset root.
pub fn run_ablation_sweep(config: &SweepConfig, root: &Path) -> Result<Vec<SweepRow>> {
    if config.cells.is_empty() {
        return Err(Error::Config("sweep has no cells".into()));
    }
    let mut rows = Vec::new();
    for cell in &config.cells {
        let mut run = config.base.clone();
        run.split = cell.split.clone();
        run.train.loss_kind = cell.loss;
        if let Some(p) = &cell.projection {
            run.projection = p.clone();
        }
        let split = run.resolve_split()?;
        let (eval_root, eval_layout, sequences) = match &cell.eval {
            Some(t) => (t.dataset_root.clone(), t.layout.clone(), t.sequences.clone()),
            None => (root.to_path_buf(), run.layout.clone(), split.eval_sequences.clone()),
        };
        log::info!("sweep cell {}: train {} on {}", cell.name, split.name, root.display());
        let reports = train_and_evaluate(&run, root, &eval_root, &eval_layout, &sequences, &config.directions)?;
        let eval_dataset = if cell.eval.is_some() {
            eval_root.display().to_string()
        } else {
            "train".into()
        };
        rows.extend(reports.into_iter().map(|report| SweepRow {
            cell: cell.name.clone(),
            loss: cell.loss,
            train_split: split.name.clone(),
            distance_threshold: run.projection.distance_threshold,
            eval_dataset: eval_dataset.clone(),
            report,
        }));
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str =
    "cell,loss,train_split,distance_threshold_m,eval_dataset,direction,split,k,recall,queries,threshold_m";

pub fn format_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for row in rows {
        let r = &row.report;
        for (k, recall) in r.ks.iter().zip(&r.recalls) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                row.cell,
                row.loss,
                row.train_split,
                threshold_label(row.distance_threshold),
                row.eval_dataset,
                r.direction,
                r.split,
                k,
                recall,
                r.queries,
                r.distance_threshold
            ));
        }
    }
    out
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    fs::write(path, format_sweep_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{write_kitti_like, KittiLikeConfig};

    fn small_base() -> RunConfig {
        let mut base = RunConfig::default();
        base.train.epochs = 1;
        base.train.batch_size = 4;
        base.max_frames_per_sequence = Some(6);
        base.eval.ks = vec![1, 5];
        base
    }

    fn fixture(sequences: &[&str], seed: u64) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let cfg = KittiLikeConfig {
            frames_per_sequence: 6,
            ..KittiLikeConfig::default()
        };
        write_kitti_like(dir.path(), sequences, &cfg, seed).unwrap();
        dir
    }

    #[test]
    fn threshold_sweep_shape() {
        let data = fixture(&["03", "04", "05", "06", "07", "08", "09"], 1);
        let cells = threshold_cells("exp_large", &[None, Some(30.0), Some(50.0)], &ProjectionConfig::default());
        let config = SweepConfig {
            base: small_base(),
            cells,
            directions: vec![Direction::TwoDToThreeD],
        };
        let rows = run_ablation_sweep(&config, data.path()).unwrap();
        assert_eq!(rows.len(), 6);
        let thresholds: Vec<_> = rows.iter().map(|r| r.distance_threshold).collect();
        assert_eq!(thresholds, vec![None, None, Some(30.0), Some(30.0), Some(50.0), Some(50.0)]);
        let splits: Vec<_> = rows.iter().map(|r| r.report.split.as_str()).collect();
        assert_eq!(splits[..2], ["exp_large/08", "exp_large/09"]);
        let csv = format_sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 1 + 6 * 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("threshold_none,batched,exp_large,none,train,2d_to_3d,exp_large/08,1,"));
    }

    #[test]
    fn preset_sweep_shape() {
        let seqs: Vec<String> = (0..=21).map(|i| format!("{i:02}")).collect();
        let refs: Vec<&str> = seqs.iter().map(String::as_str).collect();
        let data = fixture(&refs, 2);
        let config = SweepConfig {
            base: small_base(),
            cells: preset_cells(&["exp_large", "exp_larger", "exp_largest"]),
            directions: vec![Direction::TwoDToThreeD, Direction::ThreeDToTwoD],
        };
        let rows = run_ablation_sweep(&config, data.path()).unwrap();
        assert_eq!(rows.len(), 3 * 2 * 2);
        let cells: Vec<_> = rows.iter().map(|r| r.cell.as_str()).collect();
        assert_eq!(cells[0], "exp_large");
        assert_eq!(cells[11], "exp_largest");
        for r in &rows {
            assert!(r.report.recalls[0] <= r.report.recalls[1]);
        }
    }

    #[test]
    fn cross_dataset_cell() {
        let train_data = fixture(&["03", "04", "05", "06", "07", "08", "09"], 3);
        let other = fixture(&["00"], 4);
        let cell = SweepCell {
            name: "zero_shot".into(),
            split: SplitConfig::Preset("exp_large".into()),
            projection: None,
            loss: LossKind::BatchedSymmetric,
            eval: Some(EvalTarget {
                dataset_root: other.path().to_path_buf(),
                layout: DatasetLayout::default(),
                sequences: vec!["00".into()],
            }),
        };
        let config = SweepConfig {
            base: small_base(),
            cells: vec![cell],
            directions: vec![Direction::TwoDToThreeD],
        };
        let rows = run_ablation_sweep(&config, train_data.path()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].report.split, "exp_large/00");
        assert_eq!(rows[0].report.queries, 6);
        assert_eq!(rows[0].eval_dataset, other.path().display().to_string());
    }

    #[test]
    fn sweep_config_json() {
        let json = r#"{"cells": [{"name": "a", "split": "exp_large"},
            {"name": "b", "split": {"name": "mine", "train_sequences": ["01"], "eval_sequences": ["02"]}, "loss": "triplet"}]}"#;
        let cfg: SweepConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.cells.len(), 2);
        assert_eq!(cfg.cells[1].loss, LossKind::Triplet);
        assert_eq!(cfg.directions, vec![Direction::TwoDToThreeD]);
        assert!(matches!(
            run_ablation_sweep(&SweepConfig { cells: vec![], ..cfg }, Path::new(".")),
            Err(Error::Config(_))
        ));
    }
}
