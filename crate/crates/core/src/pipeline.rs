//! End-to-end runs: load a split, prepare encoder inputs, train, embed and
//! evaluate. Shared by the CLI and the sweep runner.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    build_manifest, load_point_cloud, load_split, pose_row, DatasetLayout, ExperimentSplit, FrameRecord,
    PointCloud, SplitConfig,
};
use crate::encoder::{embed, load_checkpoint, EncoderConfig, EncoderParams, Embedding};
use crate::error::{Error, Result};
use crate::evaluation::{recall_at_k, Direction, EvalConfig, Query, RecallReport};
use crate::geometry::Pose;
use crate::grid::{load_image_grid, Grid};
use crate::projection::{normalize_for_encoder, range_image_for_scan, ProjectionConfig, RangeImage};
use crate::retrieval::build_index;
use crate::seed::{derive_seed, stream};
use crate::synthetic::{generate_task, SyntheticConfig, SyntheticTask};
use crate::trainer::{train, InputPair, TrainConfig, TrainOutcome, TrainState};

pub const DATA_ROOT_ENV: &str = "XMODAL_DATA_ROOT";

/// Everything a run needs, loadable from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Falls back to `$XMODAL_DATA_ROOT`.
    pub dataset_root: Option<PathBuf>,
    pub layout: DatasetLayout,
    pub split: SplitConfig,
    pub projection: ProjectionConfig,
    pub image_encoder: EncoderConfig,
    pub lidar_encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synthetic: SyntheticConfig,
    /// Use only the first frames of every sequence.
    pub max_frames_per_sequence: Option<usize>,
    /// Directory of preprocessed range images (`<seq>/<frame:06>.rimg`).
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            layout: DatasetLayout::default(),
            split: SplitConfig::Preset("exp_larger".into()),
            projection: ProjectionConfig::default(),
            image_encoder: EncoderConfig {
                input_channels: 3,
                ..EncoderConfig::default()
            },
            lidar_encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            synthetic: SyntheticConfig::default(),
            max_frames_per_sequence: None,
            cache_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        self.image_encoder.validate()?;
        self.lidar_encoder.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.lidar_encoder.input_channels != 1 {
            return Err(Error::Config("the LiDAR encoder takes a single range channel".into()));
        }
        Ok(())
    }

    pub fn dataset_root(&self) -> Result<PathBuf> {
        if let Some(root) = &self.dataset_root {
            return Ok(root.clone());
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Error::Config(format!(
                "no dataset root: set dataset_root or {DATA_ROOT_ENV}"
            ))),
        }
    }

    /// Encoder configs with seeds derived from the run seed.
    pub fn seeded_encoders(&self) -> (EncoderConfig, EncoderConfig) {
        let seed = self.train.seed;
        (
            EncoderConfig {
                seed: derive_seed(seed, stream::IMAGE_ENCODER),
                ..self.image_encoder.clone()
            },
            EncoderConfig {
                seed: derive_seed(seed, stream::LIDAR_ENCODER),
                ..self.lidar_encoder.clone()
            },
        )
    }

    pub fn resolve_split(&self) -> Result<ExperimentSplit> {
        load_split(&self.split)
    }

    /// Frames of every listed sequence, in sequence then frame order.
    pub fn frames(&self, root: &Path, layout: &DatasetLayout, sequences: &[String]) -> Result<Vec<FrameRecord>> {
        let mut out = Vec::new();
        for seq in sequences {
            let (manifest, _) = build_manifest(root, seq, layout)?;
            let take = self.max_frames_per_sequence.unwrap_or(usize::MAX);
            out.extend(manifest.frames.into_iter().take(take));
        }
        Ok(out)
    }

    pub fn cached_range_image_path(&self, frame: &FrameRecord) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|dir| {
            dir.join(&frame.sequence_id)
                .join(format!("{:06}.rimg", frame.frame_index))
        })
    }
}

/// Range image of a frame, from the preprocessing cache when present.
pub fn frame_range_image(config: &RunConfig, frame: &FrameRecord) -> Result<RangeImage> {
    if let Some(path) = config.cached_range_image_path(frame) {
        if path.exists() {
            return RangeImage::read(&path, &config.projection);
        }
    }
    range_image_for_scan(&load_point_cloud(&frame.lidar_path)?, &config.projection)
}

pub fn prepare_image(config: &RunConfig, frame: &FrameRecord) -> Result<Grid> {
    let e = &config.image_encoder;
    load_image_grid(&frame.image_path, e.input_channels, e.input_h, e.input_w)
}

pub fn prepare_lidar(config: &RunConfig, frame: &FrameRecord) -> Result<Grid> {
    let e = &config.lidar_encoder;
    normalize_for_encoder(&frame_range_image(config, frame)?, e.input_h, e.input_w)
}

/// Decode, project and normalize all frames in parallel, keeping order.
pub fn prepare_inputs(config: &RunConfig, frames: &[FrameRecord]) -> Result<Vec<InputPair>> {
    frames
        .par_iter()
        .map(|f| {
            Ok(InputPair {
                image: prepare_image(config, f)?,
                lidar: prepare_lidar(config, f)?,
            })
        })
        .collect()
}

/// Train on the split's training sequences.
pub fn train_split(config: &RunConfig, root: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let split = config.resolve_split()?;
    let frames = config.frames(root, &config.layout, &split.train_sequences)?;
    log::info!(
        "training {} on {} frames from {} sequences",
        split.name,
        frames.len(),
        split.train_sequences.len()
    );
    let pairs = prepare_inputs(config, &frames)?;
    let (image, lidar) = config.seeded_encoders();
    train(&pairs, &image, &lidar, &config.train, |_, _| {})
}

/// Embeddings of one modality, keyed by frame.
pub type KeyedEmbeddings = Vec<(String, Embedding)>;

pub fn embed_grids(params: &EncoderParams, config: &EncoderConfig, grids: &[&Grid]) -> Result<Vec<Embedding>> {
    grids.par_iter().map(|g| embed(params, config, g)).collect()
}

/// Both trained encoders with their configs.
#[derive(Debug, Clone)]
pub struct Towers {
    pub image_config: EncoderConfig,
    pub image_params: EncoderParams,
    pub lidar_config: EncoderConfig,
    pub lidar_params: EncoderParams,
}

impl Towers {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            image_config: state.image_config.clone(),
            image_params: state.image_params.clone(),
            lidar_config: state.lidar_config.clone(),
            lidar_params: state.lidar_params.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, image_params, lidar_params) = load_checkpoint(path)?;
        Ok(Self {
            image_config: header.image_encoder,
            image_params,
            lidar_config: header.lidar_encoder,
            lidar_params,
        })
    }

    /// `config` with the encoder input settings of these towers, so inputs
    /// are prepared at the size the checkpoint expects.
    pub fn adapt(&self, config: &RunConfig) -> RunConfig {
        RunConfig {
            image_encoder: self.image_config.clone(),
            lidar_encoder: self.lidar_config.clone(),
            ..config.clone()
        }
    }
}

/// Embed every frame with both towers.
pub fn embed_frames(
    config: &RunConfig,
    towers: &Towers,
    frames: &[FrameRecord],
) -> Result<(KeyedEmbeddings, KeyedEmbeddings)> {
    let config = towers.adapt(config);
    let pairs = prepare_inputs(&config, frames)?;
    let images: Vec<&Grid> = pairs.iter().map(|p| &p.image).collect();
    let lidars: Vec<&Grid> = pairs.iter().map(|p| &p.lidar).collect();
    let ie = embed_grids(&towers.image_params, &towers.image_config, &images)?;
    let le = embed_grids(&towers.lidar_params, &towers.lidar_config, &lidars)?;
    let keys: Vec<String> = frames.iter().map(FrameRecord::key).collect();
    Ok((
        keys.iter().cloned().zip(ie).collect(),
        keys.into_iter().zip(le).collect(),
    ))
}

/// Recall of one direction: queries from one modality, database from the
/// other, poses looked up by key.
pub fn evaluate_modalities(
    image: &KeyedEmbeddings,
    lidar: &KeyedEmbeddings,
    poses: &[(String, Pose)],
    direction: Direction,
    eval: &EvalConfig,
    split: &str,
) -> Result<RecallReport> {
    let pose_of: std::collections::HashMap<&str, &Pose> =
        poses.iter().map(|(k, p)| (k.as_str(), p)).collect();
    let lookup = |k: &str| {
        pose_of
            .get(k)
            .map(|p| **p)
            .ok_or_else(|| Error::Validation(format!("no pose for frame {k}")))
    };
    let (queries, database) = match direction {
        Direction::TwoDToThreeD => (image, lidar),
        Direction::ThreeDToTwoD => (lidar, image),
    };
    let index = build_index(
        database
            .iter()
            .map(|(k, e)| Ok((k.clone(), e.clone(), lookup(k)?)))
            .collect::<Result<_>>()?,
    )?;
    let queries: Vec<Query> = queries
        .iter()
        .map(|(k, e)| {
            Ok(Query {
                key: k.clone(),
                embedding: e.clone(),
                pose: lookup(k)?,
            })
        })
        .collect::<Result<_>>()?;
    recall_at_k(&queries, &index, eval, direction, split)
}

/// Train on `root` and evaluate on every eval sequence of `eval_root`
/// (which may be a different dataset), one report per sequence and
/// direction.
pub fn train_and_evaluate(
    config: &RunConfig,
    root: &Path,
    eval_root: &Path,
    eval_layout: &DatasetLayout,
    eval_sequences: &[String],
    directions: &[Direction],
) -> Result<Vec<RecallReport>> {
    let outcome = train_split(config, root)?;
    let towers = Towers::from_state(&outcome.state);
    let split = config.resolve_split()?;
    let mut reports = Vec::new();
    for seq in eval_sequences {
        let frames = config.frames(eval_root, eval_layout, std::slice::from_ref(seq))?;
        let (image, lidar) = embed_frames(config, &towers, &frames)?;
        let poses: Vec<(String, Pose)> = frames.iter().map(|f| (f.key(), f.pose)).collect();
        for &d in directions {
            let name = format!("{}/{seq}", split.name);
            reports.push(evaluate_modalities(&image, &lidar, &poses, d, &config.eval, &name)?);
        }
    }
    Ok(reports)
}

/// Recall at the configured ks of a trained state on the held-out pairs of
/// the synthetic task. Poses are spaced so only the true pair matches.
pub fn synthetic_heldout_recall(
    state: &TrainState,
    task: &SyntheticTask,
    eval: &EvalConfig,
    direction: Direction,
) -> Result<RecallReport> {
    let images: Vec<&Grid> = task.heldout.iter().map(|p| &p.image).collect();
    let lidars: Vec<&Grid> = task.heldout.iter().map(|p| &p.lidar).collect();
    let keys: Vec<String> = (0..task.heldout.len()).map(|i| format!("heldout/{i:06}")).collect();
    let ie = embed_grids(&state.image_params, &state.image_config, &images)?;
    let le = embed_grids(&state.lidar_params, &state.lidar_config, &lidars)?;
    let poses: Vec<(String, Pose)> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.clone(), SyntheticTask::heldout_pose(i)))
        .collect();
    evaluate_modalities(
        &keys.iter().cloned().zip(ie).collect(),
        &keys.into_iter().zip(le).collect(),
        &poses,
        direction,
        eval,
        "synthetic",
    )
}

pub struct SyntheticRun {
    pub outcome: TrainOutcome,
    pub reports: Vec<RecallReport>,
}

/// Generate the synthetic task from the run seed, train on it and report
/// held-out recall in both directions.
pub fn run_synthetic(config: &RunConfig) -> Result<SyntheticRun> {
    config.validate()?;
    let (image, lidar) = config.seeded_encoders();
    let task = generate_task(&config.synthetic, &image, &lidar, config.train.seed)?;
    let outcome = train(&task.train, &image, &lidar, &config.train, |_, _| {})?;
    let reports = [Direction::TwoDToThreeD, Direction::ThreeDToTwoD]
        .into_iter()
        .map(|d| synthetic_heldout_recall(&outcome.state, &task, &config.eval, d))
        .collect::<Result<_>>()?;
    Ok(SyntheticRun { outcome, reports })
}

pub const PREPROCESS_MANIFEST: &str = "manifest.json";

/// One cached range image and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessEntry {
    pub key: String,
    pub sequence_id: String,
    pub frame_index: usize,
    pub lidar_path: PathBuf,
    pub image_path: PathBuf,
    #[serde(with = "pose_row")]
    pub pose: Pose,
    /// Relative to the output directory.
    pub range_image: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub distance_threshold: Option<f64>,
    pub fov_horizontal: f64,
    /// SHA-256 of the scan bytes and the projection settings.
    pub source_sha256: String,
    pub output_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessManifest {
    pub projection: ProjectionConfig,
    pub entries: Vec<PreprocessEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PreprocessSummary {
    pub frames: usize,
    pub written: usize,
    pub skipped: usize,
    pub manifest_written: bool,
}

fn hex_sha256(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn read_existing_manifest(path: &Path) -> Option<PreprocessManifest> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Project every scan of `sequences` into `out_dir/<seq>/<frame:06>.rimg`
/// and write `out_dir/manifest.json`. Outputs whose source hash and file
/// hash are unchanged are left untouched.
pub fn preprocess(
    config: &RunConfig,
    root: &Path,
    sequences: &[String],
    out_dir: &Path,
) -> Result<PreprocessSummary> {
    config.projection.validate()?;
    let mut frames = Vec::new();
    for seq in sequences {
        let (manifest, _) = build_manifest(root, seq, &config.layout)?;
        let take = config.max_frames_per_sequence.unwrap_or(usize::MAX);
        frames.extend(manifest.frames.into_iter().take(take));
    }
    let manifest_path = out_dir.join(PREPROCESS_MANIFEST);
    let previous: std::collections::HashMap<String, PreprocessEntry> = read_existing_manifest(&manifest_path)
        .map(|m| m.entries.into_iter().map(|e| (e.key.clone(), e)).collect())
        .unwrap_or_default();
    let settings = serde_json::to_vec(&config.projection).map_err(|e| Error::Format(e.to_string()))?;

    let results: Vec<(PreprocessEntry, bool)> = frames
        .par_iter()
        .map(|frame| {
            let bytes = std::fs::read(&frame.lidar_path).map_err(|e| Error::io(&frame.lidar_path, e))?;
            let source_sha256 = hex_sha256(&[&bytes, &settings]);
            let relative = PathBuf::from(&frame.sequence_id).join(format!("{:06}.rimg", frame.frame_index));
            let target = out_dir.join(&relative);
            if let Some(prev) = previous.get(&frame.key()) {
                let intact = std::fs::read(&target)
                    .map(|b| hex_sha256(&[&b]) == prev.output_sha256)
                    .unwrap_or(false);
                if prev.source_sha256 == source_sha256 && prev.range_image == relative && intact {
                    return Ok((prev.clone(), false));
                }
            }
            let cloud = PointCloud::from_bytes(&bytes)
                .map_err(|e| Error::Format(format!("{}: {e}", frame.lidar_path.display())))?;
            let img = range_image_for_scan(&cloud, &config.projection)?;
            let out = img.to_bytes();
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&target, &out).map_err(|e| Error::io(&target, e))?;
            Ok((
                PreprocessEntry {
                    key: frame.key(),
                    sequence_id: frame.sequence_id.clone(),
                    frame_index: frame.frame_index,
                    lidar_path: frame.lidar_path.clone(),
                    image_path: frame.image_path.clone(),
                    pose: frame.pose,
                    range_image: relative,
                    rows: img.height,
                    cols: img.width,
                    distance_threshold: config.projection.distance_threshold,
                    fov_horizontal: config.projection.fov_horizontal,
                    source_sha256,
                    output_sha256: hex_sha256(&[&out]),
                },
                true,
            ))
        })
        .collect::<Result<_>>()?;

    let written = results.iter().filter(|(_, w)| *w).count();
    let manifest = PreprocessManifest {
        projection: config.projection.clone(),
        entries: results.into_iter().map(|(e, _)| e).collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    let unchanged = std::fs::read(&manifest_path).map(|b| b == text.as_bytes()).unwrap_or(false);
    if !unchanged {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(PreprocessSummary {
        frames: manifest.entries.len(),
        written,
        skipped: manifest.entries.len() - written,
        manifest_written: !unchanged,
    })
}
