//! KITTI-odometry-layout ingestion: Velodyne scans, pose files, frame
//! manifests and the experiment splits.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

const POINT_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub reflectance: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, reflectance: f32) -> Self {
        Self {
            x,
            y,
            z,
            reflectance,
        }
    }

    /// Euclidean distance from the sensor origin, evaluated in f64.
    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Decode the Velodyne binary layout: four little-endian f32 per point.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(POINT_BYTES) {
            return Err(Error::Format(format!(
                "point cloud byte length {} is not a multiple of {POINT_BYTES}",
                bytes.len()
            )));
        }
        let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let points: Vec<Point> = bytes
            .chunks_exact(POINT_BYTES)
            .map(|c| Point::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]), f(&c[12..16])))
            .collect();
        let bad: Vec<usize> = points
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.reflectance.is_finite())
            })
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(Error::Validation(format!(
                "non-finite values in points {bad:?}"
            )));
        }
        Ok(Self { points })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * POINT_BYTES);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.reflectance] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PointCloud::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cloud.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Parse a KITTI pose file, one 3×4 row-major `[R|t]` per line.
pub fn parse_poses(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("line {lineno}: {e}")))?;
        let pose = Pose::from_kitti_row(&values).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("line {lineno}: {m}")),
            Error::Validation(m) => Error::Validation(format!("line {lineno}: {m}")),
            other => other,
        })?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Serialize poses so that [`parse_poses`] returns bit-identical values.
pub fn format_poses(poses: &[Pose]) -> String {
    let mut out = String::new();
    for p in poses {
        let row: Vec<String> = p.to_kitti_row().iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[Pose]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_poses(poses).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Where a sequence's files live below the dataset root. `{seq}` in the
/// templates is replaced by the sequence id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetLayout {
    pub sequence_dir: String,
    pub lidar_subdir: String,
    pub image_subdir: String,
    pub pose_file: String,
    pub lidar_ext: String,
    pub image_ext: String,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self {
            sequence_dir: "sequences/{seq}".into(),
            lidar_subdir: "velodyne".into(),
            image_subdir: "image_2".into(),
            pose_file: "poses/{seq}.txt".into(),
            lidar_ext: "bin".into(),
            image_ext: "png".into(),
        }
    }
}

impl DatasetLayout {
    pub fn lidar_dir(&self, root: &Path, seq: &str) -> PathBuf {
        root.join(self.sequence_dir.replace("{seq}", seq))
            .join(&self.lidar_subdir)
    }

    pub fn image_dir(&self, root: &Path, seq: &str) -> PathBuf {
        root.join(self.sequence_dir.replace("{seq}", seq))
            .join(&self.image_subdir)
    }

    pub fn pose_path(&self, root: &Path, seq: &str) -> PathBuf {
        root.join(self.pose_file.replace("{seq}", seq))
    }

    pub fn lidar_path(&self, root: &Path, seq: &str, frame: usize) -> PathBuf {
        self.lidar_dir(root, seq)
            .join(format!("{frame:06}.{}", self.lidar_ext))
    }

    pub fn image_path(&self, root: &Path, seq: &str, frame: usize) -> PathBuf {
        self.image_dir(root, seq)
            .join(format!("{frame:06}.{}", self.image_ext))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub sequence_id: String,
    pub frame_index: usize,
    pub image_path: PathBuf,
    pub lidar_path: PathBuf,
    #[serde(with = "pose_row")]
    pub pose: Pose,
}

impl FrameRecord {
    pub fn key(&self) -> String {
        frame_key(&self.sequence_id, self.frame_index)
    }
}

/// Canonical `<sequence>/<frame:06>` key used in embedding files and reports.
pub fn frame_key(sequence_id: &str, frame_index: usize) -> String {
    format!("{sequence_id}/{frame_index:06}")
}

/// Inverse of [`frame_key`]; `None` for keys of another shape.
pub fn parse_frame_key(key: &str) -> Option<(&str, usize)> {
    let (seq, idx) = key.rsplit_once('/')?;
    Some((seq, idx.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub sequence_id: String,
    pub frames: Vec<FrameRecord>,
}

/// Per-modality file counts when they disagree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountMismatch {
    pub lidar: usize,
    pub images: usize,
    pub poses: usize,
}

fn indexed_files(dir: &Path, ext: &str) -> Result<BTreeSet<usize>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(idx) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
        {
            out.insert(idx);
        }
    }
    Ok(out)
}

/// Pair LiDAR scans, images and poses of one sequence by frame index.
///
/// When modality counts differ the manifest is truncated to the shortest
/// and the mismatch is returned alongside it (and logged).
pub fn build_manifest(
    root: &Path,
    sequence_id: &str,
    layout: &DatasetLayout,
) -> Result<(SequenceManifest, Option<CountMismatch>)> {
    let lidar = indexed_files(&layout.lidar_dir(root, sequence_id), &layout.lidar_ext)?;
    let images = indexed_files(&layout.image_dir(root, sequence_id), &layout.image_ext)?;
    let poses = load_poses(layout.pose_path(root, sequence_id))?;

    let limit = lidar.len().min(images.len()).min(poses.len());
    let frames: Vec<FrameRecord> = lidar
        .intersection(&images)
        .copied()
        .filter(|&i| i < poses.len())
        .take(limit)
        .map(|i| FrameRecord {
            sequence_id: sequence_id.to_string(),
            frame_index: i,
            image_path: layout.image_path(root, sequence_id, i),
            lidar_path: layout.lidar_path(root, sequence_id, i),
            pose: poses[i],
        })
        .collect();
    if frames.is_empty() {
        return Err(Error::Validation(format!(
            "sequence {sequence_id}: no frames with matching LiDAR, image and pose"
        )));
    }
    let mismatch = (lidar.len() != images.len() || lidar.len() != poses.len()).then(|| {
        let m = CountMismatch {
            lidar: lidar.len(),
            images: images.len(),
            poses: poses.len(),
        };
        log::warn!(
            "sequence {sequence_id}: modality counts differ (lidar {}, images {}, poses {}); using {} frames",
            m.lidar,
            m.images,
            m.poses,
            frames.len()
        );
        m
    });
    Ok((
        SequenceManifest {
            sequence_id: sequence_id.to_string(),
            frames,
        },
        mismatch,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSplit {
    pub name: String,
    pub train_sequences: Vec<String>,
    pub eval_sequences: Vec<String>,
}

impl ExperimentSplit {
    pub fn new(
        name: impl Into<String>,
        train: &[&str],
        eval: &[&str],
    ) -> Result<Self> {
        let split = Self {
            name: name.into(),
            train_sequences: train.iter().map(|s| s.to_string()).collect(),
            eval_sequences: eval.iter().map(|s| s.to_string()).collect(),
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<&String> = self.train_sequences.iter().collect();
        let overlap: Vec<&String> = self
            .eval_sequences
            .iter()
            .filter(|s| train.contains(s))
            .collect();
        if !overlap.is_empty() {
            return Err(Error::Validation(format!(
                "split {}: sequences {overlap:?} are in both train and eval",
                self.name
            )));
        }
        if self.eval_sequences.is_empty() {
            return Err(Error::Validation(format!(
                "split {}: no eval sequences",
                self.name
            )));
        }
        Ok(())
    }

    pub fn preset(name: &str) -> Option<Self> {
        const KITTI_EVAL: &[&str] = &["08", "09"];
        let (train, eval): (&[&str], &[&str]) = match name {
            "exp_large" => (&["03", "04", "05", "06", "07"], KITTI_EVAL),
            "exp_larger" => (&["00", "01", "02", "03", "04", "05", "06", "07"], KITTI_EVAL),
            "exp_largest" => (
                &[
                    "00", "01", "02", "03", "04", "05", "06", "07", "11", "12", "13", "15", "16",
                    "17", "18", "19", "20", "21",
                ],
                KITTI_EVAL,
            ),
            "exp_360" => (&["03", "04", "05", "06", "07", "09", "10"], &["00"]),
            _ => return None,
        };
        Some(Self::new(name, train, eval).expect("presets are disjoint"))
    }

    pub const PRESETS: [&'static str; 4] = ["exp_large", "exp_larger", "exp_largest", "exp_360"];
}

/// A split given either by preset name or by explicit sequence lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitConfig {
    Preset(String),
    Explicit {
        name: String,
        train_sequences: Vec<String>,
        eval_sequences: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dataset_root: Option<PathBuf>,
    },
}

pub fn load_split(config: &SplitConfig) -> Result<ExperimentSplit> {
    match config {
        SplitConfig::Preset(name) => ExperimentSplit::preset(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown split preset {name:?} (known: {})",
                ExperimentSplit::PRESETS.join(", ")
            ))
        }),
        SplitConfig::Explicit {
            name,
            train_sequences,
            eval_sequences,
            ..
        } => {
            let split = ExperimentSplit {
                name: name.clone(),
                train_sequences: train_sequences.clone(),
                eval_sequences: eval_sequences.clone(),
            };
            split.validate()?;
            Ok(split)
        }
    }
}

/// Serde adapter storing a [`Pose`] as its 12-value KITTI row.
pub mod pose_row {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::geometry::Pose;

    pub fn serialize<S: Serializer>(pose: &Pose, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(pose.to_kitti_row())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        let row = Vec::<f64>::deserialize(d)?;
        Pose::from_kitti_row(&row).map_err(serde::de::Error::custom)
    }
}
