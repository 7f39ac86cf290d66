//! Exact top-k cosine retrieval against a database of one modality.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::pose_row;
use crate::encoder::{dot, export_embeddings, import_embeddings, Embedding};
use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Tolerance on the unit norm of indexed vectors.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    keys: Vec<String>,
    vectors: Vec<Embedding>,
    poses: Vec<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub key: String,
    pub score: f64,
    #[serde(with = "pose_row")]
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_key: String,
    /// Descending by score, ties by ascending key.
    pub hits: Vec<Hit>,
}

pub fn build_index(entries: Vec<(String, Embedding, Pose)>) -> Result<EmbeddingIndex> {
    if entries.is_empty() {
        return Err(Error::Validation("cannot build an empty index".into()));
    }
    let dim = entries[0].1.dim();
    let mut seen = HashSet::with_capacity(entries.len());
    let mut index = EmbeddingIndex {
        keys: Vec::with_capacity(entries.len()),
        vectors: Vec::with_capacity(entries.len()),
        poses: Vec::with_capacity(entries.len()),
    };
    for (key, e, pose) in entries {
        if !seen.insert(key.clone()) {
            return Err(Error::Validation(format!("duplicate index key {key:?}")));
        }
        if e.dim() != dim {
            return Err(Error::Shape(format!(
                "index entry {key} has dim {}, expected {dim}",
                e.dim()
            )));
        }
        let norm = dot(e.as_slice(), e.as_slice()).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Validation(format!(
                "index entry {key} is not unit norm ({norm})"
            )));
        }
        index.keys.push(key);
        index.vectors.push(e);
        index.poses.push(pose);
    }
    Ok(index)
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].dim()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn vectors(&self) -> &[Embedding] {
        &self.vectors
    }

    pub fn query_topk(&self, query_key: &str, query: &Embedding, k: usize) -> Result<RetrievalResult> {
        self.query_topk_filtered(query_key, query, k, |_| true)
    }

    /// Top-k restricted to database keys accepted by `keep`.
    pub fn query_topk_filtered(
        &self,
        query_key: &str,
        query: &Embedding,
        k: usize,
        keep: impl Fn(&str) -> bool,
    ) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if query.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "query dim {} vs index dim {}",
                query.dim(),
                self.dim()
            )));
        }
        let mut scored: Vec<(f64, usize)> = self
            .vectors
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(&self.keys[*i]))
            .map(|(i, v)| (query.dot(v), i))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.partial_cmp(&a.0)
                .expect("finite scores")
                .then_with(|| self.keys[a.1].cmp(&self.keys[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(RetrievalResult {
            query_key: query_key.to_string(),
            hits: scored
                .into_iter()
                .map(|(score, i)| Hit {
                    key: self.keys[i].clone(),
                    score,
                    pose: self.poses[i],
                })
                .collect(),
        })
    }

    /// Persist as an `EMBD` file plus a JSON-lines pose sidecar.
    pub fn save(&self, embeddings: &Path, poses: &Path) -> Result<()> {
        let rows: Vec<(String, Embedding)> = self
            .keys
            .iter()
            .cloned()
            .zip(self.vectors.iter().cloned())
            .collect();
        export_embeddings(embeddings, &rows)?;
        let entries: Vec<(String, Pose)> = self.keys.iter().cloned().zip(self.poses.iter().copied()).collect();
        write_pose_sidecar(poses, &entries)
    }

    pub fn load(embeddings: &Path, poses: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let rows = import_embeddings(embeddings, expected_dim)?;
        let pose_map: HashMap<String, Pose> = read_pose_sidecar(poses)?.into_iter().collect();
        let entries = rows
            .into_iter()
            .map(|(key, e)| {
                let pose = *pose_map.get(&key).ok_or_else(|| {
                    Error::Validation(format!("{}: no pose for key {key}", poses.display()))
                })?;
                Ok((key, e, pose))
            })
            .collect::<Result<Vec<_>>>()?;
        build_index(entries)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseLine {
    key: String,
    #[serde(with = "pose_row")]
    pose: Pose,
}

pub fn write_pose_sidecar(path: &Path, entries: &[(String, Pose)]) -> Result<()> {
    let mut out = Vec::new();
    for (key, pose) in entries {
        serde_json::to_writer(&mut out, &PoseLine { key: key.clone(), pose: *pose })
            .map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_pose_sidecar(path: &Path) -> Result<Vec<(String, Pose)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PoseLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push((p.key, p.pose));
    }
    Ok(out)
}
