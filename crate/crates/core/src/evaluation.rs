//! Recall@k under a metric distance threshold, in either retrieval
//! direction, plus CSV emitters for reports and recall curves.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{parse_frame_key, pose_row};
use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::geometry::{translation_distance, Pose};
use crate::retrieval::{EmbeddingIndex, RetrievalResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Camera query against a LiDAR database.
    #[serde(rename = "2d_to_3d")]
    TwoDToThreeD,
    /// LiDAR query against a camera database.
    #[serde(rename = "3d_to_2d")]
    ThreeDToTwoD,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::TwoDToThreeD => "2d_to_3d",
            Direction::ThreeDToTwoD => "3d_to_2d",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d_to_3d" => Ok(Direction::TwoDToThreeD),
            "3d_to_2d" => Ok(Direction::ThreeDToTwoD),
            other => Err(Error::Config(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Meters; a retrieved frame matches when strictly closer than this.
    pub distance_threshold: f64,
    /// Database frames of the query's own sequence closer than this many
    /// frame indices are excluded. 0 disables the exclusion.
    pub frame_gap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 20],
            distance_threshold: 20.0,
            frame_gap: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be non-empty and ≥ 1".into()));
        }
        if self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("ks must be strictly ascending".into()));
        }
        if !(self.distance_threshold > 0.0) {
            return Err(Error::Config("distance threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Query {
    pub key: String,
    pub embedding: Embedding,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub direction: Direction,
    pub split: String,
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
    pub queries: usize,
    pub distance_threshold: f64,
}

/// A retrieval result stored with the query pose, enough to recompute recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredResult {
    #[serde(with = "pose_row")]
    pub query_pose: Pose,
    #[serde(flatten)]
    pub result: RetrievalResult,
}

fn within_gap(query_key: &str, db_key: &str, gap: usize) -> bool {
    match (parse_frame_key(query_key), parse_frame_key(db_key)) {
        (Some((qs, qi)), Some((ds, di))) => qs == ds && qi.abs_diff(di) < gap,
        _ => false,
    }
}

/// Retrieve the top `max_k` database frames for every query, in parallel.
pub fn retrieve_all(
    queries: &[Query],
    index: &EmbeddingIndex,
    max_k: usize,
    frame_gap: usize,
) -> Result<Vec<StoredResult>> {
    queries
        .par_iter()
        .map(|q| {
            let result = if frame_gap == 0 {
                index.query_topk(&q.key, &q.embedding, max_k)?
            } else {
                index.query_topk_filtered(&q.key, &q.embedding, max_k, |k| {
                    !within_gap(&q.key, k, frame_gap)
                })?
            };
            Ok(StoredResult {
                query_pose: q.pose,
                result,
            })
        })
        .collect()
}

/// Recall at each k from stored results: a query is a hit at k when any of
/// its first k hits lies strictly within `threshold` meters.
pub fn recall_from_results(results: &[StoredResult], ks: &[usize], threshold: f64) -> Result<Vec<f64>> {
    if results.is_empty() {
        return Err(Error::Validation("no queries to evaluate".into()));
    }
    let mut hits = vec![0usize; ks.len()];
    for r in results {
        // rank of the first hit inside the threshold
        let first = r
            .result
            .hits
            .iter()
            .position(|h| translation_distance(&r.query_pose, &h.pose) < threshold);
        if let Some(rank) = first {
            for (count, &k) in hits.iter_mut().zip(ks) {
                if rank < k {
                    *count += 1;
                }
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| h as f64 / results.len() as f64)
        .collect())
}

pub fn recall_at_k(
    queries: &[Query],
    index: &EmbeddingIndex,
    config: &EvalConfig,
    direction: Direction,
    split: &str,
) -> Result<RecallReport> {
    Ok(recall_with_results(queries, index, config, direction, split)?.0)
}

/// Like [`recall_at_k`] but also returns the per-query results.
pub fn recall_with_results(
    queries: &[Query],
    index: &EmbeddingIndex,
    config: &EvalConfig,
    direction: Direction,
    split: &str,
) -> Result<(RecallReport, Vec<StoredResult>)> {
    config.validate()?;
    if queries.is_empty() {
        return Err(Error::Validation("empty query set".into()));
    }
    let max_k = *config.ks.last().expect("validated non-empty");
    let results = retrieve_all(queries, index, max_k, config.frame_gap)?;
    let recalls = recall_from_results(&results, &config.ks, config.distance_threshold)?;
    Ok((
        RecallReport {
            direction,
            split: split.to_string(),
            ks: config.ks.clone(),
            recalls,
            queries: queries.len(),
            distance_threshold: config.distance_threshold,
        },
        results,
    ))
}

/// Recall for every k in `1..=max_k`.
pub fn recall_curve(
    queries: &[Query],
    index: &EmbeddingIndex,
    max_k: usize,
    config: &EvalConfig,
    direction: Direction,
    split: &str,
) -> Result<RecallReport> {
    let cfg = EvalConfig {
        ks: (1..=max_k).collect(),
        ..config.clone()
    };
    recall_at_k(queries, index, &cfg, direction, split)
}

pub const REPORT_HEADER: &str = "direction,split,k,recall,queries,threshold_m";

pub fn format_report_csv(reports: &[RecallReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        for (k, recall) in r.ks.iter().zip(&r.recalls) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.direction, r.split, k, recall, r.queries, r.distance_threshold
            ));
        }
    }
    out
}

pub fn write_report_csv(path: &Path, reports: &[RecallReport]) -> Result<()> {
    fs::write(path, format_report_csv(reports)).map_err(|e| Error::io(path, e))
}

/// `direction,split,k,recall` rows for external plotting.
pub fn write_curve_csv(path: &Path, curves: &[RecallReport]) -> Result<()> {
    let mut out = String::from("direction,split,k,recall\n");
    for r in curves {
        for (k, recall) in r.ks.iter().zip(&r.recalls) {
            out.push_str(&format!("{},{},{},{}\n", r.direction, r.split, k, recall));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_results(path: &Path, results: &[StoredResult]) -> Result<()> {
    let mut out = Vec::new();
    for r in results {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<StoredResult>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::build_index;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(v: &[f64]) -> Embedding {
        Embedding::normalize(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_poses_give_full_recall() {
        let idx = build_index(vec![
            ("a".into(), e(&[1.0, 0.0]), Pose::from_translation(0.0, 0.0, 0.0)),
            ("b".into(), e(&[0.0, 1.0]), Pose::from_translation(500.0, 0.0, 0.0)),
        ])
        .unwrap();
        let queries = vec![
            Query { key: "qa".into(), embedding: e(&[1.0, 0.1]), pose: Pose::from_translation(0.0, 0.0, 0.0) },
            Query { key: "qb".into(), embedding: e(&[0.1, 1.0]), pose: Pose::from_translation(500.0, 0.0, 0.0) },
        ];
        let r = recall_at_k(&queries, &idx, &EvalConfig { ks: vec![1], ..EvalConfig::default() }, Direction::TwoDToThreeD, "t").unwrap();
        assert_eq!(r.recalls, vec![1.0]);
        assert_eq!(r.queries, 2);
    }

    #[test]
    fn strict_threshold_and_deeper_k() {
        // top-1 sits 25 m away, rank 2 is 5 m away
        let mut entries = vec![
            ("a".to_string(), e(&[1.0, 0.0, 0.0]), Pose::from_translation(25.0, 0.0, 0.0)),
            ("b".to_string(), e(&[0.9, 0.3, 0.0]), Pose::from_translation(5.0, 0.0, 0.0)),
        ];
        for i in 0..3 {
            entries.push((format!("c{i}"), e(&[0.0, 0.0, 1.0]), Pose::from_translation(1000.0, 0.0, 0.0)));
        }
        let idx = build_index(entries).unwrap();
        let q = vec![Query { key: "q".into(), embedding: e(&[1.0, 0.0, 0.0]), pose: Pose::identity() }];
        let cfg = EvalConfig { ks: vec![1, 5], distance_threshold: 20.0, frame_gap: 0 };
        let r = recall_at_k(&q, &idx, &cfg, Direction::TwoDToThreeD, "t").unwrap();
        assert_eq!(r.recalls, vec![0.0, 1.0]);
        // exactly on the threshold does not count
        let cfg = EvalConfig { ks: vec![1], distance_threshold: 25.0, frame_gap: 0 };
        assert_eq!(recall_at_k(&q, &idx, &cfg, Direction::TwoDToThreeD, "t").unwrap().recalls, vec![0.0]);
    }

    #[test]
    fn empty_queries_rejected() {
        let idx = build_index(vec![("a".into(), e(&[1.0]), Pose::identity())]).unwrap();
        assert!(matches!(
            recall_at_k(&[], &idx, &EvalConfig::default(), Direction::TwoDToThreeD, "t"),
            Err(Error::Validation(_))
        ));
        assert!(EvalConfig { ks: vec![5, 1], ..EvalConfig::default() }.validate().is_err());
    }

    #[test]
    fn frame_gap_excludes_neighbours() {
        let idx = build_index(vec![
            ("08/000010".into(), e(&[1.0, 0.0]), Pose::identity()),
            ("08/000030".into(), e(&[0.8, 0.6]), Pose::from_translation(40.0, 0.0, 0.0)),
        ])
        .unwrap();
        let q = vec![Query { key: "08/000011".into(), embedding: e(&[1.0, 0.0]), pose: Pose::identity() }];
        let cfg = EvalConfig { ks: vec![1], distance_threshold: 20.0, frame_gap: 5 };
        let (r, results) = recall_with_results(&q, &idx, &cfg, Direction::TwoDToThreeD, "t").unwrap();
        assert_eq!(results[0].result.hits[0].key, "08/000030");
        assert_eq!(r.recalls, vec![0.0]);
    }

    #[test]
    fn threshold_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries: Vec<_> = (0..30)
            .map(|i| {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                (format!("k{i:02}"), e(&v), Pose::from_translation(i as f64 * 7.0, 0.0, 0.0))
            })
            .collect();
        let idx = build_index(entries).unwrap();
        let queries: Vec<Query> = (0..30)
            .map(|i| {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                Query { key: format!("q{i}"), embedding: e(&v), pose: Pose::from_translation(i as f64 * 7.0, 0.0, 0.0) }
            })
            .collect();
        let wide = EvalConfig { ks: vec![1, 5], distance_threshold: 1e9, frame_gap: 0 };
        assert_eq!(recall_at_k(&queries, &idx, &wide, Direction::ThreeDToTwoD, "t").unwrap().recalls, vec![1.0, 1.0]);
        // threshold → 0⁺ counts only exact-pose matches
        let (r, results) = recall_with_results(&queries, &idx, &EvalConfig { ks: vec![1], distance_threshold: 1e-9, frame_gap: 0 }, Direction::ThreeDToTwoD, "t").unwrap();
        let exact = results
            .iter()
            .filter(|s| s.result.hits[0].pose == s.query_pose)
            .count() as f64
            / 30.0;
        assert_eq!(r.recalls, vec![exact]);
    }

    #[test]
    fn persisted_results_reproduce_report() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let entries: Vec<_> = (0..50)
            .map(|i| {
                let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                (format!("08/{i:06}"), e(&v), Pose::from_translation(i as f64 * 3.3, 0.1, -0.2))
            })
            .collect();
        let idx = build_index(entries).unwrap();
        let queries: Vec<Query> = (0..20)
            .map(|i| {
                let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                Query { key: format!("08/{i:06}"), embedding: e(&v), pose: Pose::from_translation(i as f64 * 3.1, 0.0, 0.0) }
            })
            .collect();
        let cfg = EvalConfig::default();
        let (report, results) = recall_with_results(&queries, &idx, &cfg, Direction::TwoDToThreeD, "exp").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        write_results(&path, &results).unwrap();
        let back = read_results(&path).unwrap();
        assert_eq!(back, results);
        let recalls = recall_from_results(&back, &cfg.ks, cfg.distance_threshold).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&recalls), bits(&report.recalls));
        assert!(report.recalls.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn report_csv_layout() {
        let r = RecallReport {
            direction: Direction::ThreeDToTwoD,
            split: "exp_larger/08".into(),
            ks: vec![1, 5],
            recalls: vec![0.25, 0.5],
            queries: 4,
            distance_threshold: 20.0,
        };
        assert_eq!(
            format_report_csv(&[r]),
            "direction,split,k,recall,queries,threshold_m\n3d_to_2d,exp_larger/08,1,0.25,4,20\n3d_to_2d,exp_larger/08,5,0.5,4,20\n"
        );
    }
}
