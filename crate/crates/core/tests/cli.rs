use std::path::Path;
use std::process::{Command, Output};

use xmodal::encoder::{export_embeddings, import_embeddings, Embedding};
use xmodal::evaluation::{read_results, recall_from_results};
use xmodal::geometry::Pose;
use xmodal::retrieval::write_pose_sidecar;
use xmodal::synthetic::{write_kitti_like, KittiLikeConfig};

fn xmodal(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmodal"))
        .args(args)
        .current_dir(cwd)
        .env_remove("XMODAL_DATA_ROOT")
        .output()
        .expect("spawn xmodal")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fixture(sequences: &[&str], frames: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = KittiLikeConfig {
        frames_per_sequence: frames,
        ..KittiLikeConfig::default()
    };
    write_kitti_like(dir.path(), sequences, &cfg, 5).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_documents_every_flag() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["preprocess", "train", "embed", "eval", "sweep"] {
        let out = xmodal(&[cmd, "--help"], tmp.path());
        let text = ok(&out);
        let lines: Vec<&str> = text.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            let trimmed = line.trim();
            if !trimmed.starts_with("--") && !trimmed.starts_with("-v") && !trimmed.starts_with("-h") {
                continue;
            }
            // description on the same line or, for long entries, the next one
            let same_line = trimmed.split_once("  ").map(|(_, d)| d.trim()).unwrap_or("");
            let next_line = lines.get(i + 1).map(|l| l.trim()).unwrap_or("");
            let documented = !same_line.is_empty() || (!next_line.is_empty() && !next_line.starts_with('-'));
            assert!(documented, "{cmd}: undocumented flag line {trimmed:?}");
        }
    }
}

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(xmodal(&["train", "--no-such-flag"], tmp.path()).status.code(), Some(1));
    assert_eq!(xmodal(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(xmodal(&["eval"], tmp.path()).status.code(), Some(1));
    assert_eq!(xmodal(&["eval", "--embeddings", ".", "--direction", "sideways"], tmp.path()).status.code(), Some(1));
}

#[test]
fn config_and_validation_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    // no dataset root anywhere
    assert_eq!(xmodal(&["train", "--split", "exp_large"], tmp.path()).status.code(), Some(3));
    assert_eq!(xmodal(&["train", "--synthetic", "--epochs", "0"], tmp.path()).status.code(), Some(3));
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(xmodal(&["train", "--synthetic", "--config", s(&bad)], tmp.path()).status.code(), Some(3));
}

#[test]
fn preprocess_idempotent_and_records_threshold() {
    let data = fixture(&["08"], 3);
    let out = data.path().join("cache");
    let args = [
        "preprocess",
        "--dataset-root",
        s(data.path()),
        "--sequences",
        "08",
        "--distance-threshold",
        "50",
        "--output",
        s(&out),
    ];
    let first = ok(&xmodal(&args, data.path()));
    assert!(first.contains("3 written"), "{first}");
    let manifest = out.join("manifest.json");
    let rimg = out.join("08").join("000001.rimg");
    let stamp = |p: &Path| std::fs::metadata(p).unwrap().modified().unwrap();
    let (m0, r0) = (stamp(&manifest), stamp(&rimg));
    std::thread::sleep(std::time::Duration::from_millis(20));
    let second = ok(&xmodal(&args, data.path()));
    assert!(second.contains("0 written, 3 up to date"), "{second}");
    assert_eq!((stamp(&manifest), stamp(&rimg)), (m0, r0));

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    let entries = json["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 3);
    assert!(entries.iter().all(|e| e["distance_threshold"] == 50.0));
    let bytes = std::fs::read(&rimg).unwrap();
    assert_eq!(&bytes[..4], b"RIMG");
}

#[test]
fn missing_velodyne_dir_exits_2_naming_path() {
    let data = fixture(&["08"], 2);
    std::fs::remove_dir_all(data.path().join("sequences/08/velodyne")).unwrap();
    let out = xmodal(
        &["preprocess", "--dataset-root", s(data.path()), "--sequences", "08", "--output", "cache"],
        data.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sequences/08/velodyne"), "{err}");
}

#[test]
fn train_embed_eval_round_trip() {
    let seqs = ["00", "01", "02", "03", "04", "05", "06", "07", "08", "09"];
    let data = fixture(&seqs, 4);
    let root = s(data.path());
    let common = ["--dataset-root", root, "--max-frames", "4", "--batch-size", "4", "--epochs", "1"];

    let mut batched = vec!["train", "--split", "exp_larger", "--loss", "batched", "--output", "batched"];
    batched.extend(common);
    let text = ok(&xmodal(&batched, data.path()));
    assert!(text.contains("trained batched (8 steps)"), "{text}");
    let ckpt = data.path().join("batched/checkpoint.ckpt");
    assert_eq!(&std::fs::read(&ckpt).unwrap()[..4], b"CKPT");
    let log = std::fs::read_to_string(data.path().join("batched/loss_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,step,loss"));
    assert_eq!(log.lines().count(), 9);

    let mut triplet = vec!["train", "--split", "exp_larger", "--loss", "triplet", "--output", "triplet"];
    triplet.extend(common);
    let text = ok(&xmodal(&triplet, data.path()));
    assert!(text.contains("trained triplet"), "{text}");
    assert_ne!(
        std::fs::read(data.path().join("triplet/loss_log.csv")).unwrap(),
        log.as_bytes()
    );

    let text = ok(&xmodal(
        &["embed", "--dataset-root", root, "--split", "exp_larger", "--checkpoint", s(&ckpt), "--output", "emb"],
        data.path(),
    ));
    assert!(text.contains("08: 4 image, 4 lidar embeddings"), "{text}");
    let emb = data.path().join("emb");
    for seq in ["08", "09"] {
        for modality in ["image", "lidar"] {
            let path = emb.join(format!("{seq}_{modality}.embd"));
            let bytes = std::fs::read(&path).unwrap();
            assert_eq!(&bytes[..4], b"EMBD");
            let rows = import_embeddings(&path, Some(32)).unwrap();
            assert_eq!(rows.len(), 4);
            for (_, e) in &rows {
                let raw: f64 = e.as_slice().iter().map(|v| v * v).sum();
                assert!((raw.sqrt() - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(std::fs::read_to_string(emb.join(format!("{seq}_poses.jsonl"))).unwrap().lines().count(), 4);
    }

    let text = ok(&xmodal(
        &[
            "eval", "--embeddings", "emb", "--direction", "2d_to_3d", "--ks", "1,5,20", "--split", "exp_larger",
            "--output", "recall.csv", "--curve", "curve.csv", "--results", "results.jsonl",
        ],
        data.path(),
    ));
    let csv = std::fs::read_to_string(data.path().join("recall.csv")).unwrap();
    assert_eq!(csv, text);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "direction,split,k,recall,queries,threshold_m");
    assert_eq!(lines.len(), 1 + 2 * 3);
    for split in ["exp_larger/08", "exp_larger/09"] {
        let recalls: Vec<f64> = lines
            .iter()
            .filter(|l| l.split(',').nth(1) == Some(split))
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect();
        assert_eq!(recalls.len(), 3);
        assert!(recalls.windows(2).all(|w| w[0] <= w[1]));
    }
    let curve = std::fs::read_to_string(data.path().join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2 * 20);

    // recomputing from the persisted results reproduces the report
    let results = read_results(&data.path().join("results.jsonl")).unwrap();
    assert_eq!(results.len(), 8);
    let first_split = recall_from_results(&results[..4], &[1, 5, 20], 20.0).unwrap();
    let reported: Vec<f64> = lines[1..4].iter().map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(first_split, reported);

    // identical inputs give identical outputs
    ok(&xmodal(
        &["embed", "--dataset-root", root, "--split", "exp_larger", "--checkpoint", s(&ckpt), "--output", "emb2"],
        data.path(),
    ));
    assert_eq!(
        std::fs::read(emb.join("08_image.embd")).unwrap(),
        std::fs::read(data.path().join("emb2/08_image.embd")).unwrap()
    );
}

fn unit(v: &[f64]) -> Embedding {
    Embedding::normalize(v.to_vec()).unwrap()
}

#[test]
fn eval_direction_swaps_modalities() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let keys = ["08/000000", "08/000001", "08/000002"];
    let (e1, e2) = ([1.0, 0.0], [0.0, 1.0]);
    let image: Vec<(String, Embedding)> =
        keys.iter().zip([e1, e1, e2]).map(|(k, v)| (k.to_string(), unit(&v))).collect();
    let lidar: Vec<(String, Embedding)> =
        keys.iter().zip([e1, e2, e2]).map(|(k, v)| (k.to_string(), unit(&v))).collect();
    export_embeddings(&dir.join("08_image.embd"), &image).unwrap();
    export_embeddings(&dir.join("08_lidar.embd"), &lidar).unwrap();
    let poses: Vec<(String, Pose)> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.to_string(), Pose::from_translation(100.0 * i as f64, 0.0, 0.0)))
        .collect();
    write_pose_sidecar(&dir.join("08_poses.jsonl"), &poses).unwrap();

    let fwd = ok(&xmodal(
        &["eval", "--embeddings", ".", "--direction", "2d_to_3d", "--ks", "1", "--label", "t", "--output", "a.csv"],
        dir,
    ));
    let rev = ok(&xmodal(
        &["eval", "--embeddings", ".", "--direction", "3d_to_2d", "--ks", "1", "--label", "t", "--output", "b.csv"],
        dir,
    ));
    let third = 1.0f64 / 3.0;
    assert_eq!(fwd.lines().nth(1).unwrap(), format!("2d_to_3d,t/08,1,{third},3,20"));
    assert_eq!(rev.lines().nth(1).unwrap(), format!("3d_to_2d,t/08,1,{},3,20", 2.0 / 3.0));
}

#[test]
fn embed_imports_external_embeddings() {
    let data = fixture(&["08"], 3);
    let ext = data.path().join("external");
    std::fs::create_dir_all(&ext).unwrap();
    let rows = |scale: f64| -> Vec<(String, Embedding)> {
        (0..3)
            .map(|i| (format!("08/{i:06}"), unit(&[scale + i as f64, 1.0, 0.5])))
            .collect()
    };
    export_embeddings(&ext.join("08_image.embd"), &rows(0.0)).unwrap();
    export_embeddings(&ext.join("08_lidar.embd"), &rows(0.1)).unwrap();
    let text = ok(&xmodal(
        &["embed", "--dataset-root", s(data.path()), "--sequences", "08", "--import", s(&ext), "--output", "emb"],
        data.path(),
    ));
    assert!(text.contains("08: 3 image, 3 lidar"), "{text}");
    let poses = std::fs::read_to_string(data.path().join("emb/08_poses.jsonl")).unwrap();
    assert_eq!(poses.lines().count(), 3);
    ok(&xmodal(&["eval", "--embeddings", "emb", "--label", "ext"], data.path()));

    // keys without poses are rejected
    export_embeddings(&ext.join("08_lidar.embd"), &[("08/000099".to_string(), unit(&[1.0, 0.0, 0.0]))]).unwrap();
    let out = xmodal(
        &["embed", "--dataset-root", s(data.path()), "--sequences", "08", "--import", s(&ext), "--output", "emb"],
        data.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn synthetic_train_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&xmodal(&["train", "--synthetic", "--seed", "3", "--epochs", "2", "--output", "syn"], tmp.path()));
    assert!(text.contains("held-out 2d_to_3d"), "{text}");
    let report = std::fs::read_to_string(tmp.path().join("syn/synthetic_recall.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 2 * 3);
}

#[test]
fn sweep_builtin_thresholds() {
    let data = fixture(&["03", "04", "05", "06", "07", "08", "09"], 4);
    let text = ok(&xmodal(
        &[
            "sweep", "--kind", "thresholds", "--split", "exp_large", "--dataset-root", s(data.path()), "--epochs",
            "1", "--batch-size", "4", "--max-frames", "4", "--output", "sweep.csv",
        ],
        data.path(),
    ));
    assert!(text.contains("6 sweep rows"), "{text}");
    let csv = std::fs::read_to_string(data.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 3);
}
