use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use xmodal::dataset::SplitConfig;
use xmodal::encoder::{export_embeddings, import_embeddings};
use xmodal::evaluation::{
    format_report_csv, recall_with_results, write_curve_csv, write_report_csv, write_results, Direction,
    EvalConfig, Query,
};
use xmodal::geometry::Pose;
use xmodal::pipeline::{embed_frames, preprocess, run_synthetic, train_split, KeyedEmbeddings, RunConfig, Towers};
use xmodal::retrieval::{build_index, read_pose_sidecar, write_pose_sidecar};
use xmodal::sweep::{preset_cells, run_ablation_sweep, threshold_cells, write_sweep_csv, SweepConfig};
use xmodal::trainer::{write_loss_log, LossKind};
use xmodal::{Error, Result};

/// Cross-modal camera/LiDAR localization: preprocess scans, train the dual
/// encoder, embed sequences and evaluate recall@k.
#[derive(Debug, Parser)]
#[command(name = "xmodal", version)]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Project LiDAR scans to cached range images plus a JSON manifest.
    Preprocess(PreprocessArgs),
    /// Train both encoders on a split or on the built-in synthetic task.
    Train(TrainArgs),
    /// Embed sequences with a checkpoint, or import external embeddings.
    Embed(EmbedArgs),
    /// Compute recall@k from embedding files.
    Eval(EvalArgs),
    /// Train and evaluate a grid of ablation cells.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root; falls back to the config, then $XMODAL_DATA_ROOT.
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    /// Split preset name (exp_large, exp_larger, exp_largest, exp_360).
    #[arg(long)]
    split: Option<String>,
    /// Base seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(root) = &self.dataset_root {
            cfg.dataset_root = Some(root.clone());
        }
        if let Some(split) = &self.split {
            cfg.split = SplitConfig::Preset(split.clone());
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

/// Comma-separated sequence ids, else the split's train and eval sequences.
fn sequences_or_split(cfg: &RunConfig, sequences: &Option<Vec<String>>, with_train: bool) -> Result<Vec<String>> {
    if let Some(s) = sequences {
        return Ok(s.clone());
    }
    let split = cfg.resolve_split()?;
    let mut out = if with_train { split.train_sequences } else { Vec::new() };
    out.extend(split.eval_sequences);
    Ok(out)
}

/// A distance cut in meters, or none.
#[derive(Debug, Clone, Copy)]
struct Threshold(Option<f64>);

fn parse_threshold(s: &str) -> std::result::Result<Threshold, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Threshold(None));
    }
    s.parse::<f64>()
        .map(|v| Threshold(Some(v)))
        .map_err(|e| format!("expected meters or 'none': {e}"))
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[command(flatten)]
    common: Common,
    /// Sequences to process (default: all sequences of the split).
    #[arg(long, value_delimiter = ',')]
    sequences: Option<Vec<String>>,
    /// Output directory (default: cache_dir of the config).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Drop points farther than this many meters, or 'none'.
    #[arg(long, value_parser = parse_threshold)]
    distance_threshold: Option<Threshold>,
    /// Horizontal field of view kept after projection, in degrees.
    #[arg(long)]
    fov: Option<f64>,
    /// Only the first N frames of each sequence.
    #[arg(long)]
    max_frames: Option<usize>,
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let mut cfg = args.common.run_config()?;
    if let Some(Threshold(t)) = args.distance_threshold {
        cfg.projection.distance_threshold = t;
    }
    if let Some(f) = args.fov {
        cfg.projection.fov_horizontal = f;
    }
    if args.max_frames.is_some() {
        cfg.max_frames_per_sequence = args.max_frames;
    }
    let out = args
        .output
        .or_else(|| cfg.cache_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --output or set cache_dir".into()))?;
    let root = cfg.dataset_root()?;
    let sequences = sequences_or_split(&cfg, &args.sequences, true)?;
    let s = preprocess(&cfg, &root, &sequences, &out)?;
    println!(
        "preprocessed {} frames: {} written, {} up to date",
        s.frames, s.written, s.skipped
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Batched,
    Triplet,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Batched => LossKind::BatchedSymmetric,
            LossArg::Triplet => LossKind::Triplet,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Loss: batched symmetric contrastive or the one-negative triplet baseline.
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Number of passes over the training pairs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Pairs per batch (the loss sees batch_size - 1 negatives per anchor).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Train on the built-in synthetic paired task instead of a dataset.
    #[arg(long)]
    synthetic: bool,
    /// Only the first N frames of each sequence.
    #[arg(long)]
    max_frames: Option<usize>,
    /// Output directory for checkpoint.ckpt and loss_log.csv.
    #[arg(long, default_value = "runs/train")]
    output: PathBuf,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.common.run_config()?;
    if let Some(l) = args.loss {
        cfg.train.loss_kind = l.into();
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    if args.max_frames.is_some() {
        cfg.max_frames_per_sequence = args.max_frames;
    }
    cfg.validate()?;
    let out = &args.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let outcome = if args.synthetic {
        let run = run_synthetic(&cfg)?;
        write_report_csv(&out.join("synthetic_recall.csv"), &run.reports)?;
        for r in &run.reports {
            println!("held-out {} recall@{:?} = {:?}", r.direction, r.ks, r.recalls);
        }
        run.outcome
    } else {
        train_split(&cfg, &cfg.dataset_root()?)?
    };
    outcome.state.save_checkpoint(&out.join("checkpoint.ckpt"))?;
    write_loss_log(&out.join("loss_log.csv"), &outcome.log)?;
    if let Some((epoch, mean)) = outcome.epoch_means().last() {
        println!(
            "trained {} ({} steps); epoch {epoch} mean loss {mean:.6}",
            cfg.train.loss_kind, outcome.state.step
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`.
    #[arg(long, conflicts_with = "import", required_unless_present = "import")]
    checkpoint: Option<PathBuf>,
    /// Directory with externally computed <seq>_image.embd and <seq>_lidar.embd.
    #[arg(long)]
    import: Option<PathBuf>,
    /// Sequences to embed (default: the split's eval sequences).
    #[arg(long, value_delimiter = ',')]
    sequences: Option<Vec<String>>,
    /// Only the first N frames of each sequence.
    #[arg(long)]
    max_frames: Option<usize>,
    /// Output directory for <seq>_image.embd, <seq>_lidar.embd and <seq>_poses.jsonl.
    #[arg(long, default_value = "runs/embed")]
    output: PathBuf,
}

fn check_keys(seq: &str, image: &KeyedEmbeddings, lidar: &KeyedEmbeddings, poses: &[(String, Pose)]) -> Result<()> {
    for (key, _) in image.iter().chain(lidar) {
        if !poses.iter().any(|(k, _)| k == key) {
            return Err(Error::Validation(format!("sequence {seq}: no pose for embedding key {key}")));
        }
    }
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let mut cfg = args.common.run_config()?;
    if args.max_frames.is_some() {
        cfg.max_frames_per_sequence = args.max_frames;
    }
    let root = cfg.dataset_root()?;
    let sequences = sequences_or_split(&cfg, &args.sequences, false)?;
    let towers = args.checkpoint.as_deref().map(Towers::load).transpose()?;
    let out = &args.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for seq in &sequences {
        let frames = cfg.frames(&root, &cfg.layout, std::slice::from_ref(seq))?;
        let poses: Vec<(String, Pose)> = frames.iter().map(|f| (f.key(), f.pose)).collect();
        let (image, lidar) = match (&towers, &args.import) {
            (Some(t), _) => embed_frames(&cfg, t, &frames)?,
            (None, Some(dir)) => {
                let image = import_embeddings(&dir.join(format!("{seq}_image.embd")), None)?;
                let dim = image.first().map(|(_, e)| e.dim());
                let lidar = import_embeddings(&dir.join(format!("{seq}_lidar.embd")), dim)?;
                (image, lidar)
            }
            (None, None) => unreachable!("clap requires --checkpoint or --import"),
        };
        check_keys(seq, &image, &lidar, &poses)?;
        export_embeddings(&out.join(format!("{seq}_image.embd")), &image)?;
        export_embeddings(&out.join(format!("{seq}_lidar.embd")), &lidar)?;
        write_pose_sidecar(&out.join(format!("{seq}_poses.jsonl")), &poses)?;
        println!("{seq}: {} image, {} lidar embeddings", image.len(), lidar.len());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    #[value(name = "2d_to_3d")]
    TwoDToThreeD,
    #[value(name = "3d_to_2d")]
    ThreeDToTwoD,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::TwoDToThreeD => Direction::TwoDToThreeD,
            DirectionArg::ThreeDToTwoD => Direction::ThreeDToTwoD,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `embed`.
    #[arg(long)]
    embeddings: PathBuf,
    /// Sequences to evaluate (default: every <seq>_image.embd in the directory).
    #[arg(long, value_delimiter = ',')]
    sequences: Option<Vec<String>>,
    /// 2d_to_3d: camera queries against LiDAR; 3d_to_2d: the reverse.
    #[arg(long, value_enum, default_value = "2d_to_3d")]
    direction: DirectionArg,
    /// Comma-separated ascending k values.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Match distance in meters (strict).
    #[arg(long)]
    threshold: Option<f64>,
    /// Exclude database frames of the same sequence within this many frames.
    #[arg(long)]
    frame_gap: Option<usize>,
    /// Report CSV path.
    #[arg(long, default_value = "recall.csv")]
    output: PathBuf,
    /// Also write recall for k = 1..=20 to this CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Also write per-query retrieval results (JSON lines).
    #[arg(long)]
    results: Option<PathBuf>,
    /// Split label prefix in the report (default: the configured split name).
    #[arg(long)]
    label: Option<String>,
}

fn discover_sequences(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(seq) = entry.file_name().to_str().and_then(|n| n.strip_suffix("_image.embd")) {
            out.push(seq.to_string());
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Validation(format!("{}: no *_image.embd files", dir.display())));
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.common.run_config()?;
    let mut eval: EvalConfig = cfg.eval.clone();
    if let Some(ks) = args.ks {
        eval.ks = ks;
    }
    if let Some(t) = args.threshold {
        eval.distance_threshold = t;
    }
    if let Some(g) = args.frame_gap {
        eval.frame_gap = g;
    }
    eval.validate()?;
    let direction: Direction = args.direction.into();
    let label = match args.label {
        Some(l) => l,
        None => cfg.resolve_split()?.name,
    };
    let dir = &args.embeddings;
    let sequences = match args.sequences {
        Some(s) => s,
        None => discover_sequences(dir)?,
    };
    let mut reports = Vec::new();
    let mut curves = Vec::new();
    let mut all_results = Vec::new();
    for seq in &sequences {
        let image = import_embeddings(&dir.join(format!("{seq}_image.embd")), None)?;
        let dim = image.first().map(|(_, e)| e.dim());
        let lidar = import_embeddings(&dir.join(format!("{seq}_lidar.embd")), dim)?;
        let poses: std::collections::HashMap<String, Pose> =
            read_pose_sidecar(&dir.join(format!("{seq}_poses.jsonl")))?.into_iter().collect();
        let pose_of = |k: &str| {
            poses
                .get(k)
                .copied()
                .ok_or_else(|| Error::Validation(format!("sequence {seq}: no pose for {k}")))
        };
        let (queries, database) = match direction {
            Direction::TwoDToThreeD => (image, lidar),
            Direction::ThreeDToTwoD => (lidar, image),
        };
        let index = build_index(
            database
                .into_iter()
                .map(|(k, e)| Ok((k.clone(), e, pose_of(&k)?)))
                .collect::<Result<_>>()?,
        )?;
        let queries: Vec<Query> = queries
            .into_iter()
            .map(|(k, e)| {
                Ok(Query {
                    pose: pose_of(&k)?,
                    key: k,
                    embedding: e,
                })
            })
            .collect::<Result<_>>()?;
        let name = format!("{label}/{seq}");
        let (report, results) = recall_with_results(&queries, &index, &eval, direction, &name)?;
        if args.curve.is_some() {
            let curve_cfg = EvalConfig {
                ks: (1..=20).collect(),
                ..eval.clone()
            };
            curves.push(recall_with_results(&queries, &index, &curve_cfg, direction, &name)?.0);
        }
        all_results.extend(results);
        reports.push(report);
    }
    write_report_csv(&args.output, &reports)?;
    if let Some(p) = &args.curve {
        write_curve_csv(p, &curves)?;
    }
    if let Some(p) = &args.results {
        write_results(p, &all_results)?;
    }
    print!("{}", format_report_csv(&reports));
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepKind {
    /// Distance thresholds none, 30 and 50 m on one split.
    Thresholds,
    /// Split presets exp_large, exp_larger and exp_largest.
    Presets,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Sweep definition (JSON with base config, cells and directions).
    #[arg(long, conflicts_with = "kind", required_unless_present = "kind")]
    sweep: Option<PathBuf>,
    /// Built-in sweep using the run config as base.
    #[arg(long, value_enum)]
    kind: Option<SweepKind>,
    #[command(flatten)]
    common: Common,
    /// Training epochs of every cell.
    #[arg(long)]
    epochs: Option<usize>,
    /// Pairs per training batch of every cell.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Only the first N frames of each sequence.
    #[arg(long)]
    max_frames: Option<usize>,
    /// Sweep CSV path.
    #[arg(long, default_value = "sweep.csv")]
    output: PathBuf,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut sweep = match (&args.sweep, args.kind) {
        (Some(p), _) => SweepConfig::load(p)?,
        (None, Some(kind)) => {
            let base = args.common.run_config()?;
            let cells = match kind {
                SweepKind::Thresholds => {
                    let split = base.resolve_split()?.name;
                    threshold_cells(&split, &[None, Some(30.0), Some(50.0)], &base.projection)
                }
                SweepKind::Presets => preset_cells(&["exp_large", "exp_larger", "exp_largest"]),
            };
            SweepConfig {
                base,
                cells,
                directions: vec![Direction::TwoDToThreeD],
            }
        }
        (None, None) => unreachable!("clap requires --sweep or --kind"),
    };
    if let Some(root) = &args.common.dataset_root {
        sweep.base.dataset_root = Some(root.clone());
    }
    if let Some(seed) = args.common.seed {
        sweep.base.train.seed = seed;
    }
    if let Some(e) = args.epochs {
        sweep.base.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        sweep.base.train.batch_size = b;
    }
    if args.max_frames.is_some() {
        sweep.base.max_frames_per_sequence = args.max_frames;
    }
    let root = sweep.base.dataset_root()?;
    let rows = run_ablation_sweep(&sweep, &root)?;
    write_sweep_csv(&args.output, &rows)?;
    println!("{} sweep rows written to {}", rows.len(), args.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
