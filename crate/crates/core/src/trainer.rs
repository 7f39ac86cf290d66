//! Joint optimization of the image and LiDAR towers on batches of aligned
//! pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    backward, forward, init_params, save_checkpoint, CheckpointHeader, EncoderConfig,
    EncoderParams, ForwardTrace,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::loss::{loss_gradient, sample_negatives, triplet_batch_gradient, Batch};
use crate::seed::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BatchedSymmetric,
    Triplet,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batched" | "batched_symmetric" => Ok(Self::BatchedSymmetric),
            "triplet" => Ok(Self::Triplet),
            other => Err(Error::Config(format!("unknown loss kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BatchedSymmetric => "batched",
            Self::Triplet => "triplet",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to 0 over all planned steps.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub temperature: f64,
    pub margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 50,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            loss_kind: LossKind::BatchedSymmetric,
            temperature: 1.0,
            margin: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be ≥ 2 (a batch needs negatives)".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be a finite non-negative number",
                self.learning_rate
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.margin < 0.0 {
            return Err(Error::Config("margin must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Adam first/second moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: EncoderParams,
    pub second: EncoderParams,
}

impl OptimizerState {
    fn new(config: &EncoderConfig) -> Self {
        Self {
            first: EncoderParams::zeros(config),
            second: EncoderParams::zeros(config),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub image_config: EncoderConfig,
    pub lidar_config: EncoderConfig,
    pub image_params: EncoderParams,
    pub lidar_params: EncoderParams,
    pub image_moments: OptimizerState,
    pub lidar_moments: OptimizerState,
    pub epoch: usize,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh towers from each config's own seed; batch shuffling and
    /// negative sampling draw from a stream derived from `seed`.
    pub fn new(image_config: &EncoderConfig, lidar_config: &EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            image_params: init_params(image_config)?,
            lidar_params: init_params(lidar_config)?,
            image_moments: OptimizerState::new(image_config),
            lidar_moments: OptimizerState::new(lidar_config),
            image_config: image_config.clone(),
            lidar_config: lidar_config.clone(),
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::BATCHES)),
        })
    }

    pub fn checkpoint_header(&self) -> CheckpointHeader {
        CheckpointHeader::new(&self.image_config, &self.lidar_config, self.epoch, self.step)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint_header(), &self.image_params, &self.lidar_params)
    }
}

/// Shuffle frame indices and cut them into full batches; the remainder is
/// dropped so every batch has exactly `batch_size` pairs.
pub fn make_epoch_batches(n_frames: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if n_frames < batch_size {
        return Err(Error::Validation(format!(
            "{n_frames} frames cannot fill a batch of {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n_frames).collect();
    order.shuffle(rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// An aligned (camera input, LiDAR input) pair.
#[derive(Debug, Clone)]
pub struct InputPair {
    pub image: Grid,
    pub lidar: Grid,
}

fn forward_all(
    params: &EncoderParams,
    config: &EncoderConfig,
    inputs: &[&Grid],
) -> Result<Vec<(Vec<f64>, ForwardTrace)>> {
    inputs
        .par_iter()
        .map(|g| forward(params, config, g).map(|(e, t)| (e.into_inner(), t)))
        .collect()
}

fn backward_sum(
    params: &EncoderParams,
    config: &EncoderConfig,
    traces: &[(Vec<f64>, ForwardTrace)],
    upstream: &[Vec<f64>],
) -> Result<EncoderParams> {
    let per_sample: Vec<EncoderParams> = traces
        .par_iter()
        .zip(upstream.par_iter())
        .map(|((_, trace), g)| backward(params, config, trace, g))
        .collect::<Result<_>>()?;
    // summed in sample order so results do not depend on thread scheduling
    let mut total = EncoderParams::zeros(config);
    for g in &per_sample {
        total.accumulate(g);
    }
    Ok(total)
}

fn current_lr(config: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    match config.lr_schedule {
        LrSchedule::Constant => config.learning_rate,
        LrSchedule::Cosine => {
            let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
            config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

fn apply_update(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    moments: &mut OptimizerState,
    config: &TrainConfig,
    lr: f64,
    t: usize,
) {
    let wd = config.weight_decay;
    match config.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                for (x, dx) in p.iter_mut().zip(g) {
                    *x -= lr * (dx + wd * *x);
                }
            }
        }
        OptimizerKind::Adam => {
            let (b1, b2) = (config.beta1, config.beta2);
            let c1 = 1.0 - b1.powi(t as i32);
            let c2 = 1.0 - b2.powi(t as i32);
            let tensors = params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(moments.first.tensors_mut())
                .zip(moments.second.tensors_mut());
            for (((p, g), m), v) in tensors {
                for i in 0..p.len() {
                    let dx = g[i] + wd * p[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * dx;
                    v[i] = b2 * v[i] + (1.0 - b2) * dx * dx;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
                }
            }
        }
    }
}

/// One optimization step on a batch: forward both towers, loss and its
/// embedding gradients, backward both towers, update both parameter sets.
/// Returns the loss before the update.
pub fn train_step(
    state: &mut TrainState,
    images: &[&Grid],
    lidars: &[&Grid],
    config: &TrainConfig,
    batch_indices: &[usize],
    total_steps: usize,
) -> Result<f64> {
    let fail = |what: &str| {
        Error::Numerical(format!(
            "{what} at step {} (batch frames {batch_indices:?})",
            state.step
        ))
    };
    let image_fw = forward_all(&state.image_params, &state.image_config, images)?;
    let lidar_fw = forward_all(&state.lidar_params, &state.lidar_config, lidars)?;
    let batch = Batch::new(
        image_fw.iter().map(|(e, _)| e.clone()).collect(),
        lidar_fw.iter().map(|(e, _)| e.clone()).collect(),
    )?;
    let lg = match config.loss_kind {
        LossKind::BatchedSymmetric => loss_gradient(&batch, config.temperature)?,
        LossKind::Triplet => {
            let lidar_neg = sample_negatives(batch.len(), &mut state.rng);
            let image_neg = sample_negatives(batch.len(), &mut state.rng);
            triplet_batch_gradient(&batch, &lidar_neg, &image_neg, config.margin)?
        }
    };
    if !lg.loss.is_finite() {
        return Err(fail("non-finite loss"));
    }
    let g_image = backward_sum(&state.image_params, &state.image_config, &image_fw, &lg.image)?;
    let g_lidar = backward_sum(&state.lidar_params, &state.lidar_config, &lidar_fw, &lg.lidar)?;
    if !g_image.is_finite() || !g_lidar.is_finite() {
        return Err(fail("non-finite gradient"));
    }
    state.step += 1;
    let lr = current_lr(config, state.step - 1, total_steps);
    let t = state.step;
    apply_update(&mut state.image_params, &g_image, &mut state.image_moments, config, lr, t);
    apply_update(&mut state.lidar_params, &g_lidar, &mut state.lidar_moments, config, lr, t);
    Ok(lg.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Mean loss of each epoch, in epoch order (epochs are 1-based).
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.log {
            match out.last_mut() {
                Some((e, sum, n)) if *e == r.epoch => {
                    *sum += r.loss;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.loss, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }
}

/// Run `config.epochs` epochs over `pairs`. `on_epoch` sees the state after
/// every epoch (for logging or intermediate evaluation).
pub fn train(
    pairs: &[InputPair],
    image_config: &EncoderConfig,
    lidar_config: &EncoderConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut state = TrainState::new(image_config, lidar_config, config.seed)?;
    let steps_per_epoch = pairs.len() / config.batch_size.max(1);
    let total_steps = steps_per_epoch * config.epochs;
    let mut log = Vec::with_capacity(total_steps);
    for epoch in 1..=config.epochs {
        let batches = make_epoch_batches(pairs.len(), config.batch_size, &mut state.rng)?;
        let mut sum = 0.0;
        for idx in &batches {
            let images: Vec<&Grid> = idx.iter().map(|&i| &pairs[i].image).collect();
            let lidars: Vec<&Grid> = idx.iter().map(|&i| &pairs[i].lidar).collect();
            let loss = train_step(&mut state, &images, &lidars, config, idx, total_steps)?;
            sum += loss;
            log.push(LossRecord {
                epoch,
                step: state.step,
                loss,
            });
        }
        state.epoch = epoch;
        let mean = sum / batches.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        on_epoch(&state, mean);
    }
    Ok(TrainOutcome { state, log })
}

/// `epoch,step,loss` rows. Losses are written with full round-trip precision.
pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut out = String::from("epoch,step,loss\n");
    for r in log {
        out.push_str(&format!("{},{},{:e}\n", r.epoch, r.step, r.loss));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(seed: u64) -> EncoderConfig {
        EncoderConfig {
            input_h: 4,
            input_w: 4,
            input_channels: 1,
            patch_size: 2,
            feature_dim: 6,
            hidden_dim: 8,
            projection_dim: 4,
            seed,
        }
    }

    fn random_pairs(n: usize, seed: u64) -> Vec<InputPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = || Grid::from_vec(1, 4, 4, (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        (0..n).map(|_| InputPair { image: grid(), lidar: grid() }).collect()
    }

    #[test]
    fn batch_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = make_epoch_batches(100, 32, &mut rng).unwrap();
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        assert_eq!(all.len(), 96);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 96);

        let a = make_epoch_batches(64, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = make_epoch_batches(64, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, c);
        assert!(matches!(
            make_epoch_batches(10, 32, &mut rng),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let cfg: TrainConfig = serde_json::from_str(r#"{"loss_kind":"triplet","epochs":3}"#).unwrap();
        assert_eq!(cfg.loss_kind, LossKind::Triplet);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!("batched".parse::<LossKind>().unwrap(), LossKind::BatchedSymmetric);
    }

    fn run_step(state: &mut TrainState, pairs: &[InputPair], cfg: &TrainConfig) -> f64 {
        let images: Vec<&Grid> = pairs.iter().map(|p| &p.image).collect();
        let lidars: Vec<&Grid> = pairs.iter().map(|p| &p.lidar).collect();
        let idx: Vec<usize> = (0..pairs.len()).collect();
        train_step(state, &images, &lidars, cfg, &idx, 100).unwrap()
    }

    fn batch_loss(state: &TrainState, pairs: &[InputPair], cfg: &TrainConfig) -> f64 {
        let mut probe = state.clone();
        let zero = TrainConfig { learning_rate: 0.0, ..cfg.clone() };
        run_step(&mut probe, pairs, &zero)
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let pairs = random_pairs(8, 0);
        let cfg = TrainConfig { learning_rate: 0.0, batch_size: 8, ..TrainConfig::default() };
        let mut state = TrainState::new(&tiny_config(1), &tiny_config(2), 0).unwrap();
        let before = state.clone();
        let loss = run_step(&mut state, &pairs, &cfg);
        assert!(loss.is_finite());
        assert_eq!(state.image_params, before.image_params);
        assert_eq!(state.lidar_params, before.lidar_params);
    }

    #[test]
    fn small_step_descends() {
        let mut descended = 0;
        for seed in 0..10 {
            let pairs = random_pairs(8, 100 + seed);
            let cfg = TrainConfig { learning_rate: 1e-3, batch_size: 8, ..TrainConfig::default() };
            let mut state = TrainState::new(&tiny_config(seed), &tiny_config(seed + 50), seed).unwrap();
            let before = batch_loss(&state, &pairs, &cfg);
            run_step(&mut state, &pairs, &cfg);
            let after = batch_loss(&state, &pairs, &cfg);
            if after < before {
                descended += 1;
            }
        }
        assert!(descended >= 9, "descended on {descended}/10 seeds");
    }

    #[test]
    fn both_towers_move_every_step() {
        let pairs = random_pairs(8, 3);
        for loss_kind in [LossKind::BatchedSymmetric, LossKind::Triplet] {
            let cfg = TrainConfig { batch_size: 8, loss_kind, margin: 2.0, ..TrainConfig::default() };
            let mut state = TrainState::new(&tiny_config(1), &tiny_config(2), 0).unwrap();
            for _ in 0..3 {
                let before = state.clone();
                run_step(&mut state, &pairs, &cfg);
                assert_ne!(state.image_params, before.image_params);
                assert_ne!(state.lidar_params, before.lidar_params);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = random_pairs(24, 9);
        let cfg = TrainConfig { batch_size: 8, epochs: 3, seed: 4, ..TrainConfig::default() };
        let a = train(&pairs, &tiny_config(1), &tiny_config(2), &cfg, |_, _| {}).unwrap();
        let b = train(&pairs, &tiny_config(1), &tiny_config(2), &cfg, |_, _| {}).unwrap();
        assert_eq!(a.state.image_params, b.state.image_params);
        assert_eq!(a.state.lidar_params, b.state.lidar_params);
        assert_eq!(a.state.image_moments, b.state.image_moments);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 9);
        assert_eq!(a.epoch_means().len(), 3);
    }

    #[test]
    fn cosine_schedule_decays() {
        let cfg = TrainConfig { lr_schedule: LrSchedule::Cosine, ..TrainConfig::default() };
        assert_eq!(current_lr(&cfg, 0, 10), 1e-3);
        assert!(current_lr(&cfg, 10, 10).abs() < 1e-18);
        assert_eq!(current_lr(&TrainConfig::default(), 7, 10), 1e-3);
    }

    #[test]
    fn loss_log_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_log(&path, &[LossRecord { epoch: 1, step: 1, loss: 0.5 }]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "epoch,step,loss\n1,1,5e-1\n");
    }
}
