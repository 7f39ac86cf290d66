//! Synthetic stand-ins for paired camera/LiDAR data.
//!
//! [`SyntheticTask`] is the shared-latent toy problem used for convergence
//! checks: a latent `z` on the unit sphere is rendered into each modality by
//! a fixed random linear map plus Gaussian noise. [`write_kitti_like`] lays
//! out a small fake KITTI odometry tree (scans, PNG images, poses) so the
//! file-backed pipeline can run without the real dataset.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_point_cloud, write_poses, DatasetLayout, Point, PointCloud};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::grid::Grid;
use crate::projection::ProjectionConfig;
use crate::seed::{derive_seed, stream};
use crate::trainer::InputPair;

/// Spacing of held-out synthetic poses along x, far above any recall
/// threshold so only the exact pair counts as a match.
pub const HELDOUT_POSE_SPACING: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            noise_sigma: 0.05,
            train_pairs: 512,
            heldout_pairs: 128,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: Vec<InputPair>,
    pub heldout: Vec<InputPair>,
    /// Latents of the held-out pairs, in order.
    pub heldout_latents: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn heldout_pose(i: usize) -> Pose {
        Pose::from_translation(i as f64 * HELDOUT_POSE_SPACING, 0.0, 0.0)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

struct Renderer {
    channels: usize,
    height: usize,
    width: usize,
    /// `pixels × latent_dim`, row-major.
    map: Vec<f64>,
}

impl Renderer {
    fn new(config: &EncoderConfig, latent_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let pixels = config.input_channels * config.input_h * config.input_w;
        Self {
            channels: config.input_channels,
            height: config.input_h,
            width: config.input_w,
            map: (0..pixels * latent_dim).map(|_| gaussian(rng)).collect(),
        }
    }

    fn render(&self, z: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Grid {
        let data = self
            .map
            .chunks_exact(z.len())
            .map(|row| row.iter().zip(z).map(|(m, v)| m * v).sum::<f64>() + sigma * gaussian(rng))
            .collect();
        Grid::from_vec(self.channels, self.height, self.width, data).expect("renderer shape")
    }
}

/// Generate the shared-latent task. All randomness comes from `seed`.
pub fn generate_task(
    config: &SyntheticConfig,
    image: &EncoderConfig,
    lidar: &EncoderConfig,
    seed: u64,
) -> Result<SyntheticTask> {
    if config.latent_dim == 0 {
        return Err(Error::Config("latent_dim must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SYNTHETIC_DATA));
    let image_map = Renderer::new(image, config.latent_dim, &mut rng);
    let lidar_map = Renderer::new(lidar, config.latent_dim, &mut rng);
    let draw = |rng: &mut ChaCha8Rng| {
        let z: Vec<f64> = (0..config.latent_dim).map(|_| gaussian(rng)).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let z: Vec<f64> = z.iter().map(|v| v / norm).collect();
        let pair = InputPair {
            image: image_map.render(&z, config.noise_sigma, rng),
            lidar: lidar_map.render(&z, config.noise_sigma, rng),
        };
        (z, pair)
    };
    let train = (0..config.train_pairs).map(|_| draw(&mut rng).1).collect();
    let (heldout_latents, heldout) = (0..config.heldout_pairs).map(|_| draw(&mut rng)).unzip();
    Ok(SyntheticTask {
        train,
        heldout,
        heldout_latents,
    })
}

/// Shape of a fake KITTI tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KittiLikeConfig {
    pub frames_per_sequence: usize,
    /// Meters travelled between frames.
    pub frame_spacing: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub landmarks_per_sequence: usize,
}

impl Default for KittiLikeConfig {
    fn default() -> Self {
        Self {
            frames_per_sequence: 48,
            frame_spacing: 2.0,
            image_width: 96,
            image_height: 32,
            landmarks_per_sequence: 120,
        }
    }
}

struct Landmark {
    position: Vector3<f64>,
    height: f64,
    brightness: u8,
}

/// Render one camera frame: landmarks are vertical poles drawn by a pinhole
/// looking along the sensor +x axis.
fn render_camera(cfg: &KittiLikeConfig, pose: &Pose, landmarks: &[Landmark]) -> image::GrayImage {
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let focal = w / 2.0; // 90° horizontal field of view
    let mut img = image::GrayImage::from_pixel(cfg.image_width, cfg.image_height, image::Luma([20]));
    let world_to_sensor = pose.rotation.transpose();
    let mut visible: Vec<(f64, &Landmark, Vector3<f64>)> = landmarks
        .iter()
        .filter_map(|l| {
            let p = world_to_sensor * (l.position - pose.translation);
            (p.x > 1.0 && p.x < 60.0).then(|| (p.x, l, p))
        })
        .collect();
    // far to near so closer poles overwrite
    visible.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite depth"));
    for (depth, l, p) in visible {
        let u = w / 2.0 - focal * p.y / depth;
        let half_width = (focal * POLE_RADIUS / depth).max(0.5);
        let top = h / 2.0 - focal * (p.z + l.height) / depth;
        let bottom = h / 2.0 - focal * p.z / depth;
        let shade = (l.brightness as f64 * (1.0 - depth / 80.0)).clamp(0.0, 255.0) as u8;
        let (x0, x1) = ((u - half_width).floor().max(0.0), (u + half_width).ceil().min(w));
        let (y0, y1) = (top.floor().max(0.0), bottom.ceil().min(h));
        let mut x = x0;
        while x < x1 {
            let mut y = y0;
            while y < y1 {
                img.put_pixel(x as u32, y as u32, image::Luma([shade]));
                y += 1.0;
            }
            x += 1.0;
        }
    }
    img
}

/// Pole radius in meters, for both renderers.
const POLE_RADIUS: f64 = 0.4;
/// Sensor height above the ground plane.
const SENSOR_HEIGHT: f64 = 1.7;
const MAX_RETURN_RANGE: f64 = 70.0;

/// Ray-cast one return per beam of the default projection grid over the
/// forward 120°, against the ground plane and the landmark poles.
fn scan_landmarks(pose: &Pose, landmarks: &[Landmark], rng: &mut ChaCha8Rng) -> PointCloud {
    let grid = ProjectionConfig::default();
    let world_to_sensor = pose.rotation.transpose();
    let poles: Vec<(Vector3<f64>, &Landmark)> = landmarks
        .iter()
        .map(|l| (world_to_sensor * (l.position - pose.translation), l))
        .filter(|(c, _)| c.xy().norm() < MAX_RETURN_RANGE + POLE_RADIUS)
        .collect();
    let mut points = Vec::new();
    for u in 0..grid.width {
        let azimuth = grid.column_azimuth(u);
        if azimuth.abs() > 60f64.to_radians() {
            continue;
        }
        for v in 0..grid.height {
            let elevation = grid.row_elevation(v);
            let d = Vector3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
            let mut best = (MAX_RETURN_RANGE, None);
            if d.z < 0.0 {
                let t = -SENSOR_HEIGHT / d.z;
                if t < best.0 {
                    best = (t, Some(0.1));
                }
            }
            let a = d.x * d.x + d.y * d.y;
            for (c, l) in &poles {
                let b = d.x * c.x + d.y * c.y;
                let disc = b * b - a * (c.x * c.x + c.y * c.y - POLE_RADIUS * POLE_RADIUS);
                if disc < 0.0 {
                    continue;
                }
                let t = (b - disc.sqrt()) / a;
                let z = t * d.z;
                if t > 0.0 && t < best.0 && z >= c.z && z <= c.z + l.height {
                    best = (t, Some(l.brightness as f64 / 255.0));
                }
            }
            if let (t, Some(reflectance)) = best {
                let t = t * (1.0 + 1e-3 * gaussian(rng));
                let p = d * t;
                points.push(Point::new(p.x as f32, p.y as f32, p.z as f32, reflectance as f32));
            }
        }
    }
    PointCloud::new(points)
}

/// Write scans, camera PNGs and poses for `sequences` under `root` in the
/// standard odometry layout.
pub fn write_kitti_like(root: &Path, sequences: &[&str], config: &KittiLikeConfig, seed: u64) -> Result<()> {
    let layout = DatasetLayout::default();
    let poses_dir = root.join("poses");
    fs::create_dir_all(&poses_dir).map_err(|e| Error::io(&poses_dir, e))?;
    for (si, seq) in sequences.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + si as u64));
        let length = config.frames_per_sequence as f64 * config.frame_spacing;
        let landmarks: Vec<Landmark> = (0..config.landmarks_per_sequence)
            .map(|_| {
                let along = rng.random_range(-20.0..length + 60.0);
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                Landmark {
                    position: Vector3::new(along, side * rng.random_range(3.0..25.0), -1.7),
                    height: rng.random_range(1.0..8.0),
                    brightness: rng.random_range(60..=255),
                }
            })
            .collect();
        let lidar_dir = layout.lidar_dir(root, seq);
        let image_dir = layout.image_dir(root, seq);
        fs::create_dir_all(&lidar_dir).map_err(|e| Error::io(&lidar_dir, e))?;
        fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
        let mut poses = Vec::with_capacity(config.frames_per_sequence);
        for f in 0..config.frames_per_sequence {
            let yaw = 0.15 * (f as f64 * 0.2).sin();
            let pose = Pose {
                rotation: *nalgebra::Rotation3::from_euler_angles(0.0, 0.0, yaw).matrix(),
                translation: Vector3::new(f as f64 * config.frame_spacing, 2.0 * (f as f64 * 0.1).sin(), 0.0),
            };
            debug_assert!((pose.rotation.transpose() * pose.rotation - Matrix3::identity()).amax() < 1e-12);
            write_point_cloud(layout.lidar_path(root, seq, f), &scan_landmarks(&pose, &landmarks, &mut rng))?;
            let img_path = layout.image_path(root, seq, f);
            render_camera(config, &pose, &landmarks)
                .save(&img_path)
                .map_err(|e| Error::Format(format!("{}: {e}", img_path.display())))?;
            poses.push(pose);
        }
        write_poses(layout.pose_path(root, seq), &poses)?;
    }
    Ok(())
}
