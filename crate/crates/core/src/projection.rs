//! Spherical projection of LiDAR sweeps into range images, with the
//! distance cut and the horizontal field-of-view crop applied before the
//! LiDAR encoder sees a scan.

use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::PointCloud;
use crate::error::{Error, Result};
use crate::formats;
use crate::grid::Grid;

/// Normalization range when no distance threshold is configured.
pub const DEFAULT_RANGE_MAX: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    /// Degrees.
    pub elevation_max: f64,
    /// Degrees.
    pub elevation_min: f64,
    /// Degrees, centred on the forward (+x) axis.
    pub fov_horizontal: f64,
    /// Meters; `None` keeps every point.
    pub distance_threshold: Option<f64>,
    /// Meters; defaults to the distance threshold, else 80 m.
    pub range_max_for_normalization: Option<f64>,
}

impl Default for ProjectionConfig {
    /// HDL-64E geometry, 50 m cut and a 90° camera-matching crop.
    fn default() -> Self {
        Self {
            height: 64,
            width: 1024,
            elevation_max: 2.0,
            elevation_min: -24.8,
            fov_horizontal: 90.0,
            distance_threshold: Some(50.0),
            range_max_for_normalization: None,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height < 1 || self.width < 2 {
            return fail(format!(
                "projection grid {}×{} too small (need height ≥ 1, width ≥ 2)",
                self.height, self.width
            ));
        }
        if !(self.elevation_max > self.elevation_min) {
            return fail(format!(
                "elevation_max {} must exceed elevation_min {}",
                self.elevation_max, self.elevation_min
            ));
        }
        if !(self.fov_horizontal > 0.0 && self.fov_horizontal <= 360.0) {
            return fail(format!(
                "fov_horizontal {} outside (0, 360]",
                self.fov_horizontal
            ));
        }
        if let Some(t) = self.distance_threshold {
            if !(t > 0.0) {
                return fail(format!("distance_threshold {t} must be positive"));
            }
        }
        if !(self.range_max() > 0.0) {
            return fail(format!(
                "range_max_for_normalization {} must be positive",
                self.range_max()
            ));
        }
        Ok(())
    }

    pub fn range_max(&self) -> f64 {
        self.range_max_for_normalization
            .or(self.distance_threshold)
            .unwrap_or(DEFAULT_RANGE_MAX)
    }

    /// Azimuth (radians) at the centre of column `u` of the full 360° grid.
    pub fn column_azimuth(&self, u: usize) -> f64 {
        PI * (1.0 - 2.0 * (u as f64 + 0.5) / self.width as f64)
    }

    /// Elevation (radians) at the centre of row `v`.
    pub fn row_elevation(&self, v: usize) -> f64 {
        let (lo, hi) = (self.elevation_min.to_radians(), self.elevation_max.to_radians());
        lo + (1.0 - (v as f64 + 0.5) / self.height as f64) * (hi - lo)
    }

    /// Pixel hit by a point at `(azimuth, elevation)` radians, or `None`
    /// when the elevation falls outside the vertical band.
    pub fn pixel_of(&self, azimuth: f64, elevation: f64) -> Option<(usize, usize)> {
        let (lo, hi) = (self.elevation_min.to_radians(), self.elevation_max.to_radians());
        if elevation < lo || elevation > hi {
            return None;
        }
        let u = (0.5 * (1.0 - azimuth / PI) * self.width as f64).floor();
        let v = ((1.0 - (elevation - lo) / (hi - lo)) * self.height as f64).floor();
        let u = u.clamp(0.0, (self.width - 1) as f64) as usize;
        let v = v.clamp(0.0, (self.height - 1) as f64) as usize;
        Some((v, u))
    }
}

/// Range values in meters, row-major, 0 marks an empty pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// Projection settings the image was produced with.
    pub config: ProjectionConfig,
    /// Horizontal span (degrees) covered by the columns: 360 until cropped.
    pub azimuth_span: f64,
}

impl RangeImage {
    pub fn empty(config: &ProjectionConfig) -> Self {
        Self {
            height: config.height,
            width: config.width,
            data: vec![0.0; config.height * config.width],
            config: config.clone(),
            azimuth_span: 360.0,
        }
    }

    #[inline]
    pub fn get(&self, v: usize, u: usize) -> f32 {
        self.data[v * self.width + u]
    }

    pub fn filled(&self) -> usize {
        self.data.iter().filter(|&&r| r > 0.0).count()
    }

    pub fn max_range(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + self.data.len() * 4);
        formats::write_tensor_block(&mut buf, self.height, self.width, &self.data)
            .expect("in-memory write of a consistent image");
        buf
    }

    /// Decode an `RIMG` block. The projection settings are not part of the
    /// file and are taken from `config`.
    pub fn from_reader<R: Read>(r: &mut R, config: &ProjectionConfig) -> Result<Self> {
        let (height, width, data) = formats::read_tensor_block(r)?;
        let azimuth_span = if width == config.width {
            360.0
        } else {
            config.fov_horizontal
        };
        Ok(Self {
            height,
            width,
            data,
            config: config.clone(),
            azimuth_span,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, config: &ProjectionConfig) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(&mut bytes.as_slice(), config)
    }
}

/// Keep points whose distance from the sensor is at most `threshold`.
pub fn filter_by_distance(cloud: &PointCloud, threshold: f64) -> PointCloud {
    PointCloud::new(
        cloud
            .points
            .iter()
            .filter(|p| p.range() <= threshold)
            .copied()
            .collect(),
    )
}

/// Counters from one projection pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    pub projected: usize,
    pub out_of_band: usize,
    pub at_origin: usize,
    pub beyond_threshold: usize,
}

/// Spherically project a cloud. The closest return wins on pixel collisions.
pub fn project(cloud: &PointCloud, config: &ProjectionConfig) -> Result<RangeImage> {
    project_with_stats(cloud, config).map(|(img, _)| img)
}

pub fn project_with_stats(
    cloud: &PointCloud,
    config: &ProjectionConfig,
) -> Result<(RangeImage, ProjectionStats)> {
    config.validate()?;
    let mut img = RangeImage::empty(config);
    let mut stats = ProjectionStats::default();
    for p in &cloud.points {
        let r = p.range();
        if r == 0.0 {
            stats.at_origin += 1;
            continue;
        }
        if config.distance_threshold.is_some_and(|t| r > t) {
            stats.beyond_threshold += 1;
            continue;
        }
        let azimuth = (p.y as f64).atan2(p.x as f64);
        let elevation = (p.z as f64 / r).asin();
        let Some((v, u)) = config.pixel_of(azimuth, elevation) else {
            stats.out_of_band += 1;
            continue;
        };
        let cell = &mut img.data[v * config.width + u];
        let r = r as f32;
        if *cell == 0.0 || r < *cell {
            *cell = r;
        }
        stats.projected += 1;
    }
    if stats.at_origin > 0 {
        log::warn!("skipped {} points at the sensor origin", stats.at_origin);
    }
    Ok((img, stats))
}

/// Keep the contiguous column band centred on azimuth 0 spanning
/// `fov_horizontal` degrees.
pub fn crop_fov(img: &RangeImage, fov_horizontal: f64) -> Result<RangeImage> {
    if !(fov_horizontal > 0.0 && fov_horizontal <= 360.0) {
        return Err(Error::Config(format!(
            "fov_horizontal {fov_horizontal} outside (0, 360]"
        )));
    }
    let deg_per_col = img.azimuth_span / img.width as f64;
    let centre = img.width as f64 / 2.0;
    let keep: Vec<usize> = (0..img.width)
        .filter(|&u| (((u as f64 + 0.5) - centre) * deg_per_col).abs() <= fov_horizontal / 2.0 + 1e-9)
        .collect();
    let (first, last) = match (keep.first(), keep.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => {
            // narrower than one column: keep the centre column
            let c = (img.width / 2).min(img.width - 1);
            (c, c)
        }
    };
    let width = last - first + 1;
    let mut data = Vec::with_capacity(img.height * width);
    for v in 0..img.height {
        data.extend_from_slice(&img.data[v * img.width + first..=v * img.width + last]);
    }
    Ok(RangeImage {
        height: img.height,
        width,
        data,
        config: img.config.clone(),
        azimuth_span: img.azimuth_span * width as f64 / img.width as f64,
    })
}

/// Scale ranges into [0, 1] and nearest-neighbour resize to the encoder's
/// input size. Empty pixels stay 0.
pub fn normalize_for_encoder(img: &RangeImage, target_h: usize, target_w: usize) -> Result<Grid> {
    let range_max = img.config.range_max();
    if !(range_max > 0.0) {
        return Err(Error::Config(format!(
            "range_max_for_normalization {range_max} must be positive"
        )));
    }
    let mut grid = Grid::zeros(1, target_h, target_w);
    for y in 0..target_h {
        let sy = y * img.height / target_h;
        for x in 0..target_w {
            let sx = x * img.width / target_w;
            let r = img.get(sy, sx) as f64;
            grid.data[y * target_w + x] = (r / range_max).clamp(0.0, 1.0);
        }
    }
    Ok(grid)
}

/// Full LiDAR preprocessing: distance cut, projection, FoV crop.
pub fn range_image_for_scan(cloud: &PointCloud, config: &ProjectionConfig) -> Result<RangeImage> {
    let img = project(cloud, config)?;
    crop_fov(&img, config.fov_horizontal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Point;
    use proptest::prelude::*;

    fn full_cfg() -> ProjectionConfig {
        ProjectionConfig {
            distance_threshold: None,
            fov_horizontal: 360.0,
            ..ProjectionConfig::default()
        }
    }

    fn at_range(r: f32) -> Point {
        Point::new(r, 0.0, 0.0, 0.0)
    }

    #[test]
    fn distance_filter_is_inclusive() {
        let cloud = PointCloud::new(vec![at_range(10.0), at_range(49.9), at_range(50.0), at_range(60.0)]);
        let kept = filter_by_distance(&cloud, 50.0);
        let ranges: Vec<f32> = kept.points.iter().map(|p| p.x).collect();
        assert_eq!(ranges, vec![10.0, 49.9, 50.0]);
        assert!(filter_by_distance(&PointCloud::default(), 50.0).is_empty());
        let near = PointCloud::new(vec![at_range(1.0), Point::new(0.0, 3.0, 4.0, 0.2)]);
        assert_eq!(filter_by_distance(&near, 50.0), near);
    }

    #[test]
    fn forward_point_lands_on_centre_column() {
        let cfg = full_cfg();
        let img = project(&PointCloud::new(vec![at_range(10.0)]), &cfg).unwrap();
        assert_eq!(img.filled(), 1);
        // row of φ = 0 for [−24.8°, 2°] over 64 rows: floor((1 − 24.8/26.8)·64) = 4
        assert_eq!(img.get(4, 512), 10.0);
    }

    #[test]
    fn closest_return_wins() {
        let cfg = full_cfg();
        let cloud = PointCloud::new(vec![at_range(10.0), at_range(7.0)]);
        assert_eq!(project(&cloud, &cfg).unwrap().get(4, 512), 7.0);
        let reversed = PointCloud::new(vec![at_range(7.0), at_range(10.0)]);
        assert_eq!(project(&reversed, &cfg).unwrap().get(4, 512), 7.0);
    }

    #[test]
    fn points_above_band_are_dropped() {
        let cfg = full_cfg();
        let phi = 10f64.to_radians();
        let p = Point::new((10.0 * phi.cos()) as f32, 0.0, (10.0 * phi.sin()) as f32, 0.0);
        let (img, stats) = project_with_stats(&PointCloud::new(vec![p]), &cfg).unwrap();
        assert_eq!(img.filled(), 0);
        assert_eq!(stats.out_of_band, 1);
    }

    #[test]
    fn origin_points_are_counted() {
        let (img, stats) =
            project_with_stats(&PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 1.0)]), &full_cfg())
                .unwrap();
        assert_eq!(stats.at_origin, 1);
        assert_eq!(img.filled(), 0);
    }

    #[test]
    fn crop_widths() {
        let img = RangeImage::empty(&full_cfg());
        let c90 = crop_fov(&img, 90.0).unwrap();
        assert!((c90.width as i64 - 256).abs() <= 1, "{}", c90.width);
        assert_eq!(c90.height, 64);
        let c180 = crop_fov(&img, 180.0).unwrap();
        assert!((c180.width as i64 - 512).abs() <= 1);
        assert_eq!(crop_fov(&img, 360.0).unwrap().data, img.data);
        assert!(crop_fov(&img, 0.0).is_err());
    }

    #[test]
    fn crop_is_centred_forward() {
        let cfg = full_cfg();
        let mut img = RangeImage::empty(&cfg);
        for v in 0..cfg.height {
            for u in 0..cfg.width {
                img.data[v * cfg.width + u] = u as f32;
            }
        }
        let c = crop_fov(&img, 90.0).unwrap();
        let cols: Vec<f32> = (0..c.width).map(|u| c.get(0, u)).collect();
        // centre column 512 sits in the middle of the band
        let mid = cols.iter().position(|&u| u == 512.0).unwrap();
        assert!((mid as i64 - c.width as i64 / 2).abs() <= 1);
        for u in &cols {
            let az = cfg.column_azimuth(*u as usize).to_degrees();
            assert!(az.abs() <= 45.0 + 1e-9, "column {u} at azimuth {az}");
        }
        // nested crop of an already cropped image keeps the forward column
        let c2 = crop_fov(&c, 45.0).unwrap();
        assert!((c2.width as i64 - 128).abs() <= 1, "{}", c2.width);
        assert!((0..c2.width).any(|u| c2.get(0, u) == 512.0));
    }

    #[test]
    fn normalization() {
        let cfg = full_cfg();
        let mut img = RangeImage::empty(&ProjectionConfig {
            range_max_for_normalization: Some(50.0),
            ..cfg.clone()
        });
        img.data.iter_mut().for_each(|v| *v = 25.0);
        let g = normalize_for_encoder(&img, img.height, img.width).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.5));
        img.data[0] = 80.0;
        img.data[1] = 0.0;
        let g = normalize_for_encoder(&img, img.height, img.width).unwrap();
        assert_eq!(g.data[0], 1.0);
        assert_eq!(g.data[1], 0.0);
        let small = normalize_for_encoder(&img, 16, 32).unwrap();
        assert_eq!(small.data.len(), 16 * 32);
        assert_eq!(small.data[0], 1.0);
    }

    #[test]
    fn range_max_defaults() {
        assert_eq!(ProjectionConfig::default().range_max(), 50.0);
        assert_eq!(full_cfg().range_max(), DEFAULT_RANGE_MAX);
        let explicit = ProjectionConfig {
            range_max_for_normalization: Some(30.0),
            ..ProjectionConfig::default()
        };
        assert_eq!(explicit.range_max(), 30.0);
    }

    #[test]
    fn config_validation() {
        let bad = [
            ProjectionConfig { width: 1, ..ProjectionConfig::default() },
            ProjectionConfig { height: 0, ..ProjectionConfig::default() },
            ProjectionConfig { elevation_min: 5.0, ..ProjectionConfig::default() },
            ProjectionConfig { fov_horizontal: 400.0, ..ProjectionConfig::default() },
            ProjectionConfig { distance_threshold: Some(0.0), ..ProjectionConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn rimg_round_trip() {
        let cfg = ProjectionConfig { height: 3, width: 4, ..full_cfg() };
        let mut img = RangeImage::empty(&cfg);
        img.data[5] = 12.25;
        img.data[11] = 0.1;
        let bytes = img.to_bytes();
        assert_eq!(&bytes[..4], b"RIMG");
        assert_eq!(bytes.len(), 12 + 12 * 4);
        let back = RangeImage::from_reader(&mut bytes.as_slice(), &cfg).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_bytes(), bytes);
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        proptest::collection::vec(
            (-80.0..80.0f32, -80.0..80.0f32, -10.0..3.0f32),
            0..200,
        )
        .prop_map(|v| PointCloud::new(v.into_iter().map(|(x, y, z)| Point::new(x, y, z, 0.0)).collect()))
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(cloud in arb_cloud(), t in 1.0..100.0f64) {
            let once = filter_by_distance(&cloud, t);
            prop_assert_eq!(filter_by_distance(&once, t), once);
        }

        #[test]
        fn thresholded_projection_bounded(cloud in arb_cloud(), t in 1.0..100.0f64) {
            let cfg = ProjectionConfig { distance_threshold: Some(t), ..full_cfg() };
            let img = project(&cloud, &cfg).unwrap();
            prop_assert!(img.max_range() as f64 <= t);
            let img2 = project(&filter_by_distance(&cloud, t), &full_cfg()).unwrap();
            prop_assert!(img2.max_range() as f64 <= t);
            prop_assert_eq!(img.data, img2.data);
        }

        #[test]
        fn projection_ignores_point_order(cloud in arb_cloud(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = cloud.clone();
            shuffled.points.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let cfg = ProjectionConfig { height: 16, width: 64, ..full_cfg() };
            prop_assert_eq!(project(&cloud, &cfg).unwrap().data, project(&shuffled, &cfg).unwrap().data);
        }
    }
}
