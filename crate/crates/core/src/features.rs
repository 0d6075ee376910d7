//! Multi-modal feature blocks.
//!
//! Stand-ins for the sensors a base station carries:
//! - LiDAR: bird's-eye-view occupancy grid (`G x G`, binary)
//! - radar: `P` detections `[x, y, speed, height]`, picked by farthest-point
//!   sampling seeded at the tallest object
//! - GPS: `V` vehicle reports `[x, y, speed]`, zero padded
//! - camera: `G x G` silhouette image, cell value `min(1, height / h_ref)`
//!   times a global brightness
//!
//! Flattened order: BEV row-major, radar rows, GPS rows, camera row-major.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Blocker, DomainShiftSpec, Scene, ShiftKind};
use crate::seed::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub bev_size: usize,
    pub radar_points: usize,
    pub gps_slots: usize,
    /// Height mapped to full camera intensity.
    pub camera_height_ref_m: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { bev_size: 16, radar_points: 8, gps_slots: 16, camera_height_ref_m: 4.0 }
    }
}

impl FeatureConfig {
    pub fn flat_len(&self) -> usize {
        2 * self.bev_size * self.bev_size + 4 * self.radar_points + 3 * self.gps_slots
    }

    pub fn validate(&self) -> Result<()> {
        if self.bev_size == 0 || self.radar_points == 0 || self.gps_slots == 0 {
            return Err(Error::Config("feature shapes must be non-empty".into()));
        }
        if !(self.camera_height_ref_m > 0.0) {
            return Err(Error::Config("camera_height_ref_m must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub bev_size: usize,
    pub occupancy_bev: Vec<f64>,
    pub points: Vec<[f64; 4]>,
    pub n_points: usize,
    pub gps: Vec<[f64; 3]>,
    pub n_gps: usize,
    pub brightness: Vec<f64>,
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> bool {
    a0.max(b0) < a1.min(b1)
}

fn range_from_bs(scene: &Scene, b: &Blocker) -> f64 {
    (b.center[0] - scene.bs_pos[0]).hypot(b.center[1] - scene.bs_pos[1])
}

/// Farthest-point subsample of ground-plane points, seeded at the tallest.
/// Returns indices in selection order.
pub fn farthest_point_sample(blockers: &[Blocker], k: usize) -> Vec<usize> {
    if blockers.len() <= k {
        return (0..blockers.len()).collect();
    }
    let mut first = 0;
    for (i, b) in blockers.iter().enumerate() {
        if b.height() > blockers[first].height() {
            first = i;
        }
    }
    let d2 = |a: &Blocker, b: &Blocker| (a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2);
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = blockers.iter().map(|b| d2(b, &blockers[first])).collect();
    while chosen.len() < k {
        let mut best = usize::MAX;
        for (i, &d) in nearest.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            if best == usize::MAX || d > nearest[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, b) in blockers.iter().enumerate() {
            nearest[i] = nearest[i].min(d2(b, &blockers[best]));
        }
    }
    chosen
}

fn by_range(scene: &Scene, mut idx: Vec<usize>) -> Vec<usize> {
    idx.sort_by(|&a, &b| {
        range_from_bs(scene, &scene.blockers[a])
            .total_cmp(&range_from_bs(scene, &scene.blockers[b]))
            .then(a.cmp(&b))
    });
    idx
}

pub fn extract_features(scene: &Scene, cfg: &FeatureConfig) -> FeatureBlock {
    let g = cfg.bev_size;
    let (cx, cy) = (scene.area_x_m / g as f64, scene.area_y_m / g as f64);
    let y0 = -scene.area_y_m / 2.0;
    let mut occ = vec![0.0; g * g];
    let mut cam = vec![0.0; g * g];
    for b in &scene.blockers {
        let (lo, hi) = (b.min_corner(), b.max_corner());
        let level = (b.height() / cfg.camera_height_ref_m).min(1.0);
        for u in 0..g {
            let (x0, x1) = (u as f64 * cx, (u + 1) as f64 * cx);
            if !overlap(lo[0], hi[0], x0, x1) {
                continue;
            }
            for v in 0..g {
                let (ya, yb) = (y0 + v as f64 * cy, y0 + (v + 1) as f64 * cy);
                if overlap(lo[1], hi[1], ya, yb) {
                    occ[u * g + v] = 1.0;
                    cam[u * g + v] = f64::max(cam[u * g + v], level);
                }
            }
        }
    }

    let radar_idx = by_range(scene, farthest_point_sample(&scene.blockers, cfg.radar_points));
    let mut points = vec![[0.0; 4]; cfg.radar_points];
    for (row, &i) in radar_idx.iter().enumerate() {
        let b = &scene.blockers[i];
        points[row] = [b.center[0], b.center[1], b.speed(), b.height()];
    }

    let mut gps_idx = by_range(scene, (0..scene.blockers.len()).collect());
    gps_idx.truncate(cfg.gps_slots);
    let mut gps = vec![[0.0; 3]; cfg.gps_slots];
    for (row, &i) in gps_idx.iter().enumerate() {
        let b = &scene.blockers[i];
        gps[row] = [b.center[0], b.center[1], b.speed()];
    }

    FeatureBlock {
        bev_size: g,
        occupancy_bev: occ,
        points,
        n_points: radar_idx.len(),
        gps,
        n_gps: gps_idx.len(),
        brightness: cam,
    }
}

/// Zero-mean Gaussian draws for one modality's noise stream.
pub fn modality_noise(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("non-negative std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

const LIDAR: u64 = 0;
const RADAR: u64 = 1;
const GPS: u64 = 2;

/// Applies sensor noise and brightness scaling. Padding rows stay zero and
/// LiDAR occupancy is re-thresholded at 0.5.
pub fn apply_covariate_shift(fb: &FeatureBlock, spec: &DomainShiftSpec, seed: u64) -> Result<FeatureBlock> {
    if spec.kind.is_concept() {
        return Err(Error::Usage(format!(
            "{:?} is a concept shift; apply it to the scene instead",
            spec.kind
        )));
    }
    let mut out = fb.clone();
    if spec.kind == ShiftKind::None {
        return Ok(out);
    }
    let s = spec.noise_std;
    for (name, v) in [("radar", s.radar), ("gps", s.gps), ("lidar", s.lidar), ("brightness", spec.brightness_scale)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Config(format!("{name} parameter must be >= 0, got {v}")));
        }
    }
    if s.lidar > 0.0 {
        let mut rng = seed::rng(seed, &[tag::NOISE, LIDAR]);
        let noise = modality_noise(&mut rng, out.occupancy_bev.len(), s.lidar);
        for (c, e) in out.occupancy_bev.iter_mut().zip(noise) {
            *c = if *c + e >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    let mut rng = seed::rng(seed, &[tag::NOISE, RADAR]);
    let noise = modality_noise(&mut rng, 4 * out.n_points, s.radar);
    for (row, e) in out.points[..out.n_points].iter_mut().zip(noise.chunks(4)) {
        for k in 0..4 {
            row[k] += e[k];
        }
    }
    let mut rng = seed::rng(seed, &[tag::NOISE, GPS]);
    let noise = modality_noise(&mut rng, 3 * out.n_gps, s.gps);
    for (row, e) in out.gps[..out.n_gps].iter_mut().zip(noise.chunks(3)) {
        for k in 0..3 {
            row[k] += e[k];
        }
    }
    for c in &mut out.brightness {
        *c = (*c * spec.brightness_scale).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Scales mapping physical feature units onto roughly unit range for the
/// network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub x_m: f64,
    pub y_m: f64,
    pub speed_mps: f64,
    pub height_m: f64,
}

impl FeatureNorm {
    pub fn for_area(area_x_m: f64, area_y_m: f64) -> Self {
        FeatureNorm { x_m: area_x_m, y_m: area_y_m / 2.0, speed_mps: 10.0, height_m: 4.0 }
    }
}

impl FeatureBlock {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.occupancy_bev.len() + 4 * self.points.len() + 3 * self.gps.len());
        v.extend_from_slice(&self.occupancy_bev);
        self.points.iter().for_each(|r| v.extend_from_slice(r));
        self.gps.iter().for_each(|r| v.extend_from_slice(r));
        v.extend_from_slice(&self.brightness);
        v
    }

    pub fn from_flat(cfg: &FeatureConfig, flat: &[f64]) -> Result<FeatureBlock> {
        if flat.len() != cfg.flat_len() {
            return Err(Error::Contract(format!(
                "feature vector has {} values, expected {}",
                flat.len(),
                cfg.flat_len()
            )));
        }
        let g2 = cfg.bev_size * cfg.bev_size;
        let (bev, rest) = flat.split_at(g2);
        let (pts, rest) = rest.split_at(4 * cfg.radar_points);
        let (gps, cam) = rest.split_at(3 * cfg.gps_slots);
        let points: Vec<[f64; 4]> = pts.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let gps: Vec<[f64; 3]> = gps.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let n_points = points.iter().take_while(|r| r.iter().any(|&x| x != 0.0)).count();
        let n_gps = gps.iter().take_while(|r| r.iter().any(|&x| x != 0.0)).count();
        Ok(FeatureBlock {
            bev_size: cfg.bev_size,
            occupancy_bev: bev.to_vec(),
            points,
            n_points,
            gps,
            n_gps,
            brightness: cam.to_vec(),
        })
    }

    /// Flattened network input in the documented order, with positions,
    /// speeds and heights divided by `norm`.
    pub fn network_input(&self, norm: &FeatureNorm) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.occupancy_bev.len() + 4 * self.points.len() + 3 * self.gps.len());
        v.extend_from_slice(&self.occupancy_bev);
        for r in &self.points {
            v.extend_from_slice(&[r[0] / norm.x_m, r[1] / norm.y_m, r[2] / norm.speed_mps, r[3] / norm.height_m]);
        }
        for r in &self.gps {
            v.extend_from_slice(&[r[0] / norm.x_m, r[1] / norm.y_m, r[2] / norm.speed_mps]);
        }
        v.extend_from_slice(&self.brightness);
        v
    }
}
