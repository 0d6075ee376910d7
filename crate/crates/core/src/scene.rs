//! Synthetic urban scenes.
//!
//! Coordinate frame: the base station sits at `(0, 0, bs_height)` on the
//! short edge of its coverage area, which spans `[0, area_x] x
//! [-area_y/2, +area_y/2]` on the ground plane. Receivers sit at the
//! centroids of a `grid_nx x grid_ny` partition of that rectangle and are
//! indexed row-major (`i` along x, then `j` along y).
//!
//! Vehicles are axis-aligned boxes resting on the ground with
//! piecewise-constant velocity. Reflector facades are vertical rectangles
//! just outside the coverage area.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, tag};

/// Current version of the scene JSON document.
pub const SCENE_SCHEMA: u32 = 1;

/// Blockers at least this tall are tagged as buses.
pub const BUS_MIN_HEIGHT_M: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleProfile {
    pub length_m: [f64; 2],
    pub width_m: [f64; 2],
    pub height_m: [f64; 2],
    pub speed_mps: [f64; 2],
    /// Probability that a vehicle drives along x rather than y.
    pub along_x_prob: f64,
}

impl Default for VehicleProfile {
    fn default() -> Self {
        VehicleProfile {
            length_m: [3.8, 5.2],
            width_m: [1.7, 2.0],
            height_m: [1.4, 1.7],
            speed_mps: [3.0, 12.0],
            along_x_prob: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Traffic seed: vehicle placement, sizes and headings.
    pub seed: u64,
    /// Static-site seed: facades. Kept apart from `seed` so the static
    /// layout of one base station survives traffic re-draws.
    pub site_seed: u64,
    pub area_x_m: f64,
    pub area_y_m: f64,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub bs_height_m: f64,
    pub rx_height_m: f64,
    pub n_vehicles: usize,
    pub vehicles: VehicleProfile,
    pub n_reflector_facades: usize,
    pub facade_height_m: [f64; 2],
    pub carrier_ghz: f64,
    pub ptx_dbm: f64,
    pub gtx_db: f64,
    pub grx_db: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            site_seed: 0,
            area_x_m: 80.0,
            area_y_m: 40.0,
            grid_nx: 8,
            grid_ny: 8,
            bs_height_m: 5.5,
            rx_height_m: 1.5,
            n_vehicles: 10,
            vehicles: VehicleProfile::default(),
            n_reflector_facades: 2,
            facade_height_m: [8.0, 20.0],
            carrier_ghz: 28.0,
            ptx_dbm: 25.0,
            gtx_db: 10.0,
            grx_db: 10.0,
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and > 0, got {v}")))
    }
}

fn check_range(name: &str, r: [f64; 2], allow_zero: bool) -> Result<()> {
    let lower_ok = if allow_zero { r[0] >= 0.0 } else { r[0] > 0.0 };
    if r[0].is_finite() && r[1].is_finite() && lower_ok && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be an ordered positive range, got {r:?}")))
    }
}

impl SceneConfig {
    pub fn n_receivers(&self) -> usize {
        self.grid_nx * self.grid_ny
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("area_x_m", self.area_x_m)?;
        check_positive("area_y_m", self.area_y_m)?;
        check_positive("bs_height_m", self.bs_height_m)?;
        check_positive("rx_height_m", self.rx_height_m)?;
        check_positive("carrier_ghz", self.carrier_ghz)?;
        if self.grid_nx == 0 || self.grid_ny == 0 {
            return Err(Error::Config("receiver grid must be at least 1x1".into()));
        }
        if self.rx_height_m >= self.bs_height_m {
            return Err(Error::Config("rx_height_m must be below bs_height_m".into()));
        }
        let v = &self.vehicles;
        check_range("vehicles.length_m", v.length_m, false)?;
        check_range("vehicles.width_m", v.width_m, false)?;
        check_range("vehicles.height_m", v.height_m, false)?;
        check_range("vehicles.speed_mps", v.speed_mps, true)?;
        check_range("facade_height_m", self.facade_height_m, false)?;
        if !(0.0..=1.0).contains(&v.along_x_prob) {
            return Err(Error::Config("vehicles.along_x_prob must lie in [0, 1]".into()));
        }
        if v.height_m[1] >= self.bs_height_m {
            return Err(Error::Config("vehicles must be lower than the base station".into()));
        }
        if v.length_m[1] >= self.area_x_m.min(self.area_y_m) {
            return Err(Error::Config("vehicle length exceeds the coverage area".into()));
        }
        for (name, x) in [("ptx_dbm", self.ptx_dbm), ("gtx_db", self.gtx_db), ("grx_db", self.grx_db)] {
            if !x.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockerTag {
    Vehicle,
    Bus,
}

impl BlockerTag {
    pub fn for_height(h: f64) -> Self {
        if h >= BUS_MIN_HEIGHT_M {
            BlockerTag::Bus
        } else {
            BlockerTag::Vehicle
        }
    }
}

/// Axis-aligned box resting on the ground.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blocker {
    pub center: [f64; 3],
    /// Full edge lengths along x, y, z.
    pub size: [f64; 3],
    /// Ground-plane velocity in m/s.
    pub velocity: [f64; 2],
    pub tag: BlockerTag,
}

impl Blocker {
    pub fn new(center_xy: [f64; 2], size: [f64; 3], velocity: [f64; 2]) -> Self {
        Blocker {
            center: [center_xy[0], center_xy[1], size[2] / 2.0],
            size,
            velocity,
            tag: BlockerTag::for_height(size[2]),
        }
    }

    pub fn min_corner(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] - self.size[k] / 2.0)
    }

    pub fn max_corner(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] + self.size[k] / 2.0)
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.min_corner(), self.max_corner());
        (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k])
    }
}

/// Vertical reflecting rectangle standing on the segment `start -> end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Facade {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub height_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub area_x_m: f64,
    pub area_y_m: f64,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub bs_pos: [f64; 3],
    pub rx_height_m: f64,
    pub receivers: Vec<[f64; 3]>,
    pub blockers: Vec<Blocker>,
    pub facades: Vec<Facade>,
    pub speed_limit_mps: f64,
}

#[derive(Serialize)]
struct SceneDocRef<'a> {
    schema: u32,
    scene: &'a Scene,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    schema: u32,
    scene: Scene,
}

/// Centroid of grid cell `(i, j)` measured from the area's lower corner
/// `(0, -area_y/2)`.
pub fn cell_centroid_local(area_x_m: f64, area_y_m: f64, nx: usize, ny: usize, i: usize, j: usize) -> [f64; 2] {
    let dx = area_x_m / nx as f64;
    let dy = area_y_m / ny as f64;
    [(i as f64 + 0.5) * dx, (j as f64 + 0.5) * dy]
}

fn receiver_grid(area_x_m: f64, area_y_m: f64, nx: usize, ny: usize, rx_h: f64) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let [x, y] = cell_centroid_local(area_x_m, area_y_m, nx, ny, i, j);
            out.push([x, y - area_y_m / 2.0, rx_h]);
        }
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn random_vehicle(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Blocker {
    let v = &cfg.vehicles;
    let length = uniform(rng, v.length_m);
    let width = uniform(rng, v.width_m);
    let height = uniform(rng, v.height_m);
    let speed = uniform(rng, v.speed_mps);
    let along_x = rng.random::<f64>() < v.along_x_prob;
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let (fx, fy, vel) = if along_x {
        (length, width, [sign * speed, 0.0])
    } else {
        (width, length, [0.0, sign * speed])
    };
    let half_y = cfg.area_y_m / 2.0;
    let cx = uniform(rng, [fx / 2.0, cfg.area_x_m - fx / 2.0]);
    let cy = uniform(rng, [-half_y + fy / 2.0, half_y - fy / 2.0]);
    Blocker::new([cx, cy], [fx, fy, height], vel)
}

fn site_facades(cfg: &SceneConfig) -> Vec<Facade> {
    let mut rng = seed::rng(cfg.site_seed, &[tag::FACADE]);
    let half_y = cfg.area_y_m / 2.0;
    (0..cfg.n_reflector_facades)
        .map(|k| {
            let offset = rng.random_range(1.0..4.0);
            let height_m = uniform(&mut rng, cfg.facade_height_m);
            if k < 2 {
                // Street-canyon walls along the long edges.
                let side = if k % 2 == 0 { 1.0 } else { -1.0 };
                let y = side * (half_y + offset);
                let x0 = rng.random_range(0.0..0.4) * cfg.area_x_m;
                let x1 = (x0 + rng.random_range(0.4..0.6) * cfg.area_x_m).min(cfg.area_x_m);
                Facade { start: [x0, y], end: [x1, y], height_m }
            } else {
                // Further walls close the far end of the street.
                let x = cfg.area_x_m + offset;
                let y0 = rng.random_range(-1.0..0.0) * half_y;
                let y1 = rng.random_range(0.0..1.0) * half_y;
                Facade { start: [x, y0], end: [x, y1], height_m }
            }
        })
        .collect()
}

/// Builds the scene for `cfg`. Pure function of the config.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, &[tag::SCENE]);
    let blockers = (0..cfg.n_vehicles).map(|_| random_vehicle(&mut rng, cfg)).collect();
    Ok(Scene {
        area_x_m: cfg.area_x_m,
        area_y_m: cfg.area_y_m,
        grid_nx: cfg.grid_nx,
        grid_ny: cfg.grid_ny,
        bs_pos: [0.0, 0.0, cfg.bs_height_m],
        rx_height_m: cfg.rx_height_m,
        receivers: receiver_grid(cfg.area_x_m, cfg.area_y_m, cfg.grid_nx, cfg.grid_ny, cfg.rx_height_m),
        blockers,
        facades: site_facades(cfg),
        speed_limit_mps: cfg.vehicles.speed_mps[1],
    })
}

/// Moves every blocker by `velocity * dt_s`. Blockers that would leave the
/// area are clamped to the boundary, turned around, and given a fresh speed
/// drawn from `seed`.
pub fn advance_frame(scene: &Scene, dt_s: f64, seed: u64) -> Scene {
    let mut next = scene.clone();
    if dt_s <= 0.0 {
        return next;
    }
    let limit = scene.speed_limit_mps;
    let bounds = [
        [0.0, scene.area_x_m],
        [-scene.area_y_m / 2.0, scene.area_y_m / 2.0],
    ];
    for (k, b) in next.blockers.iter_mut().enumerate() {
        let speed = b.speed();
        if speed > limit && speed > 0.0 {
            let s = limit / speed;
            b.velocity = [b.velocity[0] * s, b.velocity[1] * s];
        }
        for axis in 0..2 {
            let half = b.size[axis] / 2.0;
            let (lo, hi) = (bounds[axis][0] + half, bounds[axis][1] - half);
            let moved = b.center[axis] + b.velocity[axis] * dt_s;
            if moved < lo || moved > hi {
                b.center[axis] = moved.clamp(lo, hi);
                if b.velocity[axis] != 0.0 {
                    let mut rng = seed::rng(seed, &[tag::MOTION, k as u64, axis as u64]);
                    let fresh = limit * rng.random_range(0.5..=1.0);
                    b.velocity[axis] = -b.velocity[axis].signum() * fresh;
                    let s = b.speed();
                    if s > limit {
                        let f = limit / s;
                        b.velocity = [b.velocity[0] * f, b.velocity[1] * f];
                    }
                }
            } else {
                b.center[axis] = moved;
            }
        }
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    ConceptBlockage,
    ConceptRxHeight,
    CovariateNoise,
    CovariateBrightness,
}

impl ShiftKind {
    pub fn is_concept(self) -> bool {
        matches!(self, ShiftKind::ConceptBlockage | ShiftKind::ConceptRxHeight)
    }

    pub fn is_covariate(self) -> bool {
        matches!(self, ShiftKind::CovariateNoise | ShiftKind::CovariateBrightness)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum BlockerEdit {
    Add {
        center: [f64; 2],
        size: [f64; 3],
        #[serde(default)]
        velocity: [f64; 2],
    },
    Resize {
        index: usize,
        size: [f64; 3],
    },
    Move {
        index: usize,
        center: [f64; 2],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseStd {
    pub radar: f64,
    pub gps: f64,
    pub lidar: f64,
}

/// A domain shift. Concept kinds carry geometry edits (`blocker_edits`,
/// `rx_height_m`); covariate kinds carry sensor parameters (`noise_std`,
/// `brightness_scale`). Each side ignores the other's fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShiftSpec {
    pub kind: ShiftKind,
    pub blocker_edits: Vec<BlockerEdit>,
    pub rx_height_m: Option<f64>,
    pub noise_std: NoiseStd,
    pub brightness_scale: f64,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        DomainShiftSpec {
            kind: ShiftKind::None,
            blocker_edits: Vec::new(),
            rx_height_m: None,
            noise_std: NoiseStd::default(),
            brightness_scale: 1.0,
        }
    }
}

impl DomainShiftSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn blockage(edits: Vec<BlockerEdit>) -> Self {
        DomainShiftSpec {
            kind: ShiftKind::ConceptBlockage,
            blocker_edits: edits,
            ..Self::default()
        }
    }

    pub fn rx_height(h: f64) -> Self {
        DomainShiftSpec {
            kind: ShiftKind::ConceptRxHeight,
            rx_height_m: Some(h),
            ..Self::default()
        }
    }

    pub fn covariate(noise_std: NoiseStd, brightness_scale: f64) -> Self {
        DomainShiftSpec {
            kind: ShiftKind::CovariateNoise,
            noise_std,
            brightness_scale,
            ..Self::default()
        }
    }

    /// Sensor degradation used for the second validation split: radar,
    /// GPS and LiDAR noise with standard deviations 1, 0.5 and 0.25 and a
    /// 25 % darker camera.
    pub fn sensor_degradation() -> Self {
        Self::covariate(NoiseStd { radar: 1.0, gps: 0.5, lidar: 0.25 }, 0.75)
    }
}

/// Applies the geometry part of a concept shift. The input scene is left
/// untouched.
pub fn apply_concept_shift(scene: &Scene, spec: &DomainShiftSpec) -> Result<Scene> {
    if spec.kind.is_covariate() {
        return Err(Error::Usage(format!(
            "{:?} is a covariate shift; apply it to features instead",
            spec.kind
        )));
    }
    let mut out = scene.clone();
    if spec.kind == ShiftKind::None {
        return Ok(out);
    }
    for edit in &spec.blocker_edits {
        match *edit {
            BlockerEdit::Add { center, size, velocity } => {
                if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::Config(format!("blocker size must be positive, got {size:?}")));
                }
                let b = Blocker::new(center, size, velocity);
                if b.contains(out.bs_pos) {
                    return Err(Error::Config("added blocker would contain the base station".into()));
                }
                out.blockers.push(b);
            }
            BlockerEdit::Resize { index, size } => {
                let n = out.blockers.len();
                let b = out
                    .blockers
                    .get_mut(index)
                    .ok_or_else(|| Error::Usage(format!("blocker index {index} out of range ({n})")))?;
                *b = Blocker::new([b.center[0], b.center[1]], size, b.velocity);
            }
            BlockerEdit::Move { index, center } => {
                let n = out.blockers.len();
                let b = out
                    .blockers
                    .get_mut(index)
                    .ok_or_else(|| Error::Usage(format!("blocker index {index} out of range ({n})")))?;
                b.center[0] = center[0];
                b.center[1] = center[1];
            }
        }
    }
    if let Some(h) = spec.rx_height_m {
        if !(h.is_finite() && h > 0.0 && h < out.bs_pos[2]) {
            return Err(Error::Config(format!("receiver height {h} outside (0, bs height)")));
        }
        out.rx_height_m = h;
        for r in &mut out.receivers {
            r[2] = h;
        }
    }
    if out.blockers.iter().any(|b| b.contains(out.bs_pos)) {
        return Err(Error::Config("a blocker contains the base station".into()));
    }
    Ok(out)
}

impl Scene {
    pub fn n_receivers(&self) -> usize {
        self.receivers.len()
    }

    pub fn receiver_index(&self, i: usize, j: usize) -> usize {
        i * self.grid_ny + j
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SceneDocRef { schema: SCENE_SCHEMA, scene: self })?)
    }

    pub fn from_json(text: &str) -> Result<Scene> {
        let doc: SceneDoc = serde_json::from_str(text)?;
        if doc.schema != SCENE_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported scene schema {} (expected {SCENE_SCHEMA})",
                doc.schema
            )));
        }
        Ok(doc.scene)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneConfig {
        SceneConfig { seed: 7, ..SceneConfig::default() }
    }

    #[test]
    fn empty_traffic_gives_full_grid() {
        let s = generate_scene(&SceneConfig { n_vehicles: 0, ..cfg() }).unwrap();
        assert!(s.blockers.is_empty());
        assert_eq!(s.receivers.len(), 64);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&cfg()).unwrap();
        let b = generate_scene(&cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.blockers.len(), cfg().n_vehicles);
        let other = generate_scene(&SceneConfig { seed: 8, ..cfg() }).unwrap();
        assert_ne!(a.blockers, other.blockers);
        assert_eq!(a.facades, other.facades, "facades depend on the site seed only");
    }

    #[test]
    fn cell_centroids() {
        // 80 x 40 m split 8 x 8: cells are 10 x 5 m.
        assert_eq!(cell_centroid_local(80.0, 40.0, 8, 8, 0, 0), [5.0, 2.5]);
        let s = generate_scene(&cfg()).unwrap();
        assert_eq!(s.receivers[0], [5.0, -17.5, 1.5]);
        assert_eq!(s.receivers[s.receiver_index(7, 7)], [75.0, 17.5, 1.5]);
        assert_eq!(s.receivers[s.receiver_index(2, 5)], [25.0, 7.5, 1.5]);
        for r in &s.receivers {
            assert!(r[0] > 0.0 && r[0] < 80.0 && r[1].abs() < 20.0);
        }
    }

    #[test]
    fn vehicles_stay_inside_and_clear_of_bs() {
        for seed in 0..50 {
            let s = generate_scene(&SceneConfig { seed, n_vehicles: 20, ..cfg() }).unwrap();
            for b in &s.blockers {
                let (lo, hi) = (b.min_corner(), b.max_corner());
                assert!(lo[0] >= 0.0 && hi[0] <= 80.0 && lo[1] >= -20.0 && hi[1] <= 20.0);
                assert!(!b.contains(s.bs_pos));
                assert_eq!(lo[2], 0.0);
            }
        }
    }

    #[test]
    fn invalid_dimensions_rejected() {
        for bad in [
            SceneConfig { area_x_m: 0.0, ..cfg() },
            SceneConfig { grid_nx: 0, ..cfg() },
            SceneConfig { rx_height_m: -1.0, ..cfg() },
            SceneConfig { rx_height_m: 6.0, ..cfg() },
            SceneConfig { carrier_ghz: f64::NAN, ..cfg() },
        ] {
            assert!(matches!(generate_scene(&bad), Err(Error::Config(_))));
        }
    }

    fn one_vehicle(center: [f64; 2], velocity: [f64; 2]) -> Scene {
        let mut s = generate_scene(&SceneConfig { n_vehicles: 0, ..cfg() }).unwrap();
        s.blockers.push(Blocker::new(center, [4.0, 2.0, 1.5], velocity));
        s
    }

    #[test]
    fn zero_step_is_identity() {
        let s = generate_scene(&cfg()).unwrap();
        assert_eq!(advance_frame(&s, 0.0, 3), s);
    }

    #[test]
    fn constant_velocity_kinematics() {
        let s = one_vehicle([30.0, 0.0], [10.0, 0.0]);
        let n = advance_frame(&s, 0.3, 1);
        assert!((n.blockers[0].center[0] - 33.0).abs() < 1e-12);
        assert_eq!(n.blockers[0].center[1], 0.0);
    }

    #[test]
    fn boundary_clamps_and_turns() {
        let s = one_vehicle([77.5, 0.0], [10.0, 0.0]);
        let n = advance_frame(&s, 0.3, 1);
        let b = &n.blockers[0];
        assert_eq!(b.center[0], 78.0);
        assert!(b.velocity[0] < 0.0);
        assert!(b.speed() <= s.speed_limit_mps + 1e-12);
        // Repeated steps never leave the area.
        let mut cur = s;
        for k in 0..200 {
            cur = advance_frame(&cur, 0.3, k);
            let (lo, hi) = (cur.blockers[0].min_corner(), cur.blockers[0].max_corner());
            assert!(lo[0] >= 0.0 && hi[0] <= 80.0);
        }
    }

    #[test]
    fn rx_height_shift() {
        let s = generate_scene(&cfg()).unwrap();
        let shifted = apply_concept_shift(&s, &DomainShiftSpec::rx_height(1.8)).unwrap();
        assert!(shifted.receivers.iter().all(|r| r[2] == 1.8));
        assert!(s.receivers.iter().all(|r| r[2] == 1.5), "original untouched");
        assert_eq!(shifted.blockers, s.blockers);
    }

    #[test]
    fn adding_a_bus() {
        let s = generate_scene(&cfg()).unwrap();
        let spec = DomainShiftSpec::blockage(vec![BlockerEdit::Add {
            center: [40.0, 5.0],
            size: [12.0, 3.0, 3.5],
            velocity: [0.0, 0.0],
        }]);
        let shifted = apply_concept_shift(&s, &spec).unwrap();
        assert_eq!(shifted.blockers.len(), s.blockers.len() + 1);
        assert_eq!(shifted.blockers.last().unwrap().tag, BlockerTag::Bus);
        assert_eq!(shifted.receivers, s.receivers);
    }

    #[test]
    fn empty_edit_list_is_identity() {
        let s = generate_scene(&cfg()).unwrap();
        assert_eq!(apply_concept_shift(&s, &DomainShiftSpec::blockage(vec![])).unwrap(), s);
        assert_eq!(apply_concept_shift(&s, &DomainShiftSpec::none()).unwrap(), s);
    }

    #[test]
    fn covariate_spec_rejected() {
        let s = generate_scene(&cfg()).unwrap();
        let err = apply_concept_shift(&s, &DomainShiftSpec::sensor_degradation()).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn resize_and_move() {
        let s = one_vehicle([30.0, 0.0], [0.0, 0.0]);
        let spec = DomainShiftSpec::blockage(vec![
            BlockerEdit::Resize { index: 0, size: [12.0, 3.0, 3.5] },
            BlockerEdit::Move { index: 0, center: [50.0, -4.0] },
        ]);
        let out = apply_concept_shift(&s, &spec).unwrap();
        assert_eq!(out.blockers[0].center, [50.0, -4.0, 1.75]);
        assert_eq!(out.blockers[0].tag, BlockerTag::Bus);
        let bad = DomainShiftSpec::blockage(vec![BlockerEdit::Move { index: 3, center: [1.0, 1.0] }]);
        assert!(matches!(apply_concept_shift(&s, &bad), Err(Error::Usage(_))));
    }

    #[test]
    fn json_roundtrip_is_versioned() {
        let s = generate_scene(&cfg()).unwrap();
        let text = s.to_json().unwrap();
        assert!(text.contains("\"schema\": 1"));
        assert_eq!(Scene::from_json(&text).unwrap(), s);
        let wrong = text.replace("\"schema\": 1", "\"schema\": 9");
        assert!(Scene::from_json(&wrong).is_err());
    }
}
