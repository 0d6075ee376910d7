//! Ground-truth RSS oracle.
//!
//! Direct paths follow the 3GPP UMi LoS path-loss law with a shadowing term
//! frozen per `(shadow_seed, receiver)`. LoS receivers add first-order
//! facade reflections (image method) in the power domain. NLoS receivers are
//! the LoS level minus a parametric blockage attenuation.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Blocker, Facade, Scene, SceneConfig};
use crate::seed::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossParams {
    pub fc_ghz: f64,
    pub shadow_sigma_db: f64,
    pub shadow_seed: u64,
}

impl PathLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.fc_ghz.is_finite() && self.fc_ghz > 0.0) {
            return Err(Error::Config(format!("fc_ghz must be > 0, got {}", self.fc_ghz)));
        }
        if !(self.shadow_sigma_db.is_finite() && self.shadow_sigma_db >= 0.0) {
            return Err(Error::Config(format!(
                "shadow_sigma_db must be >= 0, got {}",
                self.shadow_sigma_db
            )));
        }
        Ok(())
    }
}

/// Parametric stand-in for blockage loss:
/// `min(cap_db, per_blocker_db * n + per_meter_db * chord)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockageParams {
    pub per_blocker_db: f64,
    pub per_meter_db: f64,
    pub cap_db: f64,
}

impl Default for BlockageParams {
    fn default() -> Self {
        BlockageParams { per_blocker_db: 20.0, per_meter_db: 0.4, cap_db: 45.0 }
    }
}

impl BlockageParams {
    pub fn attenuation_db(&self, n_blockers: usize, chord_m: f64) -> f64 {
        if n_blockers == 0 {
            return 0.0;
        }
        (self.per_blocker_db * n_blockers as f64 + self.per_meter_db * chord_m).min(self.cap_db)
    }
}

/// The `channel` section of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub shadow_sigma_db: f64,
    pub blockage: BlockageParams,
    pub reflection_loss_db: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            shadow_sigma_db: 4.0,
            blockage: BlockageParams::default(),
            reflection_loss_db: 6.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.blockage;
        let vals = [self.shadow_sigma_db, self.reflection_loss_db, b.per_blocker_db, b.per_meter_db, b.cap_db];
        if vals.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("channel parameters must be finite and >= 0".into()))
        }
    }
}

/// Everything [`compute_rss_map`] needs besides the geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub path_loss: PathLossParams,
    pub blockage: BlockageParams,
    pub reflection_loss_db: f64,
    pub ptx_dbm: f64,
    pub gtx_db: f64,
    pub grx_db: f64,
}

impl ChannelParams {
    pub fn new(scene_cfg: &SceneConfig, cfg: &ChannelConfig, shadow_seed: u64) -> Self {
        ChannelParams {
            path_loss: PathLossParams {
                fc_ghz: scene_cfg.carrier_ghz,
                shadow_sigma_db: cfg.shadow_sigma_db,
                shadow_seed,
            },
            blockage: cfg.blockage.clone(),
            reflection_loss_db: cfg.reflection_loss_db,
            ptx_dbm: scene_cfg.ptx_dbm,
            gtx_db: scene_cfg.gtx_db,
            grx_db: scene_cfg.grx_db,
        }
    }

    fn link_budget_db(&self) -> f64 {
        self.ptx_dbm + self.gtx_db + self.grx_db
    }
}

/// Shadowing draw `S_f` for one receiver; fixed per `(shadow_seed, rx_index)`.
pub fn shadowing_db(p: &PathLossParams, rx_index: usize) -> f64 {
    if p.shadow_sigma_db == 0.0 {
        return 0.0;
    }
    let mut rng = seed::rng(p.shadow_seed, &[tag::SHADOW, rx_index as u64]);
    Normal::new(0.0, p.shadow_sigma_db)
        .expect("validated sigma")
        .sample(&mut rng)
}

fn median_pathloss_db(d_m: f64, fc_ghz: f64) -> f64 {
    32.4 + 17.3 * d_m.log10() + 20.0 * fc_ghz.log10()
}

/// UMi LoS path loss in dB, including the receiver's frozen shadowing.
pub fn pathloss_umi_los(d_m: f64, p: &PathLossParams, rx_index: usize) -> Result<f64> {
    if !(d_m.is_finite() && d_m > 0.0) {
        return Err(Error::Domain(format!("path length must be > 0, got {d_m}")));
    }
    p.validate()?;
    Ok(median_pathloss_db(d_m, p.fc_ghz) + shadowing_db(p, rx_index))
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d: [f64; 3] = std::array::from_fn(|k| a[k] - b[k]);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Parameter interval `[t0, t1] ⊂ [0, 1]` of the segment `p0 -> p1` that
/// lies inside the box, or `None` when they do not overlap with positive
/// length.
pub fn segment_box_interval(p0: [f64; 3], p1: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = 0.0_f64;
    let mut t1 = 1.0_f64;
    for k in 0..3 {
        let d = p1[k] - p0[k];
        if d.abs() < 1e-15 {
            if p0[k] < lo[k] || p0[k] > hi[k] {
                return None;
            }
            continue;
        }
        let a = (lo[k] - p0[k]) / d;
        let b = (hi[k] - p0[k]) / d;
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        t0 = t0.max(near);
        t1 = t1.min(far);
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LosResult {
    pub los: bool,
    /// Summed chord length of the direct segment through all blockers.
    pub blocked_length_m: f64,
    pub n_blockers: usize,
}

fn blockage_along(p0: [f64; 3], p1: [f64; 3], blockers: &[Blocker]) -> LosResult {
    let length = dist3(p0, p1);
    let mut chord = 0.0;
    let mut n = 0;
    for b in blockers {
        if let Some((t0, t1)) = segment_box_interval(p0, p1, b.min_corner(), b.max_corner()) {
            chord += (t1 - t0) * length;
            n += 1;
        }
    }
    LosResult { los: n == 0, blocked_length_m: chord, n_blockers: n }
}

/// LoS test of the BS -> receiver segment against every blocker box.
pub fn los_test(scene: &Scene, rx_index: usize) -> LosResult {
    blockage_along(scene.bs_pos, scene.receivers[rx_index], &scene.blockers)
}

/// Length of the first-order path BS -> facade -> receiver, if the specular
/// point lands on the facade.
pub fn reflection_path_length(bs: [f64; 3], rx: [f64; 3], f: &Facade) -> Option<f64> {
    let u = [f.end[0] - f.start[0], f.end[1] - f.start[1]];
    let len = u[0].hypot(u[1]);
    if len == 0.0 {
        return None;
    }
    let n = [-u[1] / len, u[0] / len];
    let side = |p: [f64; 3]| (p[0] - f.start[0]) * n[0] + (p[1] - f.start[1]) * n[1];
    let (s_bs, s_rx) = (side(bs), side(rx));
    if s_bs * s_rx <= 0.0 {
        return None;
    }
    let image = [bs[0] - 2.0 * s_bs * n[0], bs[1] - 2.0 * s_bs * n[1], bs[2]];
    let s_img = -s_bs;
    let t = s_img / (s_img - s_rx);
    let q: [f64; 3] = std::array::from_fn(|k| image[k] + t * (rx[k] - image[k]));
    let along = ((q[0] - f.start[0]) * u[0] + (q[1] - f.start[1]) * u[1]) / (len * len);
    if !(0.0..=1.0).contains(&along) || q[2] < 0.0 || q[2] > f.height_m {
        return None;
    }
    Some(dist3(image, rx))
}

/// Per-receiver ground truth. All vectors are in receiver grid order.
///
/// Invariant: `rss = r_los + r_reflection - r_blockage` with
/// `r_blockage = 0` on LoS receivers and `r_reflection = 0` on NLoS ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssMap {
    pub rss_dbm: Vec<f64>,
    pub los_mask: Vec<bool>,
    /// Direct-path level including the receiver's shadowing draw.
    pub r_los_dbm: Vec<f64>,
    /// Direct-path level from the median path-loss formula (no shadowing);
    /// this is the geometric prior handed to the predictors.
    pub r_los_prior_dbm: Vec<f64>,
    pub r_reflection_db: Vec<f64>,
    pub r_blockage_db: Vec<f64>,
}

impl RssMap {
    pub fn len(&self) -> usize {
        self.rss_dbm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rss_dbm.is_empty()
    }

    pub fn n_los(&self) -> usize {
        self.los_mask.iter().filter(|&&l| l).count()
    }
}

pub fn compute_rss_map(scene: &Scene, p: &ChannelParams) -> Result<RssMap> {
    p.path_loss.validate()?;
    let n = scene.n_receivers();
    let mut map = RssMap {
        rss_dbm: Vec::with_capacity(n),
        los_mask: Vec::with_capacity(n),
        r_los_dbm: Vec::with_capacity(n),
        r_los_prior_dbm: Vec::with_capacity(n),
        r_reflection_db: Vec::with_capacity(n),
        r_blockage_db: Vec::with_capacity(n),
    };
    let budget = p.link_budget_db();
    let fc = p.path_loss.fc_ghz;
    for (idx, &rx) in scene.receivers.iter().enumerate() {
        let d = dist3(scene.bs_pos, rx);
        let shadow = shadowing_db(&p.path_loss, idx);
        let r_los = budget - pathloss_umi_los(d, &p.path_loss, idx)?;
        let prior = budget - median_pathloss_db(d, fc);
        let los = los_test(scene, idx);
        let (refl, block) = if los.los {
            // Reflected paths share the receiver's shadowing, so their power
            // relative to the direct path depends on geometry only.
            let rel: f64 = scene
                .facades
                .iter()
                .filter_map(|f| reflection_path_length(scene.bs_pos, rx, f))
                .map(|len| {
                    let pr = budget - (median_pathloss_db(len, fc) + shadow) - p.reflection_loss_db;
                    10f64.powf((pr - r_los) / 10.0)
                })
                .sum();
            (10.0 * (1.0 + rel).log10(), 0.0)
        } else {
            (0.0, p.blockage.attenuation_db(los.n_blockers, los.blocked_length_m))
        };
        map.rss_dbm.push(r_los + refl - block);
        map.los_mask.push(los.los);
        map.r_los_dbm.push(r_los);
        map.r_los_prior_dbm.push(prior);
        map.r_reflection_db.push(refl);
        map.r_blockage_db.push(block);
    }
    Ok(map)
}
