//! Training objectives.
//!
//! All losses are per-frame means over receivers; batch losses average
//! frames. Gradients are returned with respect to the four raw heads
//! `[reflection, blockage, rbar, b]` so they chain straight into
//! [`crate::net::Model::backward`].
//!
//! Hinge subgradients are one-sided: at the kink the derivative is 0.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::net::{HEAD_B, HEAD_BLOCKAGE, HEAD_RBAR, HEAD_REFLECTION, N_HEADS};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const BASELINE2_NLOS_WEIGHT: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Geometric prior plus learned components, data and physics loss.
    Physics,
    /// Plain MSE on a constant anchor.
    Baseline1,
    /// Baseline 1 with NLoS errors weighted up.
    Baseline2,
    /// Path-loss formula on LoS receivers, learned NLoS attenuation.
    Baseline3,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Physics, Method::Baseline1, Method::Baseline2, Method::Baseline3];

    pub fn name(self) -> &'static str {
        match self {
            Method::Physics => "physics",
            Method::Baseline1 => "baseline1",
            Method::Baseline2 => "baseline2",
            Method::Baseline3 => "baseline3",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether predictions start from the geometric direct-path level.
    pub fn uses_prior(self) -> bool {
        matches!(self, Method::Physics | Method::Baseline3)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_data: f64,
    pub l_los: f64,
    pub l_nlos: f64,
    pub l_phy: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    fn new(l_data: f64, l_los: f64, l_nlos: f64, lambda: f64) -> Self {
        let l_phy = l_los + l_nlos;
        LossBreakdown { l_data, l_los, l_nlos, l_phy, l_total: l_data + lambda * l_phy, lambda }
    }

    /// Running mean helper: `self += other / n`.
    pub fn accumulate(&mut self, other: &LossBreakdown, n: usize) {
        let k = 1.0 / n as f64;
        self.l_data += other.l_data * k;
        self.l_los += other.l_los * k;
        self.l_nlos += other.l_nlos * k;
        self.l_phy += other.l_phy * k;
        self.l_total += other.l_total * k;
        self.lambda = other.lambda;
    }
}

/// Mean squared error over receivers.
pub fn data_loss(rss_hat: &[f64], rss: &[f64]) -> f64 {
    assert_eq!(rss_hat.len(), rss.len());
    if rss.is_empty() {
        return 0.0;
    }
    rss_hat.iter().zip(rss).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / rss.len() as f64
}

/// `(l_los, l_nlos)`; an empty receiver class contributes 0.
pub fn physics_loss(heads: ArrayView2<f64>, los_mask: &[bool]) -> (f64, f64) {
    let (mut los, mut nlos, mut n_los, mut n_nlos) = (0.0, 0.0, 0usize, 0usize);
    for (h, &is_los) in heads.rows().into_iter().zip(los_mask) {
        if is_los {
            los += h[HEAD_BLOCKAGE] + (h[HEAD_REFLECTION] - h[HEAD_RBAR]).max(0.0);
            n_los += 1;
        } else {
            nlos += h[HEAD_REFLECTION] + (h[HEAD_B] - h[HEAD_BLOCKAGE]).max(0.0);
            n_nlos += 1;
        }
    }
    (if n_los > 0 { los / n_los as f64 } else { 0.0 }, if n_nlos > 0 { nlos / n_nlos as f64 } else { 0.0 })
}

/// Predicted RSS per receiver for `method`.
pub fn compose_rss(method: Method, anchor: &[f64], heads: ArrayView2<f64>, los_mask: &[bool]) -> Vec<f64> {
    heads
        .rows()
        .into_iter()
        .zip(anchor)
        .zip(los_mask)
        .map(|((h, &a), &los)| match method {
            Method::Baseline3 if los => a,
            Method::Baseline3 => a - h[HEAD_BLOCKAGE],
            _ => a + h[HEAD_REFLECTION] - h[HEAD_BLOCKAGE],
        })
        .collect()
}

/// One frame's objective and its gradient with respect to the heads.
pub fn frame_loss(
    method: Method,
    lambda: f64,
    heads: ArrayView2<f64>,
    anchor: &[f64],
    rss: &[f64],
    los_mask: &[bool],
) -> (LossBreakdown, Array2<f64>) {
    let n = rss.len();
    assert!(heads.nrows() == n && anchor.len() == n && los_mask.len() == n);
    let rss_hat = compose_rss(method, anchor, heads, los_mask);
    let mut grad = Array2::zeros((n, N_HEADS));
    let (l_los, l_nlos) = physics_loss(heads, los_mask);
    let n_nlos = los_mask.iter().filter(|&&l| !l).count();
    let n_los = n - n_nlos;

    let mut l_data = 0.0;
    for i in 0..n {
        let e = rss_hat[i] - rss[i];
        let (w, denom) = match method {
            Method::Physics | Method::Baseline1 => (1.0, n),
            Method::Baseline2 => (if los_mask[i] { 1.0 } else { BASELINE2_NLOS_WEIGHT }, n),
            Method::Baseline3 if los_mask[i] => (0.0, 1),
            Method::Baseline3 => (1.0, n_nlos),
        };
        if w == 0.0 {
            continue;
        }
        l_data += w * e * e / denom as f64;
        let d = 2.0 * w * e / denom as f64;
        if method != Method::Baseline3 {
            grad[[i, HEAD_REFLECTION]] += d;
        }
        grad[[i, HEAD_BLOCKAGE]] -= d;
    }

    let lambda = if method == Method::Physics { lambda } else { 0.0 };
    if lambda != 0.0 {
        for i in 0..n {
            let h = heads.row(i);
            if los_mask[i] {
                let k = lambda / n_los as f64;
                grad[[i, HEAD_BLOCKAGE]] += k;
                if h[HEAD_REFLECTION] > h[HEAD_RBAR] {
                    grad[[i, HEAD_REFLECTION]] += k;
                    grad[[i, HEAD_RBAR]] -= k;
                }
            } else {
                let k = lambda / n_nlos as f64;
                grad[[i, HEAD_REFLECTION]] += k;
                if h[HEAD_B] > h[HEAD_BLOCKAGE] {
                    grad[[i, HEAD_B]] += k;
                    grad[[i, HEAD_BLOCKAGE]] -= k;
                }
            }
        }
    }
    (LossBreakdown::new(l_data, l_los, l_nlos, lambda), grad)
}
