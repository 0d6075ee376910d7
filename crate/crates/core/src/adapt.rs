//! Collaborative domain adaptation.
//!
//! A base station whose domain shifted collects donor snapshots, measures how
//! close each donor's home domain is to its new data in fused-feature space,
//! aggregates the donors by softmax of inverse Wasserstein-2 distance and then
//! fine-tunes briefly on the new samples.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::loss::{Method, DEFAULT_LAMBDA};
use crate::net::{self, Anchor, Model};
use crate::trainer::{evaluate, train_from, Optimizer, Prepared, RunId, TrainConfig};

/// Running diagonal Gaussian summary of fused features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// Population variances.
    pub sigma_diag: Vec<f64>,
    pub count: u64,
    m2: Vec<f64>,
}

impl FeatureStats {
    pub fn new(dim: usize) -> Self {
        FeatureStats { mu: vec![0.0; dim], sigma_diag: vec![0.0; dim], count: 0, m2: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Rebuilds stats from a mean, population variances and a count.
    pub fn from_moments(mu: Vec<f64>, sigma_diag: Vec<f64>, count: u64) -> Result<Self> {
        if mu.len() != sigma_diag.len() {
            return Err(Error::Contract("mean and variance lengths differ".into()));
        }
        if sigma_diag.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract("negative variance".into()));
        }
        let m2 = sigma_diag.iter().map(|v| v * count as f64).collect();
        Ok(FeatureStats { mu, sigma_diag, count, m2 })
    }

    /// Welford update, one row at a time, so splitting a batch anywhere gives
    /// the same result as feeding it whole.
    pub fn update(&mut self, batch: ArrayView2<f64>) -> Result<()> {
        if batch.nrows() == 0 {
            return Err(Error::Contract("empty feature batch".into()));
        }
        if batch.ncols() != self.dim() {
            return Err(Error::Contract(format!("feature batch has {} columns, stats track {}", batch.ncols(), self.dim())));
        }
        for row in batch.rows() {
            self.count += 1;
            let n = self.count as f64;
            for (d, &x) in row.iter().enumerate() {
                let delta = x - self.mu[d];
                self.mu[d] += delta / n;
                self.m2[d] += delta * (x - self.mu[d]);
            }
        }
        let n = self.count as f64;
        for (s, m2) in self.sigma_diag.iter_mut().zip(&self.m2) {
            *s = (m2 / n).max(0.0);
        }
        Ok(())
    }

    pub fn of(batch: ArrayView2<f64>) -> Result<Self> {
        let mut s = FeatureStats::new(batch.ncols());
        s.update(batch)?;
        Ok(s)
    }
}

/// Fused-feature statistics of `data` seen through `model`'s encoders.
pub fn model_stats(model: &Model, data: &Prepared) -> Result<FeatureStats> {
    let f = model.fused_features(data.x.view())?;
    FeatureStats::of(f.view())
}

/// Wasserstein-2 distance between diagonal Gaussians.
pub fn w2_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.count < 2 || b.count < 2 {
        return Err(Error::Contract("W2 needs at least two samples on each side".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!("stats dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let mut w2 = 0.0;
    for d in 0..a.dim() {
        let (sa, sb) = (a.sigma_diag[d], b.sigma_diag[d]);
        if !(sa >= 0.0 && sb >= 0.0) {
            return Err(Error::Contract("negative variance".into()));
        }
        let dm = a.mu[d] - b.mu[d];
        let ds = sa.sqrt() - sb.sqrt();
        w2 += dm * dm + ds * ds;
    }
    Ok(w2.sqrt())
}

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub gamma: Vec<f64>,
}

impl AggregationWeights {
    pub fn uniform(k: usize) -> Self {
        AggregationWeights { gamma: vec![1.0 / k as f64; k] }
    }

    pub fn one_hot(k: usize, i: usize) -> Self {
        let mut gamma = vec![0.0; k];
        gamma[i] = 1.0;
        AggregationWeights { gamma }
    }
}

/// Softmax over inverse distances, each floored at `eps`.
pub fn similarity_weights(distances: &[f64], eps: f64) -> Result<AggregationWeights> {
    if distances.is_empty() {
        return Err(Error::Contract("no distances to weight".into()));
    }
    if distances.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::Contract("distances must be >= 0".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be > 0, got {eps}")));
    }
    let logits: Vec<f64> = distances.iter().map(|d| 1.0 / d.max(eps)).collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(AggregationWeights { gamma: e.iter().map(|v| v / z).collect() })
}

/// Convex combination of parameter vectors.
pub fn aggregate(models: &[&Model], weights: &AggregationWeights) -> Result<Model> {
    let gamma = &weights.gamma;
    if models.is_empty() || models.len() != gamma.len() {
        return Err(Error::Contract(format!("{} models for {} weights", models.len(), gamma.len())));
    }
    let first = models[0];
    if models.iter().any(|m| !m.same_architecture(first)) {
        return Err(Error::Contract("cannot aggregate models with different architectures".into()));
    }
    let anchor = match first.anchor {
        Anchor::RLos => {
            if models.iter().any(|m| m.anchor != Anchor::RLos) {
                return Err(Error::Contract("cannot mix anchored and constant-offset models".into()));
            }
            Anchor::RLos
        }
        Anchor::Constant { .. } => {
            let mut dbm = 0.0;
            for (m, g) in models.iter().zip(gamma) {
                match m.anchor {
                    Anchor::Constant { dbm: d } => dbm += g * d,
                    Anchor::RLos => return Err(Error::Contract("cannot mix anchored and constant-offset models".into())),
                }
            }
            Anchor::Constant { dbm }
        }
    };
    let mut params = vec![0.0; first.n_params()];
    for (m, &g) in models.iter().zip(gamma) {
        for (p, q) in params.iter_mut().zip(&m.params) {
            *p += g * q;
        }
    }
    Ok(Model { layout: first.layout.clone(), params, norm: first.norm, anchor })
}

/// The Averaged baseline: uniform weights over the same models.
pub fn average(models: &[&Model]) -> Result<Model> {
    aggregate(models, &AggregationWeights::uniform(models.len()))
}

/// A model shipped by another BS together with the statistics of its home
/// domain under its own encoders.
#[derive(Debug, Clone)]
pub struct Donor {
    pub bs_id: usize,
    pub model: Model,
    pub stats: FeatureStats,
}

impl Donor {
    pub fn snapshot_bytes(&self) -> Result<u64> {
        Ok((self.model.to_bytes()?.len() + serde_json::to_vec(&self.stats)?.len()) as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMethod {
    Proposed,
    FineTune,
    FineTuneNoPhy,
    Averaged,
}

impl AdaptMethod {
    pub const ALL: [AdaptMethod; 4] =
        [AdaptMethod::Proposed, AdaptMethod::FineTune, AdaptMethod::FineTuneNoPhy, AdaptMethod::Averaged];

    pub fn name(self) -> &'static str {
        match self {
            AdaptMethod::Proposed => "proposed",
            AdaptMethod::FineTune => "fine_tune",
            AdaptMethod::FineTuneNoPhy => "fine_tune_no_phy",
            AdaptMethod::Averaged => "averaged",
        }
    }

    pub fn uses_donors(self) -> bool {
        matches!(self, AdaptMethod::Proposed | AdaptMethod::Averaged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub lambda: f64,
    pub clip_norm: f64,
    pub optimizer: Optimizer,
    pub eps: f64,
    /// Also weigh the requester's own pre-shift model.
    pub include_self: bool,
    /// Frames of the shifted split available for adaptation; the rest are held
    /// out for scoring.
    pub pool_frames: usize,
    /// Adaptation budgets as fractions of the pool.
    pub fractions: Vec<f64>,
    pub seed: u64,
    /// Frames in the rolling RMSE window of the shift detector.
    pub detect_window: usize,
    /// Detector fires when rolling RMSE exceeds this multiple of validation RMSE.
    pub detect_ratio: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 10,
            lr: 1e-3,
            batch: 16,
            lambda: DEFAULT_LAMBDA,
            clip_norm: 1.0,
            optimizer: Optimizer::adam(),
            eps: DEFAULT_EPS,
            include_self: false,
            pool_frames: 100,
            fractions: vec![0.125, 0.25, 0.5, 1.0],
            seed: 1,
            detect_window: 20,
            detect_ratio: 1.5,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch == 0 {
            return Err(Error::Config("adapt lr must be >= 0 and batch > 0".into()));
        }
        if !(self.eps > 0.0) || !(self.detect_ratio > 0.0) || self.detect_window == 0 || self.pool_frames == 0 {
            return Err(Error::Config("adapt eps, detect_ratio, detect_window and pool_frames must be > 0".into()));
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("adapt fractions must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn train_config(&self, lambda: f64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.max(1),
            batch: self.batch,
            lr: self.lr,
            lr_decay_epochs: Vec::new(),
            lambda,
            clip_norm: self.clip_norm,
            optimizer: self.optimizer,
            seeds: vec![self.seed],
            method: Method::Physics,
            eval_every: 1,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptRow {
    pub bs_id: usize,
    pub method: AdaptMethod,
    pub samples_used: usize,
    pub epoch: usize,
    pub rmse: f64,
    pub mae: f64,
    pub flops: u64,
    pub bytes_exchanged: u64,
    pub gamma_json: String,
}

pub const ADAPT_HEADER: &str = "bs_id,method,samples_used,epoch,rmse,mae,flops,bytes_exchanged,gamma_json";

impl AdaptRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},\"{}\"",
            self.bs_id,
            self.method.name(),
            self.samples_used,
            self.epoch,
            self.rmse,
            self.mae,
            self.flops,
            self.bytes_exchanged,
            self.gamma_json.replace('"', "\"\"")
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdaptationReport {
    pub rows: Vec<AdaptRow>,
    pub gamma: Vec<f64>,
    pub donor_ids: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn write_adapt_csv(path: &Path, config_hash: &str, rows: &[AdaptRow]) -> Result<()> {
    let mut text = format!("# config_hash: {config_hash}\n{ADAPT_HEADER}\n");
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Starting point of one adaptation method before any fine-tuning.
pub struct Start {
    pub model: Model,
    pub gamma: Vec<f64>,
    pub donor_ids: Vec<usize>,
    pub flops: u64,
    pub bytes: u64,
}

/// Builds the pre-fine-tuning model for `method`.
///
/// Donor methods run every donor encoder over `adapt` once (counted in
/// `flops`) and ship every snapshot (counted in `bytes`). With no donors the
/// requester's own model is returned and a warning recorded.
pub fn starting_model(
    method: AdaptMethod,
    own: &Model,
    own_stats: Option<&FeatureStats>,
    adapt: &Prepared,
    donors: &[Donor],
    acfg: &AdaptConfig,
    warnings: &mut Vec<String>,
) -> Result<Start> {
    let alone = |own: &Model| Start { model: own.clone(), gamma: Vec::new(), donor_ids: Vec::new(), flops: 0, bytes: 0 };
    if !method.uses_donors() {
        return Ok(alone(own));
    }
    if donors.is_empty() {
        warnings.push(format!("{}: no donors available, falling back to fine-tuning", method.name()));
        return Ok(alone(own));
    }
    let mut models: Vec<&Model> = donors.iter().map(|d| &d.model).collect();
    let mut ids: Vec<usize> = donors.iter().map(|d| d.bs_id).collect();
    let mut bytes = 0;
    for d in donors {
        bytes += d.snapshot_bytes()?;
    }
    if acfg.include_self {
        models.push(own);
        ids.push(0);
    }
    let mut flops = 0;
    let weights = match method {
        AdaptMethod::Averaged => AggregationWeights::uniform(models.len()),
        _ => {
            let mut dist = Vec::with_capacity(models.len());
            for d in donors {
                dist.push(w2_distance(&model_stats(&d.model, adapt)?, &d.stats)?);
                flops += net::encoder_flops(&d.model.layout, adapt.len());
            }
            if acfg.include_self {
                let home = own_stats.ok_or_else(|| Error::Usage("include_self needs the requester's home stats".into()))?;
                dist.push(w2_distance(&model_stats(own, adapt)?, home)?);
                flops += net::encoder_flops(&own.layout, adapt.len());
            }
            similarity_weights(&dist, acfg.eps)?
        }
    };
    let model = aggregate(&models, &weights)?;
    Ok(Start { model, gamma: weights.gamma, donor_ids: ids, flops, bytes })
}

/// Runs one adaptation method on `adapt` and scores it on `holdout` after
/// aggregation (epoch 0) and after every fine-tuning epoch.
#[allow(clippy::too_many_arguments)]
pub fn adapt_once(
    bs_id: usize,
    method: AdaptMethod,
    own: &Model,
    own_stats: Option<&FeatureStats>,
    adapt: &Prepared,
    holdout: &Prepared,
    donors: &[Donor],
    acfg: &AdaptConfig,
) -> Result<(Model, AdaptationReport)> {
    acfg.validate()?;
    if adapt.len() < 2 {
        return Err(Error::Usage("adaptation needs at least two shifted frames".into()));
    }
    let mut report = AdaptationReport::default();
    let start = starting_model(method, own, own_stats, adapt, donors, acfg, &mut report.warnings)?;
    let lambda = if method == AdaptMethod::FineTuneNoPhy { 0.0 } else { acfg.lambda };
    let gamma_json = serde_json::to_string(&start.gamma)?;
    let row = |epoch, rmse, mae, flops| AdaptRow {
        bs_id,
        method,
        samples_used: adapt.len(),
        epoch,
        rmse,
        mae,
        flops,
        bytes_exchanged: start.bytes,
        gamma_json: gamma_json.clone(),
    };
    let r0 = evaluate(&start.model, Method::Physics, lambda, holdout)?;
    report.rows.push(row(0, r0.rmse_dbm, r0.mae_dbm, start.flops));
    report.gamma = start.gamma.clone();
    report.donor_ids = start.donor_ids.clone();
    if acfg.epochs == 0 {
        return Ok((start.model, report));
    }
    let cfg = acfg.train_config(lambda);
    let run = RunId { bs_id, seed: acfg.seed, fraction: 1.0 };
    let out = train_from(start.model, &run, adapt, &[(Split::Val1, holdout)], &cfg, Method::Physics)?;
    for h in out.history.iter().filter(|h| h.split == Split::Val1) {
        report.rows.push(row(h.epoch, h.rmse, h.mae, start.flops + h.flops));
    }
    Ok((out.model, report))
}

/// The proposed method end to end: similarity, aggregation, fine-tuning.
pub fn collaborative_adapt(
    bs_id: usize,
    own: &Model,
    adapt: &Prepared,
    holdout: &Prepared,
    donors: &[Donor],
    acfg: &AdaptConfig,
) -> Result<(Model, AdaptationReport)> {
    adapt_once(bs_id, AdaptMethod::Proposed, own, None, adapt, holdout, donors, acfg)
}

/// All four methods over every adaptation budget. The first `pool_frames`
/// frames of `shifted` form the pool and budgets take its prefixes; the
/// remaining frames are the holdout.
pub fn adaptation_sweep(
    bs_id: usize,
    own: &Model,
    own_stats: Option<&FeatureStats>,
    shifted: &Prepared,
    donors: &[Donor],
    acfg: &AdaptConfig,
    methods: &[AdaptMethod],
) -> Result<AdaptationReport> {
    acfg.validate()?;
    let pool = acfg.pool_frames.min(shifted.len().saturating_sub(1));
    if pool < 2 {
        return Err(Error::Usage(format!("shifted split has {} frames, too few to adapt and score", shifted.len())));
    }
    let holdout = shifted.select(&(pool..shifted.len()).collect::<Vec<_>>());
    let mut report = AdaptationReport::default();
    for &frac in &acfg.fractions {
        let k = ((frac * pool as f64).round() as usize).clamp(2, pool);
        let adapt = shifted.head(k);
        for &m in methods {
            let (_, r) = adapt_once(bs_id, m, own, own_stats, &adapt, &holdout, donors, acfg)?;
            if m == AdaptMethod::Proposed {
                report.gamma = r.gamma.clone();
                report.donor_ids = r.donor_ids.clone();
            }
            report.rows.extend(r.rows);
            for w in r.warnings {
                if !report.warnings.contains(&w) {
                    report.warnings.push(w);
                }
            }
        }
    }
    Ok(report)
}

/// Final-epoch row of `method` at its largest budget.
pub fn final_row(rows: &[AdaptRow], method: AdaptMethod) -> Option<&AdaptRow> {
    rows.iter()
        .filter(|r| r.method == method)
        .max_by(|a, b| (a.samples_used, a.epoch).cmp(&(b.samples_used, b.epoch)))
}

/// Fewest samples and fewest FLOPs at which `method` gets to `target` RMSE or
/// below, over every budget and epoch.
pub fn cost_to_reach(rows: &[AdaptRow], method: AdaptMethod, target: f64) -> Option<(usize, u64)> {
    let hits: Vec<&AdaptRow> = rows.iter().filter(|r| r.method == method && r.rmse <= target).collect();
    let samples = hits.iter().map(|r| r.samples_used).min()?;
    let flops = hits.iter().map(|r| r.flops).min()?;
    Some((samples, flops))
}

/// Why adaptation was started.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    Explicit,
    Detected,
}

/// Rolling-window RMSE monitor against the RMSE measured at training time.
#[derive(Debug, Clone)]
pub struct ShiftDetector {
    baseline_rmse: f64,
    ratio: f64,
    window: usize,
    mse: VecDeque<f64>,
}

impl ShiftDetector {
    pub fn new(baseline_rmse: f64, ratio: f64, window: usize) -> Result<Self> {
        if !(baseline_rmse >= 0.0) || !(ratio > 0.0) || window == 0 {
            return Err(Error::Config("detector needs baseline >= 0, ratio > 0 and window > 0".into()));
        }
        Ok(ShiftDetector { baseline_rmse, ratio, window, mse: VecDeque::with_capacity(window) })
    }

    /// Feeds the mean squared error of one frame; true once the window is
    /// full and its RMSE exceeds the threshold.
    pub fn observe(&mut self, frame_mse: f64) -> bool {
        if self.mse.len() == self.window {
            self.mse.pop_front();
        }
        self.mse.push_back(frame_mse);
        self.mse.len() == self.window && self.rolling_rmse() > self.ratio * self.baseline_rmse
    }

    pub fn rolling_rmse(&self) -> f64 {
        if self.mse.is_empty() {
            return 0.0;
        }
        (self.mse.iter().sum::<f64>() / self.mse.len() as f64).sqrt()
    }
}

/// Scans `stream` frame by frame with `model` and reports whether and when
/// adaptation should start. An explicit request fires before any frame.
pub fn detect_shift(
    explicit: bool,
    model: &Model,
    stream: &Prepared,
    detector: &mut ShiftDetector,
) -> Result<Option<(Trigger, usize)>> {
    if explicit {
        return Ok(Some((Trigger::Explicit, 0)));
    }
    for i in 0..stream.len() {
        let r = evaluate(model, Method::Physics, 0.0, &stream.select(&[i]))?;
        if detector.observe(r.rmse_dbm * r.rmse_dbm) {
            return Ok(Some((Trigger::Detected, i + 1)));
        }
    }
    Ok(None)
}
