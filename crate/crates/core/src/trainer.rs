//! Per-BS training, evaluation and training-size sweeps.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Record, Split};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureNorm};
use crate::loss::{compose_rss, frame_loss, LossBreakdown, Method, DEFAULT_LAMBDA};
use crate::net::{self, clip_global_norm, Anchor, Layout, Model, NetConfig};
use crate::seed::{self, derive_seed, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub lambda: f64,
    pub clip_norm: f64,
    pub optimizer: Optimizer,
    pub seeds: Vec<u64>,
    pub method: Method,
    /// Validation splits are scored every this many epochs and at the end.
    pub eval_every: usize,
    /// Seeds the nested training-subset order.
    pub subset_seed: u64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch: 16,
            lr: 1e-3,
            lr_decay_epochs: vec![10, 30],
            lr_decay: 0.1,
            lambda: DEFAULT_LAMBDA,
            clip_norm: 1.0,
            optimizer: Optimizer::adam(),
            seeds: vec![1, 2, 3, 4, 5],
            method: Method::Physics,
            eval_every: 1,
            subset_seed: 0,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch and eval_every must be > 0".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.lambda >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("clip_norm and lr_decay must be > 0, lambda >= 0".into()));
        }
        self.net.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay.powi(k as i32)
    }
}

/// Records turned into dense arrays, inputs already normalized.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x: Array2<f64>,
    pub rss: Array2<f64>,
    pub prior: Array2<f64>,
    pub los: Vec<Vec<bool>>,
}

impl Prepared {
    pub fn new(records: &[Record], scale: &[f64]) -> Result<Prepared> {
        let first = records.first().ok_or_else(|| Error::Usage("dataset is empty".into()))?;
        let (d, n) = (scale.len(), first.n_receivers());
        let mut x = Array2::zeros((records.len(), d));
        let mut rss = Array2::zeros((records.len(), n));
        let mut prior = Array2::zeros((records.len(), n));
        let mut los = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != d || r.n_receivers() != n || r.los_mask.len() != n || r.r_los_prior_dbm.len() != n {
                return Err(Error::Contract(format!(
                    "record {} of BS {} has inconsistent shapes",
                    r.frame_id, r.bs_id
                )));
            }
            for (o, (&f, &s)) in x.row_mut(i).iter_mut().zip(r.features.iter().zip(scale)) {
                *o = f * s;
            }
            rss.row_mut(i).assign(&ndarray::aview1(&r.rss_dbm));
            prior.row_mut(i).assign(&ndarray::aview1(&r.r_los_prior_dbm));
            los.push(r.los_mask.clone());
        }
        Ok(Prepared { x, rss, prior, los })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_receivers(&self) -> usize {
        self.rss.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Prepared {
        Prepared {
            x: self.x.select(Axis(0), idx),
            rss: self.rss.select(Axis(0), idx),
            prior: self.prior.select(Axis(0), idx),
            los: idx.iter().map(|&i| self.los[i].clone()).collect(),
        }
    }

    pub fn head(&self, k: usize) -> Prepared {
        self.select(&(0..k.min(self.len())).collect::<Vec<_>>())
    }

    pub fn mean_rss(&self) -> f64 {
        self.rss.mean().unwrap_or(0.0)
    }

    fn anchor_row(&self, model: &Model, i: usize) -> Vec<f64> {
        match model.anchor {
            Anchor::RLos => self.prior.row(i).to_vec(),
            Anchor::Constant { dbm } => vec![dbm; self.n_receivers()],
        }
    }
}

/// Static description shared by every model of one experiment.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub features: FeatureConfig,
    pub norm: FeatureNorm,
    pub n_receivers: usize,
}

impl ModelSpec {
    pub fn input_scale(&self) -> Vec<f64> {
        net::input_scale(&self.features, &self.norm)
    }

    pub fn layout(&self, net: &NetConfig) -> Result<Layout> {
        Layout::new(net::input_dims(&self.features), self.n_receivers, net.clone())
    }

    /// Initial model for a training seed. The init stream depends on the
    /// seed only, so every BS starts from the same parameters.
    pub fn init_model(&self, cfg: &TrainConfig, method: Method, anchor_dbm: f64, seed: u64) -> Result<Model> {
        let anchor = if method.uses_prior() { Anchor::RLos } else { Anchor::Constant { dbm: anchor_dbm } };
        Ok(Model::new(self.layout(&cfg.net)?, self.norm, anchor, derive_seed(seed, &[tag::INIT])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae_dbm: f64,
    pub rmse_dbm: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub bs_id: usize,
    pub method: Method,
    pub seed: u64,
    pub fraction: f64,
    pub epoch: usize,
    pub split: Split,
    pub mae: f64,
    pub rmse: f64,
    pub flops: u64,
    pub l_data: f64,
    pub l_phy: f64,
}

pub const METRICS_HEADER: &str = "bs_id,method,seed,fraction,epoch,split,mae,rmse,flops,l_data,l_phy";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.bs_id,
            self.method.name(),
            self.seed,
            self.fraction,
            self.epoch,
            self.split.name(),
            self.mae,
            self.rmse,
            self.flops,
            self.l_data,
            self.l_phy
        )
    }
}

pub fn write_metrics_csv(path: &Path, config_hash: &str, rows: &[MetricRow]) -> Result<()> {
    let mut text = format!("# config_hash: {config_hash}\n{METRICS_HEADER}\n");
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Scores `model` on `data` without touching its parameters.
pub fn evaluate(model: &Model, method: Method, lambda: f64, data: &Prepared) -> Result<EvalReport> {
    let n = data.n_receivers();
    let (mut abs, mut sq) = (0.0, 0.0);
    let mut loss = LossBreakdown::default();
    for start in (0..data.len()).step_by(64) {
        let end = (start + 64).min(data.len());
        let tape = model.forward_batch(data.x.slice(ndarray::s![start..end, ..]))?;
        for (k, i) in (start..end).enumerate() {
            let heads = tape.heads.slice(ndarray::s![k * n..(k + 1) * n, ..]);
            let anchor = data.anchor_row(model, i);
            let rss = data.rss.row(i).to_vec();
            let hat = compose_rss(method, &anchor, heads, &data.los[i]);
            for (a, b) in hat.iter().zip(&rss) {
                abs += (a - b).abs();
                sq += (a - b) * (a - b);
            }
            let (b, _) = frame_loss(method, lambda, heads, &anchor, &rss, &data.los[i]);
            loss.accumulate(&b, data.len());
        }
    }
    let count = (data.len() * n) as f64;
    Ok(EvalReport { mae_dbm: abs / count, rmse_dbm: (sq / count).sqrt(), loss })
}

/// Errors of predictions against truth as `(mae, rmse)`.
pub fn error_stats(pred: &[f64], truth: &[f64]) -> (f64, f64) {
    let n = truth.len() as f64;
    let abs = pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let sq = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (abs / n, (sq / n).sqrt())
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, n: usize) -> Self {
        let (m, v) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (vec![0.0; n], vec![0.0; n]),
        };
        OptimizerState { kind, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// One gradient step on a batch; returns the pre-step breakdown averaged over
/// frames, the squared and absolute error sums, and the FLOPs spent.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    method: Method,
    cfg: &TrainConfig,
    lr: f64,
    data: &Prepared,
    idx: &[usize],
) -> Result<(LossBreakdown, f64, f64, u64)> {
    let n = data.n_receivers();
    let x = data.x.select(Axis(0), idx);
    let tape = model.forward_batch(x.view())?;
    let mut d_heads = Array2::zeros((idx.len() * n, net::N_HEADS));
    let mut loss = LossBreakdown::default();
    let (mut abs, mut sq) = (0.0, 0.0);
    for (k, &i) in idx.iter().enumerate() {
        let heads = tape.heads.slice(ndarray::s![k * n..(k + 1) * n, ..]);
        let anchor = data.anchor_row(model, i);
        let rss = data.rss.row(i).to_vec();
        let (b, g) = frame_loss(method, cfg.lambda, heads, &anchor, &rss, &data.los[i]);
        for (a, t) in compose_rss(method, &anchor, heads, &data.los[i]).iter().zip(&rss) {
            abs += (a - t).abs();
            sq += (a - t) * (a - t);
        }
        loss.accumulate(&b, idx.len());
        d_heads.slice_mut(ndarray::s![k * n..(k + 1) * n, ..]).assign(&(g / idx.len() as f64));
    }
    let mut grad = model.backward(&tape, d_heads.view())?;
    clip_global_norm(&mut grad, cfg.clip_norm);
    opt.step(&mut model.params, &grad, lr);
    Ok((loss, abs, sq, net::flops_estimate(&model.layout, idx.len())))
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<MetricRow>,
    pub flops: u64,
}

/// Evaluation sets attached to a run.
pub type EvalSets<'a> = [(Split, &'a Prepared)];

pub struct RunId {
    pub bs_id: usize,
    pub seed: u64,
    pub fraction: f64,
}

/// Trains from a fresh initialization on `train_data`.
pub fn train(
    spec: &ModelSpec,
    run: &RunId,
    train_data: &Prepared,
    evals: &EvalSets,
    cfg: &TrainConfig,
    method: Method,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let model = spec.init_model(cfg, method, train_data.mean_rss(), run.seed)?;
    train_from(model, run, train_data, evals, cfg, method)
}

/// Continues training an existing model.
pub fn train_from(
    mut model: Model,
    run: &RunId,
    train_data: &Prepared,
    evals: &EvalSets,
    cfg: &TrainConfig,
    method: Method,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer, model.n_params());
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut flops = 0u64;
    let mut history = Vec::new();
    let n_values = (train_data.len() * train_data.n_receivers()) as f64;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = seed::rng(run.seed, &[tag::SHUFFLE, run.bs_id as u64, epoch as u64]);
        order.shuffle(&mut rng);
        let mut loss = LossBreakdown::default();
        let (mut abs, mut sq) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let (b, a, s, f) = train_step(&mut model, &mut opt, method, cfg, lr, train_data, chunk)?;
            loss.accumulate(&scale(&b, chunk.len() as f64), train_data.len());
            abs += a;
            sq += s;
            flops += f;
        }
        let row = |split, mae, rmse, l: &LossBreakdown| MetricRow {
            bs_id: run.bs_id,
            method,
            seed: run.seed,
            fraction: run.fraction,
            epoch: epoch + 1,
            split,
            mae,
            rmse,
            flops,
            l_data: l.l_data,
            l_phy: l.l_phy,
        };
        history.push(row(Split::Train, abs / n_values, (sq / n_values).sqrt(), &loss));
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            for (split, data) in evals {
                let r = evaluate(&model, method, cfg.lambda, data)?;
                history.push(row(*split, r.mae_dbm, r.rmse_dbm, &r.loss));
            }
        }
    }
    Ok(TrainOutcome { model, history, flops })
}

fn scale(b: &LossBreakdown, k: f64) -> LossBreakdown {
    LossBreakdown {
        l_data: b.l_data * k,
        l_los: b.l_los * k,
        l_nlos: b.l_nlos * k,
        l_phy: b.l_phy * k,
        l_total: b.l_total * k,
        lambda: b.lambda,
    }
}

/// Fixed shuffled order of the training set; fractions take prefixes so
/// smaller subsets nest inside larger ones.
pub fn subset_order(n: usize, subset_seed: u64, bs_id: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(subset_seed, &[tag::SUBSET, bs_id as u64]));
    idx
}

pub fn subset(data: &Prepared, fraction: f64, subset_seed: u64, bs_id: usize) -> Result<Prepared> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(data.clone());
    }
    let k = ((fraction * data.len() as f64).round() as usize).max(1);
    let mut idx = subset_order(data.len(), subset_seed, bs_id);
    idx.truncate(k);
    Ok(data.select(&idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bs_id: usize,
    pub method: Method,
    pub seed: u64,
    pub fraction: f64,
    pub val1_mae: f64,
    pub val1_rmse: f64,
    pub val2_mae: f64,
    pub val2_rmse: f64,
}

pub const SWEEP_HEADER: &str = "bs_id,method,seed,fraction,val1_mae,val1_rmse,val2_mae,val2_rmse";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.bs_id,
            self.method.name(),
            self.seed,
            self.fraction,
            self.val1_mae,
            self.val1_rmse,
            self.val2_mae,
            self.val2_rmse
        )
    }
}

/// Held-out data for one BS.
pub struct BsData {
    pub bs_id: usize,
    pub train: Prepared,
    pub val1: Prepared,
    pub val2: Prepared,
}

/// Trains every (fraction, method, seed) on one BS and scores the final
/// model on both validation analogs. Returns metric history too.
pub fn sample_efficiency_sweep(
    spec: &ModelSpec,
    data: &BsData,
    fractions: &[f64],
    methods: &[Method],
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<(Vec<SweepRow>, Vec<MetricRow>)> {
    let mut rows = Vec::new();
    let mut history = Vec::new();
    for &fraction in fractions {
        let train_data = subset(&data.train, fraction, cfg.subset_seed, data.bs_id)?;
        for &method in methods {
            for &seed in seeds {
                let run = RunId { bs_id: data.bs_id, seed, fraction };
                let evals = [(Split::Val1, &data.val1), (Split::Val2, &data.val2)];
                let out = train(spec, &run, &train_data, &evals, cfg, method)?;
                let v1 = evaluate(&out.model, method, cfg.lambda, &data.val1)?;
                let v2 = evaluate(&out.model, method, cfg.lambda, &data.val2)?;
                rows.push(SweepRow {
                    bs_id: data.bs_id,
                    method,
                    seed,
                    fraction,
                    val1_mae: v1.mae_dbm,
                    val1_rmse: v1.rmse_dbm,
                    val2_mae: v2.mae_dbm,
                    val2_rmse: v2.rmse_dbm,
                });
                history.extend(out.history);
            }
        }
    }
    Ok((rows, history))
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median VAL-1 MAE over seeds for one (bs, method, fraction).
pub fn median_val1_mae(rows: &[SweepRow], bs_id: usize, method: Method, fraction: f64) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.bs_id == bs_id && r.method == method && r.fraction == fraction)
        .map(|r| r.val1_mae)
        .collect();
    (!v.is_empty()).then(|| median(&mut v))
}

/// Smallest fraction at which the physics model's median VAL-1 MAE is at
/// or below Baseline 1's at the full training set.
pub fn crossover_fraction(rows: &[SweepRow], bs_id: usize, fractions: &[f64]) -> Option<f64> {
    let target = median_val1_mae(rows, bs_id, Method::Baseline1, 1.0)?;
    let mut fr = fractions.to_vec();
    fr.sort_by(f64::total_cmp);
    fr.into_iter().find(|&f| median_val1_mae(rows, bs_id, Method::Physics, f).is_some_and(|m| m <= target))
}
