//! Experiment configuration and the pipelines behind each CLI command.
//!
//! Output layout under `--out`:
//! - `data/bs{k}_{split}.jsonl`: generated records
//! - `models/bs{k}_seed{s}.bin` plus `.json` card: trained snapshots
//! - `train/`, `sweep/`, `adapt/{scenario}/`, `pac/`: CSV tables, summaries
//!   and `plot_*.json` series

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{self, AdaptConfig, AdaptMethod, AdaptRow, Donor, FeatureStats, ShiftDetector, Trigger};
use crate::channel::ChannelConfig;
use crate::dataset::{self, BsGenerator, DatasetConfig, Record, Split};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureNorm};
use crate::loss::Method;
use crate::net::Model;
use crate::pac::{self, PacConfig};
use crate::scene::SceneConfig;
use crate::trainer::{self, BsData, MetricRow, ModelSpec, Prepared, RunId, SweepRow, TrainConfig};

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub methods: Vec<Method>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { fractions: vec![0.125, 0.25, 0.5, 1.0], methods: Method::ALL.to_vec() }
    }
}

/// The whole experiment as one JSON document. Only `schema` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    /// Base seed for scenes, motion, shadowing and sensor noise.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub pac: PacConfig,
}

fn default_seed() -> u64 {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: CONFIG_SCHEMA,
            seed: default_seed(),
            scene: SceneConfig::default(),
            channel: ChannelConfig::default(),
            features: FeatureConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            adapt: AdaptConfig::default(),
            pac: PacConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!("config schema {} is not supported (expected {CONFIG_SCHEMA})", self.schema)));
        }
        self.scene.validate()?;
        self.channel.validate()?;
        self.features.validate()?;
        self.dataset.validate(&self.scene)?;
        self.train.validate()?;
        self.train.net.validate()?;
        self.adapt.validate()?;
        self.pac.validate()?;
        if self.sweep.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("sweep fractions must lie in (0, 1]".into()));
        }
        if self.train.seeds.is_empty() {
            return Err(Error::Config("train.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Short digest of the fully resolved config.
    pub fn hash(&self) -> String {
        dataset::hash_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            features: self.features.clone(),
            norm: FeatureNorm::for_area(self.scene.area_x_m, self.scene.area_y_m),
            n_receivers: self.scene.n_receivers(),
        }
    }

    pub fn bs_ids(&self) -> Vec<usize> {
        (1..=self.dataset.n_bs()).collect()
    }

    fn generator<'a>(&'a self, bs_id: usize, hash: &'a str) -> BsGenerator<'a> {
        BsGenerator {
            bs_id,
            base_seed: self.seed,
            scene: &self.scene,
            channel: &self.channel,
            features: &self.features,
            data: &self.dataset,
            config_hash: hash,
        }
    }
}

/// One labelled line of a plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub config_hash: String,
    pub figure: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Worker pool capped by `RSSGEN_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("RSSGEN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("RSSGEN_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

fn par_map<T: Send, F>(ids: &[usize], f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    thread_pool()?.install(|| ids.par_iter().map(|&i| f(i)).collect())
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

/// Writes three split files per BS. Returns the paths in BS then split order.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = mkdir(&data_dir(out))?;
    let hash = cfg.hash();
    let files = par_map(&cfg.bs_ids(), |bs| {
        let g = cfg.generator(bs, &hash);
        let mut paths = Vec::new();
        for split in Split::ALL {
            let path = dir.join(dataset::dataset_file_name(bs, split));
            dataset::write_jsonl(&path, &g.generate(split)?)?;
            paths.push(path);
        }
        Ok(paths)
    })?;
    Ok(files.into_iter().flatten().collect())
}

pub fn load_split(out: &Path, bs_id: usize, split: Split) -> Result<Vec<Record>> {
    dataset::read_jsonl(&data_dir(out).join(dataset::dataset_file_name(bs_id, split)))
}

pub fn load_bs(cfg: &ExperimentConfig, out: &Path, bs_id: usize) -> Result<BsData> {
    let scale = cfg.model_spec().input_scale();
    let p = |split| Prepared::new(&load_split(out, bs_id, split)?, &scale);
    Ok(BsData { bs_id, train: p(Split::Train)?, val1: p(Split::Val1)?, val2: p(Split::Val2)? })
}

/// What a trained BS keeps next to its snapshot and ships to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub config_hash: String,
    pub bs_id: usize,
    pub seed: u64,
    pub method: Method,
    /// Fused-feature statistics over the training split.
    pub stats: FeatureStats,
    /// RMSE on the training split at the end of training, the reference of
    /// the shift detector.
    pub reference_rmse: f64,
}

fn model_path(out: &Path, bs_id: usize, seed: u64) -> PathBuf {
    out.join("models").join(format!("bs{bs_id}_seed{seed}.bin"))
}

pub fn load_model(out: &Path, bs_id: usize, seed: u64) -> Result<(Model, ModelCard)> {
    let bin = model_path(out, bs_id, seed);
    let missing = |p: &Path| Error::Usage(format!("model snapshot {} is missing: run `rssgen train` first", p.display()));
    let bytes = std::fs::read(&bin).map_err(|_| missing(&bin))?;
    let card_path = bin.with_extension("json");
    let card_text = std::fs::read_to_string(&card_path).map_err(|_| missing(&card_path))?;
    Ok((Model::from_bytes(&bytes)?, serde_json::from_str(&card_text)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalScore {
    pub bs_id: usize,
    pub seed: u64,
    pub split: Split,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub method: Method,
    pub scores: Vec<FinalScore>,
}

/// Trains `train.method` for every BS and seed; saves snapshots and cards.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = mkdir(&out.join("train"))?;
    mkdir(&out.join("models"))?;
    let spec = cfg.model_spec();
    let method = cfg.train.method;
    let per_bs = par_map(&cfg.bs_ids(), |bs| {
        let data = load_bs(cfg, out, bs)?;
        let mut history = Vec::new();
        let mut scores = Vec::new();
        for &seed in &cfg.train.seeds {
            let run = RunId { bs_id: bs, seed, fraction: 1.0 };
            let evals = [(Split::Val1, &data.val1), (Split::Val2, &data.val2)];
            let outcome = trainer::train(&spec, &run, &data.train, &evals, &cfg.train, method)?;
            for (split, d) in evals {
                let r = trainer::evaluate(&outcome.model, method, cfg.train.lambda, d)?;
                scores.push(FinalScore { bs_id: bs, seed, split, mae: r.mae_dbm, rmse: r.rmse_dbm });
            }
            let reference = trainer::evaluate(&outcome.model, method, cfg.train.lambda, &data.train)?;
            let card = ModelCard {
                config_hash: hash.clone(),
                bs_id: bs,
                seed,
                method,
                stats: adapt::model_stats(&outcome.model, &data.train)?,
                reference_rmse: reference.rmse_dbm,
            };
            let path = model_path(out, bs, seed);
            std::fs::write(&path, outcome.model.to_bytes()?).map_err(|e| Error::io(&path, e))?;
            write_json(&path.with_extension("json"), &card)?;
            history.extend(outcome.history);
        }
        trainer::write_metrics_csv(&dir.join(format!("metrics_bs{bs}.csv")), &hash, &history)?;
        Ok((history, scores))
    })?;
    let mut history: Vec<MetricRow> = Vec::new();
    let mut scores = Vec::new();
    for (h, s) in per_bs {
        history.extend(h);
        scores.extend(s);
    }
    trainer::write_metrics_csv(&dir.join("metrics.csv"), &hash, &history)?;
    let series = history
        .iter()
        .filter(|r| r.split == Split::Val1)
        .fold(Vec::<Series>::new(), |mut acc, r| {
            let label = format!("bs{} seed{} val1", r.bs_id, r.seed);
            match acc.iter_mut().find(|s| s.label == label) {
                Some(s) => {
                    s.x.push(r.epoch as f64);
                    s.y.push(r.mae);
                }
                None => acc.push(Series { label, x: vec![r.epoch as f64], y: vec![r.mae] }),
            }
            acc
        });
    write_json(
        &dir.join("plot_learning_curves.json"),
        &PlotData {
            config_hash: hash.clone(),
            figure: "learning curves".into(),
            x_label: "epoch".into(),
            y_label: "VAL-1 MAE (dB)".into(),
            series,
        },
    )?;
    let summary = TrainSummary { config_hash: hash, method, scores };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Physics versus one baseline at the full training set, in percent of the
/// baseline's error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub bs_id: usize,
    pub baseline: Method,
    pub val1_mae_pct: f64,
    pub val1_rmse_pct: f64,
    pub val2_mae_pct: f64,
    pub val2_rmse_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config_hash: String,
    pub crossover_fraction: Vec<(usize, Option<f64>)>,
    pub improvements: Vec<Improvement>,
}

fn median_of(rows: &[SweepRow], bs: usize, method: Method, fraction: f64, pick: fn(&SweepRow) -> f64) -> Option<f64> {
    let mut v: Vec<f64> =
        rows.iter().filter(|r| r.bs_id == bs && r.method == method && r.fraction == fraction).map(pick).collect();
    (!v.is_empty()).then(|| trainer::median(&mut v))
}

pub fn improvements(rows: &[SweepRow], bs: usize, baseline: Method) -> Option<Improvement> {
    let pct = |pick: fn(&SweepRow) -> f64| -> Option<f64> {
        let b = median_of(rows, bs, baseline, 1.0, pick)?;
        let p = median_of(rows, bs, Method::Physics, 1.0, pick)?;
        Some(100.0 * (b - p) / b)
    };
    Some(Improvement {
        bs_id: bs,
        baseline,
        val1_mae_pct: pct(|r| r.val1_mae)?,
        val1_rmse_pct: pct(|r| r.val1_rmse)?,
        val2_mae_pct: pct(|r| r.val2_mae)?,
        val2_rmse_pct: pct(|r| r.val2_rmse)?,
    })
}

pub fn write_sweep_csv(path: &Path, config_hash: &str, rows: &[SweepRow]) -> Result<()> {
    let mut text = format!("# config_hash: {config_hash}\n{}\n", trainer::SWEEP_HEADER);
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Training-size sweep over every BS.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<SweepRow>, SweepSummary)> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = mkdir(&out.join("sweep"))?;
    let spec = cfg.model_spec();
    let s = &cfg.sweep;
    let per_bs = par_map(&cfg.bs_ids(), |bs| {
        let data = load_bs(cfg, out, bs)?;
        trainer::sample_efficiency_sweep(&spec, &data, &s.fractions, &s.methods, &cfg.train.seeds, &cfg.train)
    })?;
    let mut rows = Vec::new();
    let mut history = Vec::new();
    for (r, h) in per_bs {
        rows.extend(r);
        history.extend(h);
    }
    write_sweep_csv(&dir.join("sweep.csv"), &hash, &rows)?;
    trainer::write_metrics_csv(&dir.join("metrics.csv"), &hash, &history)?;
    let mut fractions = s.fractions.clone();
    fractions.sort_by(f64::total_cmp);
    for (split, pick) in [("val1", (|r: &SweepRow| r.val1_mae) as fn(&SweepRow) -> f64), ("val2", |r| r.val2_mae)] {
        let mut series = Vec::new();
        for bs in cfg.bs_ids() {
            for &m in &s.methods {
                let pts: Vec<(f64, f64)> =
                    fractions.iter().filter_map(|&f| median_of(&rows, bs, m, f, pick).map(|y| (f, y))).collect();
                series.push(Series {
                    label: format!("bs{bs} {}", m.name()),
                    x: pts.iter().map(|p| p.0).collect(),
                    y: pts.iter().map(|p| p.1).collect(),
                });
            }
        }
        write_json(
            &dir.join(format!("plot_sample_efficiency_{split}.json")),
            &PlotData {
                config_hash: hash.clone(),
                figure: format!("median {split} MAE versus training fraction"),
                x_label: "training fraction".into(),
                y_label: format!("{split} MAE (dB)"),
                series,
            },
        )?;
    }
    let summary = SweepSummary {
        config_hash: hash,
        crossover_fraction: cfg.bs_ids().into_iter().map(|bs| (bs, trainer::crossover_fraction(&rows, bs, &fractions))).collect(),
        improvements: cfg
            .bs_ids()
            .into_iter()
            .flat_map(|bs| [Method::Baseline1, Method::Baseline2, Method::Baseline3].map(|b| (bs, b)))
            .filter_map(|(bs, b)| improvements(&rows, bs, b))
            .collect(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((rows, summary))
}

/// A named adaptation scenario: which BSs shift, and to which split.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub split: Split,
    pub requesters: Vec<usize>,
}

impl Scenario {
    /// `val1-bs45` or `val2-bs2`; ids are single digits, or comma separated
    /// as in `val1-bs4,5`.
    pub fn parse(name: &str, n_bs: usize) -> Result<Scenario> {
        let bad = || Error::Usage(format!("unknown scenario {name:?}; expected e.g. \"val1-bs45\""));
        let (split, ids) = name.split_once("-bs").ok_or_else(bad)?;
        let split = match split {
            "val1" => Split::Val1,
            "val2" => Split::Val2,
            _ => return Err(bad()),
        };
        let requesters: Vec<usize> = if ids.contains(',') {
            ids.split(',').map(|t| t.parse().map_err(|_| bad())).collect::<Result<_>>()?
        } else {
            ids.chars().map(|c| c.to_digit(10).map(|d| d as usize).ok_or_else(bad)).collect::<Result<_>>()?
        };
        if requesters.is_empty() || requesters.iter().any(|&b| b == 0 || b > n_bs) {
            return Err(Error::Usage(format!("scenario {name:?} names a BS outside 1..={n_bs}")));
        }
        Ok(Scenario { name: name.to_string(), split, requesters })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequesterSummary {
    pub bs_id: usize,
    /// `explicit`, `detected` or `none`.
    pub trigger: String,
    /// Frames scanned before the detector fired.
    pub detected_after_frames: Option<usize>,
    pub donor_ids: Vec<usize>,
    pub gamma: Vec<f64>,
    pub fine_tune_final_rmse: Option<f64>,
    pub fine_tune_samples: Option<usize>,
    pub fine_tune_flops: Option<u64>,
    /// Fewest samples and FLOPs at which the proposed method reaches the
    /// fine-tuning baseline's final RMSE.
    pub proposed_samples_to_reach: Option<usize>,
    pub proposed_flops_to_reach: Option<u64>,
    pub proposed_final_rmse: Option<f64>,
    pub averaged_final_rmse: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub config_hash: String,
    pub scenario: String,
    pub requesters: Vec<RequesterSummary>,
}

/// Runs a shift scenario from trained snapshots (seed `train.seeds[0]`).
/// Every other BS donates its pre-shift model. Each requester adapts when
/// `force` is set or when the detector fires on its shifted stream.
pub fn cmd_adapt(cfg: &ExperimentConfig, out: &Path, scenario: &str, force: bool) -> Result<(Vec<AdaptRow>, AdaptSummary)> {
    cfg.validate()?;
    let hash = cfg.hash();
    let sc = Scenario::parse(scenario, cfg.dataset.n_bs())?;
    let dir = mkdir(&out.join("adapt").join(&sc.name))?;
    let seed = cfg.train.seeds[0];
    let scale = cfg.model_spec().input_scale();
    let mut fleet = Vec::new();
    for bs in cfg.bs_ids() {
        let (model, card) = load_model(out, bs, seed)?;
        fleet.push((model, card));
    }
    let acfg = &cfg.adapt;
    let per_req = par_map(&sc.requesters, |bs| {
        let (own, card) = &fleet[bs - 1];
        let donors: Vec<Donor> = fleet
            .iter()
            .filter(|(_, c)| c.bs_id != bs)
            .map(|(m, c)| Donor { bs_id: c.bs_id, model: m.clone(), stats: c.stats.clone() })
            .collect();
        let shifted = Prepared::new(&load_split(out, bs, sc.split)?, &scale)?;
        let mut detector = ShiftDetector::new(card.reference_rmse, acfg.detect_ratio, acfg.detect_window)?;
        let trig = adapt::detect_shift(force, own, &shifted, &mut detector)?;
        let mut s = RequesterSummary {
            bs_id: bs,
            trigger: match trig {
                Some((Trigger::Explicit, _)) => "explicit",
                Some((Trigger::Detected, _)) => "detected",
                None => "none",
            }
            .into(),
            detected_after_frames: trig.filter(|t| t.0 == Trigger::Detected).map(|t| t.1),
            donor_ids: Vec::new(),
            gamma: Vec::new(),
            fine_tune_final_rmse: None,
            fine_tune_samples: None,
            fine_tune_flops: None,
            proposed_samples_to_reach: None,
            proposed_flops_to_reach: None,
            proposed_final_rmse: None,
            averaged_final_rmse: None,
            warnings: Vec::new(),
        };
        if trig.is_none() {
            return Ok((Vec::new(), s));
        }
        let report =
            adapt::adaptation_sweep(bs, own, Some(&card.stats), &shifted, &donors, acfg, &AdaptMethod::ALL)?;
        let ft = adapt::final_row(&report.rows, AdaptMethod::FineTune);
        s.donor_ids = report.donor_ids.clone();
        s.gamma = report.gamma.clone();
        s.fine_tune_final_rmse = ft.map(|r| r.rmse);
        s.fine_tune_samples = ft.map(|r| r.samples_used);
        s.fine_tune_flops = ft.map(|r| r.flops);
        if let Some(target) = s.fine_tune_final_rmse {
            let reach = adapt::cost_to_reach(&report.rows, AdaptMethod::Proposed, target);
            s.proposed_samples_to_reach = reach.map(|r| r.0);
            s.proposed_flops_to_reach = reach.map(|r| r.1);
        }
        s.proposed_final_rmse = adapt::final_row(&report.rows, AdaptMethod::Proposed).map(|r| r.rmse);
        s.averaged_final_rmse = adapt::final_row(&report.rows, AdaptMethod::Averaged).map(|r| r.rmse);
        s.warnings = report.warnings.clone();
        adapt::write_adapt_csv(&dir.join(format!("adapt_bs{bs}.csv")), &hash, &report.rows)?;
        Ok((report.rows, s))
    })?;
    let mut rows = Vec::new();
    let mut requesters = Vec::new();
    for (r, s) in per_req {
        rows.extend(r);
        requesters.push(s);
    }
    adapt::write_adapt_csv(&dir.join("adapt.csv"), &hash, &rows)?;
    write_adapt_plots(&dir, &hash, &rows)?;
    let summary = AdaptSummary { config_hash: hash, scenario: sc.name.clone(), requesters };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((rows, summary))
}

fn write_adapt_plots(dir: &Path, hash: &str, rows: &[AdaptRow]) -> Result<()> {
    let mut bss: Vec<usize> = rows.iter().map(|r| r.bs_id).collect();
    bss.dedup();
    let mut by_samples = Vec::new();
    let mut by_flops = Vec::new();
    for &bs in &bss {
        for m in AdaptMethod::ALL {
            let mine: Vec<&AdaptRow> = rows.iter().filter(|r| r.bs_id == bs && r.method == m).collect();
            let Some(top) = mine.iter().map(|r| r.samples_used).max() else { continue };
            let mut budgets: Vec<usize> = mine.iter().map(|r| r.samples_used).collect();
            budgets.dedup();
            let finals: Vec<&AdaptRow> = budgets
                .iter()
                .filter_map(|&b| mine.iter().filter(|r| r.samples_used == b).max_by_key(|r| r.epoch).copied())
                .collect();
            let label = format!("bs{bs} {}", m.name());
            by_samples.push(Series {
                label: label.clone(),
                x: finals.iter().map(|r| r.samples_used as f64).collect(),
                y: finals.iter().map(|r| r.rmse).collect(),
            });
            let curve: Vec<&&AdaptRow> = mine.iter().filter(|r| r.samples_used == top).collect();
            by_flops.push(Series {
                label,
                x: curve.iter().map(|r| r.flops as f64).collect(),
                y: curve.iter().map(|r| r.rmse).collect(),
            });
        }
    }
    let plot = |figure: &str, x_label: &str, series| PlotData {
        config_hash: hash.to_string(),
        figure: figure.into(),
        x_label: x_label.into(),
        y_label: "holdout RMSE (dB)".into(),
        series,
    };
    write_json(&dir.join("plot_rmse_vs_samples.json"), &plot("final RMSE versus adaptation samples", "samples used", by_samples))?;
    write_json(&dir.join("plot_rmse_vs_flops.json"), &plot("RMSE versus cumulative FLOPs", "FLOPs", by_flops))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacOutput {
    pub config_hash: String,
    #[serde(flatten)]
    pub report: pac::PacReport,
}

pub fn cmd_pac(cfg: &ExperimentConfig, out: &Path) -> Result<PacOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = mkdir(&out.join("pac"))?;
    let report = thread_pool()?.install(|| pac::run_pac(&cfg.pac))?;
    let output = PacOutput { config_hash: hash.clone(), report };
    write_json(&dir.join("pac_report.json"), &output)?;
    let r = &output.report;
    let mut classes = vec![&r.default_class];
    classes.extend(&r.random_classes);
    let series = vec![
        Series {
            label: "restricted class size".into(),
            x: r.restricted_sizes.iter().map(|p| p.0).collect(),
            y: r.restricted_sizes.iter().map(|p| p.1 as f64).collect(),
        },
    ];
    write_json(
        &dir.join("plot_restricted_class.json"),
        &PlotData { config_hash: hash.clone(), figure: "|restricted class| versus epsilon0".into(), x_label: "epsilon0".into(), y_label: "hypotheses".into(), series },
    )?;
    let idx: Vec<f64> = (0..classes.len()).map(|i| i as f64).collect();
    let rate = |label: &str, f: fn(&pac::ClassReport) -> f64| Series {
        label: label.into(),
        x: idx.clone(),
        y: classes.iter().map(|c| f(c)).collect(),
    };
    write_json(
        &dir.join("plot_success_rates.json"),
        &PlotData {
            config_hash: hash,
            figure: "success rate per planted configuration".into(),
            x_label: "configuration".into(),
            y_label: "success rate".into(),
            series: vec![
                rate("lexicographic", |c| c.success_lexicographic),
                rate("worst case", |c| c.success_worst_case),
                rate("no physics filter, lexicographic", |c| c.unfiltered_success_lexicographic),
                rate("no physics filter, worst case", |c| c.unfiltered_success_worst_case),
            ],
        },
    )?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_and_unknown_keys_fail() {
        let cfg = ExperimentConfig::from_json(r#"{"schema": 1}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert!(ExperimentConfig::from_json(r#"{"schema": 1, "bogus": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema": 1, "train": {"lr": 0.1, "momentum": 0.9}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"seed": 3}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap().hash(), a.hash());
    }

    #[test]
    fn scenarios_parse() {
        let s = Scenario::parse("val1-bs45", 5).unwrap();
        assert_eq!((s.split, s.requesters), (Split::Val1, vec![4, 5]));
        assert_eq!(Scenario::parse("val2-bs2", 5).unwrap().requesters, vec![2]);
        assert_eq!(Scenario::parse("val1-bs1,5", 5).unwrap().requesters, vec![1, 5]);
        assert!(Scenario::parse("val1-bs6", 5).is_err());
        assert!(Scenario::parse("train-bs1", 5).is_err());
        assert!(Scenario::parse("nonsense", 5).is_err());
    }
}
