//! Per-BS dataset generation and the JSON-lines record format.
//!
//! Each BS sees its own traffic and shadowing. Frames come in short
//! episodes: a fresh scene, optional buses, then constant-velocity motion.
//! VAL-1 swaps the home bus placement for a different region (concept
//! shift); VAL-2 keeps the home distribution and degrades the sensors
//! (covariate shift). Labels are never touched by the covariate path.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{compute_rss_map, ChannelConfig, ChannelParams, RssMap};
use crate::error::{Error, Result};
use crate::features::{apply_covariate_shift, extract_features, FeatureConfig};
use crate::scene::{advance_frame, apply_concept_shift, generate_scene, BlockerEdit, DomainShiftSpec, Scene, SceneConfig};
use crate::seed::{self, derive_seed, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val1,
    Val2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val1, Split::Val2];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val1 => "val1",
            Split::Val2 => "val2",
        }
    }

    fn stream(self) -> u64 {
        self as u64
    }
}

/// Where a BS's buses appear at home and under its VAL-1 shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsProfile {
    /// x range of bus centers in the home domain, or no buses.
    pub home_bus_x_m: Option<[f64; 2]>,
    pub val1_bus_x_m: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_frames: usize,
    pub val1_frames: usize,
    pub val2_frames: usize,
    pub episode_frames: usize,
    pub frame_dt_s: f64,
    pub buses_per_frame: usize,
    /// Bus extent along x, along y, and height. The default bus stands across the boresight.
    pub bus_size_m: [f64; 3],
    pub bs: Vec<BsProfile>,
    /// Facade layout seed shared by every BS.
    pub site_seed: u64,
    /// Sensor degradation applied to VAL-2.
    pub val2_shift: DomainShiftSpec,
}

pub const REGION_A: [f64; 2] = [15.0, 35.0];
pub const REGION_B: [f64; 2] = [45.0, 65.0];

impl Default for DatasetConfig {
    fn default() -> Self {
        let seen = BsProfile { home_bus_x_m: Some(REGION_A), val1_bus_x_m: REGION_B };
        let unseen = BsProfile { home_bus_x_m: None, val1_bus_x_m: REGION_A };
        DatasetConfig {
            train_frames: 800,
            val1_frames: 200,
            val2_frames: 400,
            episode_frames: 5,
            frame_dt_s: 0.3,
            buses_per_frame: 1,
            bus_size_m: [2.6, 12.0, 3.5],
            bs: vec![seen.clone(), seen.clone(), seen, unseen.clone(), unseen],
            site_seed: 11,
            val2_shift: DomainShiftSpec::sensor_degradation(),
        }
    }
}

impl DatasetConfig {
    pub fn frames(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_frames,
            Split::Val1 => self.val1_frames,
            Split::Val2 => self.val2_frames,
        }
    }

    pub fn n_bs(&self) -> usize {
        self.bs.len()
    }

    pub fn validate(&self, scene: &SceneConfig) -> Result<()> {
        if self.bs.is_empty() {
            return Err(Error::Config("at least one BS profile is required".into()));
        }
        if self.episode_frames == 0 || !(self.frame_dt_s >= 0.0) {
            return Err(Error::Config("episode_frames must be > 0 and frame_dt_s >= 0".into()));
        }
        if !self.val2_shift.kind.is_covariate() && self.val2_shift.kind != crate::scene::ShiftKind::None {
            return Err(Error::Config("val2_shift must be a covariate shift".into()));
        }
        let half = self.bus_size_m[0] / 2.0;
        for (i, p) in self.bs.iter().enumerate() {
            for r in p.home_bus_x_m.iter().chain(std::iter::once(&p.val1_bus_x_m)) {
                if !(r[0] <= r[1] && r[0] - half >= 0.0 && r[1] + half <= scene.area_x_m) {
                    return Err(Error::Config(format!("BS {} bus range {:?} leaves the area", i + 1, r)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub frame_id: u64,
    pub bs_id: usize,
    pub split: Split,
    /// Flattened feature block.
    pub features: Vec<f64>,
    pub rss_dbm: Vec<f64>,
    pub los_mask: Vec<bool>,
    pub r_los_dbm: Vec<f64>,
    pub r_los_prior_dbm: Vec<f64>,
    pub r_reflection_db: Vec<f64>,
    pub r_blockage_db: Vec<f64>,
    pub scene_hash: String,
    pub config_hash: String,
}

impl Record {
    pub fn n_receivers(&self) -> usize {
        self.rss_dbm.len()
    }

    pub fn rss_map(&self) -> RssMap {
        RssMap {
            rss_dbm: self.rss_dbm.clone(),
            los_mask: self.los_mask.clone(),
            r_los_dbm: self.r_los_dbm.clone(),
            r_los_prior_dbm: self.r_los_prior_dbm.clone(),
            r_reflection_db: self.r_reflection_db.clone(),
            r_blockage_db: self.r_blockage_db.clone(),
        }
    }
}

pub fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

pub fn scene_hash(scene: &Scene) -> Result<String> {
    Ok(hash_hex(scene.to_json()?.as_bytes()))
}

fn bus_edits(rng: &mut impl Rng, cfg: &DatasetConfig, scene: &SceneConfig, x_range: [f64; 2]) -> Vec<BlockerEdit> {
    let [sx, sy, height] = cfg.bus_size_m;
    let ymax = scene.area_y_m / 2.0 - sy / 2.0;
    (0..cfg.buses_per_frame)
        .map(|_| BlockerEdit::Add {
            center: [rng.random_range(x_range[0]..=x_range[1]), rng.random_range(-ymax..=ymax)],
            size: [sx, sy, height],
            velocity: [0.0, 0.0],
        })
        .collect()
}

/// Everything needed to regenerate one BS's data.
pub struct BsGenerator<'a> {
    pub bs_id: usize,
    pub base_seed: u64,
    pub scene: &'a SceneConfig,
    pub channel: &'a ChannelConfig,
    pub features: &'a FeatureConfig,
    pub data: &'a DatasetConfig,
    pub config_hash: &'a str,
}

impl BsGenerator<'_> {
    fn profile(&self) -> &BsProfile {
        &self.data.bs[self.bs_id - 1]
    }

    pub fn channel_params(&self) -> ChannelParams {
        let shadow_seed = derive_seed(self.base_seed, &[tag::SHADOW, self.bs_id as u64]);
        ChannelParams::new(self.scene, self.channel, shadow_seed)
    }

    /// First scene of an episode, buses included.
    pub fn episode_scene(&self, split: Split, episode: u64) -> Result<Scene> {
        let stream = [tag::EPISODE, self.bs_id as u64, split.stream(), episode];
        let cfg = SceneConfig {
            seed: derive_seed(self.base_seed, &stream),
            site_seed: self.data.site_seed,
            ..self.scene.clone()
        };
        let scene = generate_scene(&cfg)?;
        let region = match split {
            Split::Val1 => Some(self.profile().val1_bus_x_m),
            Split::Train | Split::Val2 => self.profile().home_bus_x_m,
        };
        match region {
            None => Ok(scene),
            Some(r) => {
                let mut rng = seed::rng(self.base_seed, &[tag::SHIFT, self.bs_id as u64, split.stream(), episode]);
                let edits = bus_edits(&mut rng, self.data, self.scene, r);
                apply_concept_shift(&scene, &DomainShiftSpec::blockage(edits))
            }
        }
    }

    pub fn generate(&self, split: Split) -> Result<Vec<Record>> {
        let params = self.channel_params();
        let n = self.data.frames(split);
        let per = self.data.episode_frames;
        let mut out = Vec::with_capacity(n);
        let mut scene = None;
        for frame in 0..n {
            let episode = (frame / per) as u64;
            let s = if frame % per == 0 {
                self.episode_scene(split, episode)?
            } else {
                let motion = derive_seed(self.base_seed, &[tag::MOTION, self.bs_id as u64, split.stream(), frame as u64]);
                advance_frame(scene.as_ref().unwrap(), self.data.frame_dt_s, motion)
            };
            let map = compute_rss_map(&s, &params)?;
            let mut fb = extract_features(&s, self.features);
            if split == Split::Val2 {
                let noise = derive_seed(self.base_seed, &[tag::NOISE, self.bs_id as u64, frame as u64]);
                fb = apply_covariate_shift(&fb, &self.data.val2_shift, noise)?;
            }
            out.push(Record {
                frame_id: frame as u64,
                bs_id: self.bs_id,
                split,
                features: fb.flatten(),
                rss_dbm: map.rss_dbm,
                los_mask: map.los_mask,
                r_los_dbm: map.r_los_dbm,
                r_los_prior_dbm: map.r_los_prior_dbm,
                r_reflection_db: map.r_reflection_db,
                r_blockage_db: map.r_blockage_db,
                scene_hash: scene_hash(&s)?,
                config_hash: self.config_hash.to_string(),
            });
            scene = Some(s);
        }
        Ok(out)
    }
}

pub fn dataset_file_name(bs_id: usize, split: Split) -> String {
    format!("bs{bs_id}_{}.jsonl", split.name())
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingDataset(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig { train_frames: 12, val1_frames: 6, val2_frames: 6, episode_frames: 4, ..DatasetConfig::default() }
    }

    fn generator<'a>(
        bs_id: usize,
        scene: &'a SceneConfig,
        ch: &'a ChannelConfig,
        f: &'a FeatureConfig,
        d: &'a DatasetConfig,
    ) -> BsGenerator<'a> {
        BsGenerator { bs_id, base_seed: 5, scene, channel: ch, features: f, data: d, config_hash: "x" }
    }

    #[test]
    fn records_are_deterministic_and_decompose() {
        let (s, c, f, d) = (SceneConfig::default(), ChannelConfig::default(), FeatureConfig::default(), small());
        let g = generator(1, &s, &c, &f, &d);
        for split in Split::ALL {
            let a = g.generate(split).unwrap();
            assert_eq!(a.len(), d.frames(split));
            assert_eq!(a, g.generate(split).unwrap());
            for r in &a {
                assert_eq!(r.features.len(), f.flat_len());
                for i in 0..r.n_receivers() {
                    let sum = r.r_los_dbm[i] + r.r_reflection_db[i] - r.r_blockage_db[i];
                    assert!((sum - r.rss_dbm[i]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn val2_labels_match_clean_scenes() {
        let (s, c, f, d) = (SceneConfig::default(), ChannelConfig::default(), FeatureConfig::default(), small());
        let g = generator(2, &s, &c, &f, &d);
        let val2 = g.generate(Split::Val2).unwrap();
        // Rebuild the clean labels frame by frame; the covariate path must not move them.
        let params = g.channel_params();
        let first = g.episode_scene(Split::Val2, 0).unwrap();
        let clean = compute_rss_map(&first, &params).unwrap();
        assert_eq!(val2[0].rss_dbm, clean.rss_dbm);
        let fb = extract_features(&first, &f).flatten();
        assert_ne!(val2[0].features, fb);
    }

    #[test]
    fn bus_placement_follows_profile() {
        let (s, c, f, d) = (SceneConfig::default(), ChannelConfig::default(), FeatureConfig::default(), small());
        let seen = generator(1, &s, &c, &f, &d);
        let unseen = generator(4, &s, &c, &f, &d);
        let bus_x = |g: &BsGenerator, split| {
            g.episode_scene(split, 0)
                .unwrap()
                .blockers
                .iter()
                .filter(|b| b.height() >= 3.0 && b.size[1] >= 10.0)
                .map(|b| b.center[0])
                .collect::<Vec<_>>()
        };
        let x = bus_x(&seen, Split::Train);
        assert_eq!(x.len(), 1);
        assert!((15.0..=35.0).contains(&x[0]));
        assert!((45.0..=65.0).contains(&bus_x(&seen, Split::Val1)[0]));
        assert!(bus_x(&unseen, Split::Train).is_empty());
        assert!((15.0..=35.0).contains(&bus_x(&unseen, Split::Val1)[0]));
    }

    #[test]
    fn jsonl_roundtrip_and_missing_file() {
        let (s, c, f, d) = (SceneConfig::default(), ChannelConfig::default(), FeatureConfig::default(), small());
        let recs = generator(3, &s, &c, &f, &d).generate(Split::Val1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
        let missing = read_jsonl(&dir.path().join("nope.jsonl")).unwrap_err();
        assert!(matches!(missing, Error::MissingDataset(_)));
    }

    #[test]
    fn bad_bus_range_rejected() {
        let mut d = small();
        d.bs[0].val1_bus_x_m = [70.0, 79.0];
        assert!(d.validate(&SceneConfig::default()).is_err());
        assert!(small().validate(&SceneConfig::default()).is_ok());
    }
}
