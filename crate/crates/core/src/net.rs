//! Multi-modal RSS predictor with hand-written reverse-mode gradients.
//!
//! Four modality encoders (two tanh dense layers each) are concatenated and
//! fused into the feature `f`. A shared head maps `[f || e_n]` for every
//! receiver embedding `e_n` through three dense layers to four nonnegative
//! outputs: reflection gain, blockage attenuation, reflection bound and
//! blockage floor, all in dB.
//!
//! All parameters live in one flat vector so that snapshots, aggregation and
//! optimizer state are plain slices.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureBlock, FeatureConfig, FeatureNorm};
use crate::seed::{self, tag};

pub const SNAPSHOT_SCHEMA: u32 = 1;
pub const N_HEADS: usize = 4;
pub const HEAD_REFLECTION: usize = 0;
pub const HEAD_BLOCKAGE: usize = 1;
pub const HEAD_RBAR: usize = 2;
pub const HEAD_B: usize = 3;
pub const MODALITIES: [&str; 4] = ["lidar", "radar", "gps", "camera"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub encoder_hidden: usize,
    pub fused_dim: usize,
    pub head_hidden: usize,
    pub embedding_dim: usize,
    /// Heads are `head_scale_db * softplus(z)`.
    pub head_scale_db: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { encoder_hidden: 32, fused_dim: 64, head_hidden: 64, embedding_dim: 8, head_scale_db: 10.0 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.encoder_hidden, self.fused_dim, self.head_hidden, self.embedding_dim].contains(&0) {
            return Err(Error::Config("network widths must be > 0".into()));
        }
        if !(self.head_scale_db > 0.0 && self.head_scale_db.is_finite()) {
            return Err(Error::Config("head_scale_db must be > 0".into()));
        }
        Ok(())
    }
}

/// What the predicted components are added to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Anchor {
    /// The geometric direct-path level supplied per receiver.
    RLos,
    /// A learned-free constant level.
    Constant { dbm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Weights (row-major `rows x cols`) followed by `cols` biases.
    pub offset: usize,
}

impl Dense {
    fn w_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }

    fn b_range(&self) -> std::ops::Range<usize> {
        let o = self.offset + self.rows * self.cols;
        o..o + self.cols
    }

    pub fn macs(&self) -> usize {
        self.rows * self.cols
    }
}

const FUSE: usize = 8;
const H1: usize = 9;
const H2: usize = 10;
const H3: usize = 11;

fn enc(m: usize, layer: usize) -> usize {
    2 * m + layer
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub input_dims: [usize; 4],
    pub n_receivers: usize,
    pub config: NetConfig,
    pub dense: Vec<Dense>,
    pub embedding_offset: usize,
    pub n_params: usize,
}

impl Layout {
    pub fn new(input_dims: [usize; 4], n_receivers: usize, config: NetConfig) -> Result<Layout> {
        config.validate()?;
        if input_dims.contains(&0) || n_receivers == 0 {
            return Err(Error::Config("network inputs and receiver count must be > 0".into()));
        }
        let h = config.encoder_hidden;
        let mut shapes = Vec::new();
        for (m, &d) in input_dims.iter().enumerate() {
            shapes.push((format!("{}_1", MODALITIES[m]), d, h));
            shapes.push((format!("{}_2", MODALITIES[m]), h, h));
        }
        shapes.push(("fuse".to_string(), 4 * h, config.fused_dim));
        shapes.push(("head_1".to_string(), config.fused_dim + config.embedding_dim, config.head_hidden));
        shapes.push(("head_2".to_string(), config.head_hidden, config.head_hidden));
        shapes.push(("head_3".to_string(), config.head_hidden, N_HEADS));
        let mut offset = 0;
        let mut dense = Vec::new();
        for (name, rows, cols) in shapes {
            dense.push(Dense { name, rows, cols, offset });
            offset += rows * cols + cols;
        }
        let embedding_offset = offset;
        let n_params = offset + n_receivers * config.embedding_dim;
        Ok(Layout { input_dims, n_receivers, config, dense, embedding_offset, n_params })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dims.iter().sum()
    }

    fn input_cols(&self, m: usize) -> std::ops::Range<usize> {
        let start: usize = self.input_dims[..m].iter().sum();
        start..start + self.input_dims[m]
    }

    /// Multiply-accumulates of one forward pass for one frame, counting the
    /// head once per receiver.
    pub fn forward_macs(&self) -> usize {
        let head: usize = self.dense[H1..=H3].iter().map(Dense::macs).sum();
        self.trunk_macs() + self.n_receivers * head
    }

    /// Encoders plus fusion layer, per frame.
    pub fn trunk_macs(&self) -> usize {
        self.dense[..=FUSE].iter().map(Dense::macs).sum()
    }
}

pub fn input_dims(cfg: &FeatureConfig) -> [usize; 4] {
    let g2 = cfg.bev_size * cfg.bev_size;
    [g2, 4 * cfg.radar_points, 3 * cfg.gps_slots, g2]
}

/// Per-column multipliers turning a flattened feature block into network
/// input, matching [`FeatureBlock::network_input`].
pub fn input_scale(cfg: &FeatureConfig, norm: &FeatureNorm) -> Vec<f64> {
    let g2 = cfg.bev_size * cfg.bev_size;
    let mut v = vec![1.0; g2];
    for _ in 0..cfg.radar_points {
        v.extend_from_slice(&[1.0 / norm.x_m, 1.0 / norm.y_m, 1.0 / norm.speed_mps, 1.0 / norm.height_m]);
    }
    for _ in 0..cfg.gps_slots {
        v.extend_from_slice(&[1.0 / norm.x_m, 1.0 / norm.y_m, 1.0 / norm.speed_mps]);
    }
    v.extend(std::iter::repeat_n(1.0, g2));
    v
}

/// `2 x MACs x 3 x batch`: multiply and add per MAC, backward taken as twice
/// the forward cost.
pub fn flops_estimate(layout: &Layout, batch: usize) -> u64 {
    dense_flops(layout.forward_macs(), batch)
}

pub fn dense_flops(macs: usize, batch: usize) -> u64 {
    2 * macs as u64 * 3 * batch as u64
}

/// Forward-only cost, used for inference passes.
pub fn inference_flops(layout: &Layout, batch: usize) -> u64 {
    2 * layout.forward_macs() as u64 * batch as u64
}

/// Forward cost of the trunk alone, which is all a fused-feature pass needs.
pub fn encoder_flops(layout: &Layout, batch: usize) -> u64 {
    2 * layout.trunk_macs() as u64 * batch as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layout: Layout,
    pub params: Vec<f64>,
    pub norm: FeatureNorm,
    pub anchor: Anchor,
}

/// Activations kept for the backward pass.
pub struct Tape {
    pub batch: usize,
    x: Array2<f64>,
    enc1: Vec<Array2<f64>>,
    enc2: Vec<Array2<f64>>,
    concat: Array2<f64>,
    /// Fused features, `batch x fused_dim`.
    pub fused: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    z3: Array2<f64>,
    /// Head outputs, `(batch * n_receivers) x 4`, frame-major.
    pub heads: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub rss_hat_dbm: Vec<f64>,
    /// Per receiver `[reflection, blockage, rbar, b]`.
    pub heads: Vec<[f64; 4]>,
    pub fused_feature: Vec<f64>,
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn tanh_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(f64::tanh);
}

fn affine(x: &ArrayView2<f64>, w: ArrayView2<f64>, b: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), w.ncols()));
    for mut row in out.rows_mut() {
        row.as_slice_mut().unwrap().copy_from_slice(b);
    }
    general_mat_mul(1.0, x, &w, 1.0, &mut out);
    out
}

impl Model {
    /// Xavier-uniform weights, zero biases, unit-variance uniform embeddings.
    pub fn new(layout: Layout, norm: FeatureNorm, anchor: Anchor, init_seed: u64) -> Model {
        let mut rng = seed::rng(init_seed, &[tag::INIT]);
        let mut params = vec![0.0; layout.n_params];
        for d in &layout.dense {
            let a = (6.0 / (d.rows + d.cols) as f64).sqrt();
            for p in &mut params[d.w_range()] {
                *p = rng.random_range(-a..a);
            }
        }
        let a = 3f64.sqrt();
        for p in &mut params[layout.embedding_offset..] {
            *p = rng.random_range(-a..a);
        }
        Model { layout, params, norm, anchor }
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    fn w(&self, i: usize) -> ArrayView2<'_, f64> {
        let d = &self.layout.dense[i];
        ArrayView2::from_shape((d.rows, d.cols), &self.params[d.w_range()]).unwrap()
    }

    fn b(&self, i: usize) -> &[f64] {
        &self.params[self.layout.dense[i].b_range()]
    }

    fn embedding(&self) -> ArrayView2<'_, f64> {
        let c = &self.layout.config;
        ArrayView2::from_shape((self.layout.n_receivers, c.embedding_dim), &self.params[self.layout.embedding_offset..])
            .unwrap()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.layout.input_dim() {
            return Err(Error::Contract(format!(
                "network input has {} columns, expected {}",
                x.ncols(),
                self.layout.input_dim()
            )));
        }
        Ok(())
    }

    fn trunk(&self, x: &ArrayView2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, Array2<f64>, Array2<f64>) {
        let h = self.layout.config.encoder_hidden;
        let mut enc1 = Vec::with_capacity(4);
        let mut enc2 = Vec::with_capacity(4);
        let mut concat = Array2::zeros((x.nrows(), 4 * h));
        for m in 0..4 {
            let xm = x.slice(s![.., self.layout.input_cols(m)]);
            let mut a1 = affine(&xm, self.w(enc(m, 0)), self.b(enc(m, 0)));
            tanh_inplace(&mut a1);
            let mut a2 = affine(&a1.view(), self.w(enc(m, 1)), self.b(enc(m, 1)));
            tanh_inplace(&mut a2);
            concat.slice_mut(s![.., m * h..(m + 1) * h]).assign(&a2);
            enc1.push(a1);
            enc2.push(a2);
        }
        let mut fused = affine(&concat.view(), self.w(FUSE), self.b(FUSE));
        tanh_inplace(&mut fused);
        (enc1, enc2, concat, fused)
    }

    /// Fused features only, `rows(x) x fused_dim`.
    pub fn fused_features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.trunk(&x).3)
    }

    /// Batched forward pass over normalized inputs (`batch x input_dim`).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(&x)?;
        let batch = x.nrows();
        let n = self.layout.n_receivers;
        let cfg = &self.layout.config;
        let (enc1, enc2, concat, fused) = self.trunk(&x);

        let w1 = self.w(H1);
        let (w1f, w1e) = (w1.slice(s![..cfg.fused_dim, ..]), w1.slice(s![cfg.fused_dim.., ..]));
        let a1 = fused.dot(&w1f);
        let e1 = affine(&self.embedding(), w1e, self.b(H1));
        let mut h1 = Array2::zeros((batch * n, cfg.head_hidden));
        for b in 0..batch {
            let ab = a1.row(b);
            let mut block = h1.slice_mut(s![b * n..(b + 1) * n, ..]);
            for (mut row, erow) in block.rows_mut().into_iter().zip(e1.rows()) {
                for ((o, &p), &q) in row.iter_mut().zip(ab.iter()).zip(erow.iter()) {
                    *o = (p + q).tanh();
                }
            }
        }
        let mut h2 = affine(&h1.view(), self.w(H2), self.b(H2));
        tanh_inplace(&mut h2);
        let z3 = affine(&h2.view(), self.w(H3), self.b(H3));
        let scale = cfg.head_scale_db;
        let heads = z3.mapv(|z| scale * softplus(z));
        Ok(Tape { batch, x: x.to_owned(), enc1, enc2, concat, fused, h1, h2, z3, heads })
    }

    /// Gradient of the loss with respect to every parameter, given
    /// `d loss / d heads` in the tape's `(batch * n_receivers) x 4` layout.
    pub fn backward(&self, tape: &Tape, d_heads: ArrayView2<f64>) -> Result<Vec<f64>> {
        let n = self.layout.n_receivers;
        let cfg = &self.layout.config;
        if d_heads.dim() != (tape.batch * n, N_HEADS) {
            return Err(Error::Contract(format!(
                "head gradient shape {:?}, expected {:?}",
                d_heads.dim(),
                (tape.batch * n, N_HEADS)
            )));
        }
        let mut g = vec![0.0; self.layout.n_params];
        let scale = cfg.head_scale_db;
        let dz3 = ndarray::Zip::from(&d_heads).and(&tape.z3).map_collect(|&d, &z| d * scale * sigmoid(z));

        let dh2 = self.dense_backward(&mut g, H3, &tape.h2.view(), &dz3, true);
        let dz2 = dh2 * tape.h2.mapv(|h| 1.0 - h * h);
        let dh1 = self.dense_backward(&mut g, H2, &tape.h1.view(), &dz2, true);
        let dz1 = dh1 * tape.h1.mapv(|h| 1.0 - h * h);

        // Split the first head layer into its fused and embedding parts.
        let mut da1 = Array2::zeros((tape.batch, cfg.head_hidden));
        let mut de1 = Array2::zeros((n, cfg.head_hidden));
        for b in 0..tape.batch {
            let block = dz1.slice(s![b * n..(b + 1) * n, ..]);
            da1.row_mut(b).assign(&block.sum_axis(Axis(0)));
            de1 += &block;
        }
        let d1 = self.layout.dense[H1].clone();
        {
            let (wpart, rest) = g[d1.offset..].split_at_mut(d1.rows * d1.cols);
            let mut gw = ArrayViewMut2::from_shape((d1.rows, d1.cols), wpart).unwrap();
            general_mat_mul(1.0, &tape.fused.t(), &da1, 0.0, &mut gw.slice_mut(s![..cfg.fused_dim, ..]));
            general_mat_mul(1.0, &self.embedding().t(), &de1, 0.0, &mut gw.slice_mut(s![cfg.fused_dim.., ..]));
            for (o, v) in rest[..d1.cols].iter_mut().zip(de1.sum_axis(Axis(0))) {
                *o = v;
            }
        }
        let w1 = self.w(H1);
        let demb = de1.dot(&w1.slice(s![cfg.fused_dim.., ..]).t());
        g[self.layout.embedding_offset..].copy_from_slice(demb.as_slice().unwrap());
        let df = da1.dot(&w1.slice(s![..cfg.fused_dim, ..]).t());

        let dzf = df * tape.fused.mapv(|h| 1.0 - h * h);
        let dconcat = self.dense_backward(&mut g, FUSE, &tape.concat.view(), &dzf, true);
        let h = cfg.encoder_hidden;
        for m in 0..4 {
            let dz = &dconcat.slice(s![.., m * h..(m + 1) * h]) * &tape.enc2[m].mapv(|v| 1.0 - v * v);
            let de = self.dense_backward(&mut g, enc(m, 1), &tape.enc1[m].view(), &dz, true);
            let dz = de * tape.enc1[m].mapv(|v| 1.0 - v * v);
            let xm = tape.x.slice(s![.., self.layout.input_cols(m)]);
            self.dense_backward(&mut g, enc(m, 0), &xm, &dz, false);
        }
        Ok(g)
    }

    /// Writes weight and bias gradients of layer `i` into `g`; returns the
    /// input gradient when asked.
    fn dense_backward(
        &self,
        g: &mut [f64],
        i: usize,
        input: &ArrayView2<f64>,
        dz: &Array2<f64>,
        want_input: bool,
    ) -> Array2<f64> {
        let d = &self.layout.dense[i];
        {
            let (wpart, rest) = g[d.offset..].split_at_mut(d.rows * d.cols);
            let mut gw = ArrayViewMut2::from_shape((d.rows, d.cols), wpart).unwrap();
            general_mat_mul(1.0, &input.t(), dz, 0.0, &mut gw);
            for (o, v) in rest[..d.cols].iter_mut().zip(dz.sum_axis(Axis(0))) {
                *o = v;
            }
        }
        if want_input {
            dz.dot(&self.w(i).t())
        } else {
            Array2::zeros((0, 0))
        }
    }

    /// Normalized network input for one feature block.
    pub fn input_row(&self, fb: &FeatureBlock) -> Vec<f64> {
        fb.network_input(&self.norm)
    }

    /// Single-frame prediction: `rss_hat = anchor + reflection - blockage`.
    pub fn predict(&self, fb: &FeatureBlock, r_los_dbm: &[f64]) -> Result<Prediction> {
        let n = self.layout.n_receivers;
        if r_los_dbm.len() != n {
            return Err(Error::Contract(format!("r_los has {} entries, expected {n}", r_los_dbm.len())));
        }
        let row = self.input_row(fb);
        let x = ArrayView2::from_shape((1, row.len()), &row).unwrap();
        let tape = self.forward_batch(x)?;
        let heads: Vec<[f64; 4]> = tape.heads.rows().into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect();
        let rss_hat_dbm = heads
            .iter()
            .zip(r_los_dbm)
            .map(|(h, &r)| self.anchor_value(r) + h[HEAD_REFLECTION] - h[HEAD_BLOCKAGE])
            .collect();
        Ok(Prediction { rss_hat_dbm, heads, fused_feature: tape.fused.row(0).to_vec() })
    }

    pub fn anchor_value(&self, r_los_dbm: f64) -> f64 {
        match self.anchor {
            Anchor::RLos => r_los_dbm,
            Anchor::Constant { dbm } => dbm,
        }
    }

    pub fn same_architecture(&self, other: &Model) -> bool {
        self.layout == other.layout
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = SnapshotHeader {
            schema: SNAPSHOT_SCHEMA,
            layout: self.layout.clone(),
            norm: self.norm,
            anchor: self.anchor,
        };
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + h.len() + 8 * self.params.len());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let bad = |m: &str| Error::Contract(format!("malformed snapshot: {m}"));
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: SnapshotHeader = serde_json::from_slice(body)?;
        if header.schema != SNAPSHOT_SCHEMA {
            return Err(bad(&format!("schema {} (expected {SNAPSHOT_SCHEMA})", header.schema)));
        }
        let expected = Layout::new(header.layout.input_dims, header.layout.n_receivers, header.layout.config.clone())?;
        if expected != header.layout {
            return Err(bad("layout does not match its shapes"));
        }
        let raw = &bytes[8 + hlen..];
        if raw.len() != 8 * expected.n_params {
            return Err(bad(&format!("{} parameter bytes, expected {}", raw.len(), 8 * expected.n_params)));
        }
        let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Model { layout: expected, params, norm: header.norm, anchor: header.anchor })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotHeader {
    schema: u32,
    layout: Layout,
    norm: FeatureNorm,
    anchor: Anchor,
}

pub fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `g` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(g);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= k);
    }
    norm
}
