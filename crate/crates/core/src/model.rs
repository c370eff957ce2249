//! Decoder-only transformer over the claims vocabulary.
//!
//! Pre-norm blocks (RMSNorm), rotary positions, grouped key/value attention,
//! SwiGLU feed-forward and an output projection tied to the input embedding.
//! All parameters live in one flat buffer described by a [`Layout`]; gradients
//! use the same layout so optimizers can treat both as plain vectors.
//!
//! Matrices are stored `[in, out]` so every projection is `y = x · W`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

/// Weight of the squared log-partition penalty.
pub const Z_LOSS_LAMBDA: f64 = 1e-4;

/// Examples per gradient shard. Shards are reduced in index order, so the
/// summed gradient does not depend on the thread count.
pub const GRAD_CHUNK: usize = 4;

pub const CKPT_MAGIC: &[u8; 8] = b"CCMODEL\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input of length {len} at offset {offset} exceeds max_positions {max}")]
    TooLong { len: usize, offset: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("empty input")]
    Empty,
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {tensor}")]
    NonFinite { tensor: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

fn default_theta() -> f64 {
    10_000.0
}

fn default_eps() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub seed: u64,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// CPU-trainable default.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 256,
            n_layers: 4,
            n_heads: 8,
            n_kv_heads: 4,
            ffn_size: 512,
            max_positions: 1024,
            vocab_size,
            seed: 0,
            rope_theta: default_theta(),
            norm_eps: default_eps(),
        }
    }

    /// Smallest useful shape, for tests and gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            n_kv_heads: 1,
            ffn_size: 16,
            max_positions: 16,
            vocab_size,
            seed: 0,
            rope_theta: default_theta(),
            norm_eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.n_kv_heads == 0 || self.ffn_size == 0 {
            return bad("sizes must be positive");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return bad("n_heads must be divisible by n_kv_heads");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.head_dim() % 2 != 0 {
            return bad("head dimension must be even for rotary encoding");
        }
        if self.max_positions < 16 {
            return bad("max_positions must be at least 16");
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps >= 0.0) {
            return bad("rope_theta and norm_eps must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_norm: usize,
    w_gate: usize,
    w_up: usize,
    w_down: usize,
}

/// Names, shapes and offsets of every tensor in the flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    total: usize,
    embed: usize,
    layers: Vec<LayerIdx>,
    final_norm: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset: total };
            total += spec.len();
            tensors.push(spec);
            tensors.len() - 1
        };
        let (d, f) = (cfg.d_model, cfg.ffn_size);
        let embed = push("embed".into(), vec![cfg.vocab_size, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIdx {
                attn_norm: push(n("attn_norm"), vec![d]),
                wq: push(n("wq"), vec![d, d]),
                wk: push(n("wk"), vec![d, cfg.kv_dim()]),
                wv: push(n("wv"), vec![d, cfg.kv_dim()]),
                wo: push(n("wo"), vec![d, d]),
                ffn_norm: push(n("ffn_norm"), vec![d]),
                w_gate: push(n("w_gate"), vec![d, f]),
                w_up: push(n("w_up"), vec![d, f]),
                w_down: push(n("w_down"), vec![f, d]),
            });
        }
        let final_norm = push("final_norm".into(), vec![d]);
        Layout { tensors, total, embed, layers, final_norm }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// The tensor holding flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&TensorSpec> {
        if i >= self.total {
            return None;
        }
        let k = self.tensors.partition_point(|t| t.offset <= i);
        self.tensors.get(k - 1)
    }
}

fn view<'a, T>(buf: &'a [T], spec: &TensorSpec) -> ArrayView2<'a, T> {
    let (r, c) = (spec.shape[0], spec.shape.get(1).copied().unwrap_or(1));
    ArrayView2::from_shape((r, c), &buf[spec.range()]).expect("layout shape")
}

fn view_mut<'a, T>(buf: &'a mut [T], spec: &TensorSpec) -> ArrayViewMut2<'a, T> {
    let (r, c) = (spec.shape[0], spec.shape.get(1).copied().unwrap_or(1));
    ArrayViewMut2::from_shape((r, c), &mut buf[spec.range()]).expect("layout shape")
}

/// Configuration plus the flat parameter buffer.
#[derive(Clone, Debug)]
pub struct ModelState<T: Scalar> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<T>,
}

impl<T: Scalar> PartialEq for ModelState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<T: Scalar> ModelState<T> {
    /// Normal(0, 0.02) weights, residual output projections scaled by
    /// 1/sqrt(2L), unit norm gains. Drawn in layout order from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut st = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(st.config.seed);
        let base = 0.02;
        let resid = base / (2.0 * st.config.n_layers as f64).sqrt();
        for spec in &st.layout.tensors {
            let buf = &mut st.params[spec.range()];
            if spec.shape.len() == 1 {
                buf.fill(T::one());
                continue;
            }
            let std = if spec.name.ends_with(".wo") || spec.name.ends_with(".w_down") { resid } else { base };
            let dist = Normal::new(0.0, std).expect("positive std");
            for p in buf {
                *p = T::of(dist.sample(&mut rng));
            }
        }
        Ok(st)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![T::zero(); layout.total()];
        Ok(ModelState { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total() {
            return Err(ModelError::Shape(format!("{} parameters for a layout of {}", params.len(), layout.total())));
        }
        Ok(ModelState { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|s| &self.params[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.get(name)?.range();
        Some(&mut self.params[r])
    }

    /// The shared `[|V|, d]` embedding; also the output projection.
    pub fn embedding(&self) -> ArrayView2<'_, T> {
        self.w(self.layout.embed)
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&p| U::of(p.f64())).collect(),
        }
    }

    fn w(&self, idx: usize) -> ArrayView2<'_, T> {
        view(&self.params, &self.layout.tensors[idx])
    }

    fn v1(&self, idx: usize) -> &[T] {
        &self.params[self.layout.tensors[idx].range()]
    }

    fn check_input(&self, ids: &[u32], offset: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::Empty);
        }
        if offset + ids.len() > self.config.max_positions {
            return Err(ModelError::TooLong { len: ids.len(), offset, max: self.config.max_positions });
        }
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::BadToken { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Logits for every position, `T × |V|`.
    pub fn forward(&self, ids: &[u32]) -> Result<Array2<T>> {
        self.check_input(ids, 0)?;
        let (hf, _) = self.run(ids, None, false);
        Ok(hf.dot(&self.embedding().t()))
    }

    /// Final-normed hidden states, `T × d`.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Array2<T>> {
        self.check_input(ids, 0)?;
        Ok(self.run(ids, None, false).0)
    }

    pub fn logits_from_hidden(&self, h: &[T]) -> Vec<T> {
        let e = self.embedding();
        e.rows().into_iter().map(|row| row.iter().zip(h).map(|(&a, &b)| a * b).sum()).collect()
    }

    fn run(&self, ids: &[u32], mut cache: Option<&mut KvCache<T>>, save: bool) -> (Array2<T>, Option<Trace<T>>) {
        let cfg = &self.config;
        let pos0 = cache.as_ref().map_or(0, |c| c.len);
        let e = self.embedding();
        let mut x = Array2::zeros((ids.len(), cfg.d_model));
        for (t, &id) in ids.iter().enumerate() {
            x.row_mut(t).assign(&e.row(id as usize));
        }
        let rope = Rope::new(pos0, ids.len(), cfg.head_dim(), cfg.rope_theta);
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let kv = cache.as_mut().map(|c| (&mut c.k[l], &mut c.v[l], c.len));
            let (out, lc) = layer_forward(self, l, x, &rope, kv, save);
            x = out;
            if let Some(lc) = lc {
                layers.push(lc);
            }
        }
        if let Some(c) = cache {
            c.len += ids.len();
        }
        let (hf, rf) = rmsnorm(&x, self.v1(self.layout.final_norm), T::of(cfg.norm_eps));
        let trace = save.then(|| Trace { layers, xf: x, rf, hf: hf.clone(), rope });
        (hf, trace)
    }

    /// Writes the versioned checkpoint: magic, version, header length, JSON
    /// header, then little-endian tensor data in layout order.
    pub fn save<W: Write>(&self, mut w: W, meta: &BTreeMap<String, String>) -> Result<()> {
        let header = CkptHeader {
            dtype: T::DTYPE.to_string(),
            config: self.config.clone(),
            tensors: self.layout.tensors.clone(),
            meta: meta.clone(),
        };
        let hj = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(hj.len() as u64).to_le_bytes())?;
        w.write_all(&hj)?;
        let mut buf = Vec::with_capacity(self.params.len() * T::BYTES);
        for &p in &self.params {
            p.write_le(&mut buf);
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written in either precision, converting to `T`.
    pub fn load<R: Read>(mut r: R) -> Result<(Self, BTreeMap<String, String>)> {
        let ck = |m: String| ModelError::Checkpoint(m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(ck("not a model checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CKPT_VERSION {
            return Err(ck(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        if hlen > 1 << 26 {
            return Err(ck("header too large".into()));
        }
        let mut hj = vec![0u8; hlen];
        r.read_exact(&mut hj)?;
        let header: CkptHeader = serde_json::from_slice(&hj).map_err(|e| ck(e.to_string()))?;
        header.config.validate()?;
        let layout = Layout::new(&header.config);
        if header.tensors != layout.tensors {
            return Err(ck("tensor table does not match config".into()));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let params: Vec<T> = match header.dtype.as_str() {
            "f32" => decode::<f32, T>(&data, layout.total())?,
            "f64" => decode::<f64, T>(&data, layout.total())?,
            other => return Err(ck(format!("unknown dtype {other}"))),
        };
        Ok((ModelState { config: header.config, layout, params }, header.meta))
    }
}

fn decode<S: Scalar, T: Scalar>(data: &[u8], n: usize) -> Result<Vec<T>> {
    if data.len() != n * S::BYTES {
        return Err(ModelError::Checkpoint(format!("expected {} data bytes, found {}", n * S::BYTES, data.len())));
    }
    Ok(data.chunks_exact(S::BYTES).map(|c| T::of(S::read_le(c).f64())).collect())
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorSpec>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

// ---------------------------------------------------------------------------
// kernels

struct Rope<T> {
    cos: Array2<T>,
    sin: Array2<T>,
}

impl<T: Scalar> Rope<T> {
    fn new(pos0: usize, n: usize, hd: usize, theta: f64) -> Self {
        let half = hd / 2;
        let mut cos = Array2::zeros((n, half));
        let mut sin = Array2::zeros((n, half));
        for t in 0..n {
            for i in 0..half {
                let inv = theta.powf(-2.0 * i as f64 / hd as f64);
                let a = (pos0 + t) as f64 * inv;
                cos[[t, i]] = T::of(a.cos());
                sin[[t, i]] = T::of(a.sin());
            }
        }
        Rope { cos, sin }
    }

    /// Rotate-half rotation of every head in place; `inverse` rotates back,
    /// which is also the adjoint used in the backward pass.
    fn rotate(&self, x: &mut Array2<T>, heads: usize, inverse: bool) {
        let half = self.cos.ncols();
        let hd = 2 * half;
        for (t, mut row) in x.outer_iter_mut().enumerate() {
            for h in 0..heads {
                let b = h * hd;
                for i in 0..half {
                    let (c, mut s) = (self.cos[[t, i]], self.sin[[t, i]]);
                    if inverse {
                        s = -s;
                    }
                    let (x1, x2) = (row[b + i], row[b + i + half]);
                    row[b + i] = x1 * c - x2 * s;
                    row[b + i + half] = x1 * s + x2 * c;
                }
            }
        }
    }
}

fn rmsnorm<T: Scalar>(x: &Array2<T>, g: &[T], eps: T) -> (Array2<T>, Vec<T>) {
    let d = T::of(x.ncols() as f64);
    let mut out = Array2::zeros(x.raw_dim());
    let mut rs = Vec::with_capacity(x.nrows());
    for (row, mut o) in x.outer_iter().zip(out.outer_iter_mut()) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / d;
        let r = T::one() / (ms + eps).sqrt();
        for ((o, &v), &g) in o.iter_mut().zip(row.iter()).zip(g) {
            *o = v * r * g;
        }
        rs.push(r);
    }
    (out, rs)
}

/// Accumulates into `dx` and `dg`.
fn rmsnorm_back<T: Scalar>(x: &Array2<T>, rs: &[T], g: &[T], dy: &Array2<T>, dx: &mut Array2<T>, dg: &mut [T]) {
    let d = T::of(x.ncols() as f64);
    for (t, &r) in rs.iter().enumerate() {
        let (xr, dyr) = (x.row(t), dy.row(t));
        let mut dot = T::zero();
        for j in 0..g.len() {
            dg[j] = dg[j] + xr[j] * r * dyr[j];
            dot = dot + g[j] * dyr[j] * xr[j];
        }
        let k = r * r * r * dot / d;
        let mut dxr = dx.row_mut(t);
        for j in 0..g.len() {
            dxr[j] = dxr[j] + r * g[j] * dyr[j] - xr[j] * k;
        }
    }
}

fn sigmoid<T: Scalar>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}

/// Causal multi-head attention of `q` (new positions) against `k`/`v`
/// (all positions, the last `q.nrows()` of which are the new ones).
fn attend<T: Scalar>(
    cfg: &ModelConfig,
    q: &Array2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    offset: usize,
    save: bool,
) -> (Array2<T>, Vec<Array2<T>>) {
    let (h, hd) = (cfg.n_heads, cfg.head_dim());
    let rep = cfg.n_heads / cfg.n_kv_heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut o = Array2::zeros((q.nrows(), cfg.d_model));
    let mut probs = Vec::new();
    for head in 0..h {
        let g = head / rep;
        let qs = s![.., head * hd..(head + 1) * hd];
        let ks = s![.., g * hd..(g + 1) * hd];
        let mut p = q.slice(qs).dot(&k.slice(ks).t());
        for (i, mut row) in p.outer_iter_mut().enumerate() {
            let lim = offset + i;
            let mut m = T::neg_infinity();
            for j in 0..=lim {
                row[j] = row[j] * scale;
                m = m.max(row[j]);
            }
            let mut z = T::zero();
            for j in 0..=lim {
                row[j] = (row[j] - m).exp();
                z = z + row[j];
            }
            for j in 0..row.len() {
                row[j] = if j <= lim { row[j] / z } else { T::zero() };
            }
        }
        o.slice_mut(qs).assign(&p.dot(&v.slice(ks)));
        if save {
            probs.push(p);
        }
    }
    (o, probs)
}

struct LayerCache<T> {
    x: Array2<T>,
    r1: Vec<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    p: Vec<Array2<T>>,
    o: Array2<T>,
    x2: Array2<T>,
    r2: Vec<T>,
    h2: Array2<T>,
    a: Array2<T>,
    b: Array2<T>,
    u: Array2<T>,
}

struct Trace<T> {
    layers: Vec<LayerCache<T>>,
    xf: Array2<T>,
    rf: Vec<T>,
    hf: Array2<T>,
    rope: Rope<T>,
}

type KvSlot<'a, T> = (&'a mut Vec<T>, &'a mut Vec<T>, usize);

fn layer_forward<T: Scalar>(
    st: &ModelState<T>,
    l: usize,
    x: Array2<T>,
    rope: &Rope<T>,
    kv: Option<KvSlot<'_, T>>,
    save: bool,
) -> (Array2<T>, Option<LayerCache<T>>) {
    let cfg = &st.config;
    let li = st.layout.layers[l];
    let eps = T::of(cfg.norm_eps);
    let n = x.nrows();
    let (h1, r1) = rmsnorm(&x, st.v1(li.attn_norm), eps);
    let mut q = h1.dot(&st.w(li.wq));
    let mut k = h1.dot(&st.w(li.wk));
    let v = h1.dot(&st.w(li.wv));
    rope.rotate(&mut q, cfg.n_heads, false);
    rope.rotate(&mut k, cfg.n_kv_heads, false);
    let (o, p) = match kv {
        Some((ck, cv, prefix)) => {
            ck.truncate(prefix * cfg.kv_dim());
            cv.truncate(prefix * cfg.kv_dim());
            ck.extend(k.iter().copied());
            cv.extend(v.iter().copied());
            let total = prefix + n;
            let kf = ArrayView2::from_shape((total, cfg.kv_dim()), &ck[..]).expect("cache shape");
            let vf = ArrayView2::from_shape((total, cfg.kv_dim()), &cv[..]).expect("cache shape");
            attend(cfg, &q, kf, vf, prefix, save)
        }
        None => attend(cfg, &q, k.view(), v.view(), 0, save),
    };
    let x2 = &x + &o.dot(&st.w(li.wo));
    let (h2, r2) = rmsnorm(&x2, st.v1(li.ffn_norm), eps);
    let a = h2.dot(&st.w(li.w_gate));
    let b = h2.dot(&st.w(li.w_up));
    let mut u = Array2::zeros(a.raw_dim());
    Zip::from(&mut u).and(&a).and(&b).for_each(|u, &a, &b| *u = a * sigmoid(a) * b);
    let out = &x2 + &u.dot(&st.w(li.w_down));
    let cache = save.then(|| LayerCache { x, r1, h1, q, k, v, p, o, x2, r2, h2, a, b, u });
    (out, cache)
}

/// `dW += xᵀ · dy` into the gradient buffer.
fn acc_outer<T: Scalar>(g: &mut [T], spec: &TensorSpec, x: &Array2<T>, dy: &Array2<T>) {
    let mut dw = view_mut(g, spec);
    general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut dw);
}

fn layer_backward<T: Scalar>(st: &ModelState<T>, l: usize, c: &LayerCache<T>, dx: Array2<T>, rope: &Rope<T>, g: &mut [T]) -> Array2<T> {
    let cfg = &st.config;
    let li = st.layout.layers[l];
    let ts = &st.layout.tensors;
    let n = dx.nrows();

    // feed-forward branch
    let du = dx.dot(&st.w(li.w_down).t());
    acc_outer(g, &ts[li.w_down], &c.u, &dx);
    let mut da = Array2::zeros(c.a.raw_dim());
    let mut db = Array2::zeros(c.b.raw_dim());
    Zip::from(&mut da).and(&mut db).and(&du).and(&c.a).and(&c.b).for_each(|da, db, &du, &a, &b| {
        let s = sigmoid(a);
        *db = du * a * s;
        *da = du * b * s * (T::one() + a * (T::one() - s));
    });
    acc_outer(g, &ts[li.w_gate], &c.h2, &da);
    acc_outer(g, &ts[li.w_up], &c.h2, &db);
    let mut dh2 = da.dot(&st.w(li.w_gate).t());
    general_mat_mul(T::one(), &db, &st.w(li.w_up).t(), T::one(), &mut dh2);
    let mut dx2 = dx;
    rmsnorm_back(&c.x2, &c.r2, st.v1(li.ffn_norm), &dh2, &mut dx2, &mut g[ts[li.ffn_norm].range()]);

    // attention branch
    acc_outer(g, &ts[li.wo], &c.o, &dx2);
    let d_o = dx2.dot(&st.w(li.wo).t());
    let hd = cfg.head_dim();
    let rep = cfg.n_heads / cfg.n_kv_heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dq = Array2::zeros((n, cfg.d_model));
    let mut dk = Array2::zeros((n, cfg.kv_dim()));
    let mut dv = Array2::zeros((n, cfg.kv_dim()));
    for head in 0..cfg.n_heads {
        let gi = head / rep;
        let qs = s![.., head * hd..(head + 1) * hd];
        let ks = s![.., gi * hd..(gi + 1) * hd];
        let p = &c.p[head];
        let doh = d_o.slice(qs);
        let mut ds = doh.dot(&c.v.slice(ks).t());
        general_mat_mul(T::one(), &p.t(), &doh, T::one(), &mut dv.slice_mut(ks));
        for (mut dsr, pr) in ds.outer_iter_mut().zip(p.outer_iter()) {
            let dot: T = dsr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in dsr.iter_mut().zip(pr.iter()) {
                *d = pv * (*d - dot) * scale;
            }
        }
        general_mat_mul(T::one(), &ds, &c.k.slice(ks), T::one(), &mut dq.slice_mut(qs));
        general_mat_mul(T::one(), &ds.t(), &c.q.slice(qs), T::one(), &mut dk.slice_mut(ks));
    }
    rope.rotate(&mut dq, cfg.n_heads, true);
    rope.rotate(&mut dk, cfg.n_kv_heads, true);
    acc_outer(g, &ts[li.wq], &c.h1, &dq);
    acc_outer(g, &ts[li.wk], &c.h1, &dk);
    acc_outer(g, &ts[li.wv], &c.h1, &dv);
    let mut dh1 = dq.dot(&st.w(li.wq).t());
    general_mat_mul(T::one(), &dk, &st.w(li.wk).t(), T::one(), &mut dh1);
    general_mat_mul(T::one(), &dv, &st.w(li.wv).t(), T::one(), &mut dh1);
    let mut dxin = dx2;
    rmsnorm_back(&c.x, &c.r1, st.v1(li.attn_norm), &dh1, &mut dxin, &mut g[ts[li.attn_norm].range()]);
    dxin
}

fn backward<T: Scalar>(st: &ModelState<T>, ids: &[u32], tr: &Trace<T>, dlogits: &Array2<T>, g: &mut [T]) {
    let lay = &st.layout;
    let espec = &lay.tensors[lay.embed];
    acc_outer(g, espec, dlogits, &tr.hf);
    let dhf = dlogits.dot(&st.embedding());
    let mut dx = Array2::zeros(tr.xf.raw_dim());
    let fr = lay.tensors[lay.final_norm].range();
    rmsnorm_back(&tr.xf, &tr.rf, st.v1(lay.final_norm), &dhf, &mut dx, &mut g[fr]);
    for l in (0..st.config.n_layers).rev() {
        dx = layer_backward(st, l, &tr.layers[l], dx, &tr.rope, g);
    }
    let d = st.config.d_model;
    for (t, &id) in ids.iter().enumerate() {
        let row = &mut g[espec.offset + id as usize * d..][..d];
        for (a, &b) in row.iter_mut().zip(dx.row(t)) {
            *a = *a + b;
        }
    }
}

// ---------------------------------------------------------------------------
// loss

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub ce: T,
    pub z: T,
    pub total: T,
    pub n_positions: usize,
}

/// Sums of CE and squared log-partition over masked rows; when `dlogits` is
/// given it receives the gradient of `(ce + λ·z) / denom`.
fn loss_rows<T: Scalar>(
    logits: ArrayView2<T>,
    targets: &[u32],
    mask: &[bool],
    lambda: f64,
    denom: f64,
    mut dlogits: Option<&mut Array2<T>>,
) -> (f64, f64, usize) {
    let (mut ce, mut z, mut n) = (0.0, 0.0, 0);
    for (t, row) in logits.outer_iter().enumerate() {
        if !mask[t] {
            continue;
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
        let lse = m + row.iter().map(|&v| (v.f64() - m).exp()).sum::<f64>().ln();
        let y = targets[t] as usize;
        ce += lse - row[y].f64();
        z += lse * lse;
        n += 1;
        if let Some(dl) = dlogits.as_deref_mut() {
            let mut dr = dl.row_mut(t);
            for (v, (d, &s)) in dr.iter_mut().zip(row.iter()).enumerate() {
                let p = (s.f64() - lse).exp();
                let onehot = if v == y { 1.0 } else { 0.0 };
                *d = T::of((p - onehot + 2.0 * lambda * lse * p) / denom);
            }
        }
    }
    (ce, z, n)
}

fn check_loss_shapes<T>(logits: &ArrayView2<T>, targets: &[u32], mask: &[bool]) -> Result<()> {
    if targets.len() != logits.nrows() || mask.len() != logits.nrows() {
        return Err(ModelError::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.nrows(),
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&id) = targets.iter().find(|&&y| y as usize >= logits.ncols()) {
        return Err(ModelError::BadToken { id, vocab: logits.ncols() });
    }
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::EmptyMask);
    }
    Ok(())
}

/// Cross-entropy plus z-loss (λ = [`Z_LOSS_LAMBDA`]), both averaged over the
/// masked positions.
pub fn loss<T: Scalar>(logits: ArrayView2<T>, targets: &[u32], mask: &[bool]) -> Result<LossBreakdown<T>> {
    loss_with(logits, targets, mask, Z_LOSS_LAMBDA)
}

pub fn loss_with<T: Scalar>(logits: ArrayView2<T>, targets: &[u32], mask: &[bool], lambda: f64) -> Result<LossBreakdown<T>> {
    check_loss_shapes(&logits, targets, mask)?;
    let (ce, z, n) = loss_rows(logits, targets, mask, lambda, 1.0, None);
    Ok(breakdown(ce, z, n, lambda))
}

/// Loss and its gradient with respect to the logits. Unmasked rows of the
/// gradient are exactly zero.
pub fn loss_and_grad<T: Scalar>(
    logits: ArrayView2<T>,
    targets: &[u32],
    mask: &[bool],
    lambda: f64,
) -> Result<(LossBreakdown<T>, Array2<T>)> {
    check_loss_shapes(&logits, targets, mask)?;
    let denom = mask.iter().filter(|&&m| m).count() as f64;
    let mut d = Array2::zeros(logits.raw_dim());
    let (ce, z, n) = loss_rows(logits, targets, mask, lambda, denom, Some(&mut d));
    Ok((breakdown(ce, z, n, lambda), d))
}

fn breakdown<T: Scalar>(ce_sum: f64, z_sum: f64, n: usize, lambda: f64) -> LossBreakdown<T> {
    let ce = T::of(ce_sum / n as f64);
    let z = T::of(lambda * z_sum / n as f64);
    LossBreakdown { ce, z, total: ce + z, n_positions: n }
}

/// One training sequence. `loss_mask[t]` supervises the prediction of
/// `ids[t]` from `ids[..t]`; entry 0 is ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TrainExample {
    /// Every next-token prediction supervised.
    pub fn full(ids: Vec<u32>) -> Self {
        let loss_mask = (0..ids.len()).map(|t| t > 0).collect();
        TrainExample { ids, loss_mask }
    }

    /// Supervision only from `start` onwards.
    pub fn masked_from(ids: Vec<u32>, start: usize) -> Self {
        let loss_mask = (0..ids.len()).map(|t| t > 0 && t >= start).collect();
        TrainExample { ids, loss_mask }
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().skip(1).filter(|&&m| m).count()
    }
}

/// Flat gradient buffer sharing the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub data: Vec<T>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros(n: usize) -> Self {
        Grads { data: vec![T::zero(); n] }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, k: T) {
        for a in &mut self.data {
            *a = *a * k;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|&a| a.f64() * a.f64()).sum::<f64>().sqrt()
    }

    pub fn tensor<'a>(&'a self, layout: &Layout, name: &str) -> Option<&'a [T]> {
        layout.get(name).map(|s| &self.data[s.range()])
    }

    pub fn check_finite(&self, layout: &Layout) -> Result<()> {
        match self.data.iter().position(|a| !a.is_finite()) {
            None => Ok(()),
            Some(i) => Err(ModelError::NonFinite {
                tensor: layout.owner(i).map_or_else(|| "grads".to_string(), |s| s.name.clone()),
            }),
        }
    }
}

fn check_batch<T: Scalar>(st: &ModelState<T>, batch: &[TrainExample]) -> Result<usize> {
    let mut denom = 0;
    for ex in batch {
        if ex.loss_mask.len() != ex.ids.len() {
            return Err(ModelError::Shape(format!("{} ids with {} mask entries", ex.ids.len(), ex.loss_mask.len())));
        }
        st.check_input(&ex.ids, 0)?;
        denom += ex.supervised();
    }
    if denom == 0 {
        return Err(ModelError::EmptyMask);
    }
    Ok(denom)
}

/// Loss of a batch, averaged over all supervised positions in the batch.
pub fn batch_loss<T: Scalar>(st: &ModelState<T>, batch: &[TrainExample], lambda: f64) -> Result<LossBreakdown<T>> {
    let denom = check_batch(st, batch)?;
    let sums: Vec<(f64, f64)> = batch
        .par_iter()
        .map(|ex| {
            if ex.supervised() == 0 {
                return (0.0, 0.0);
            }
            let n = ex.ids.len() - 1;
            let (hf, _) = st.run(&ex.ids[..n], None, false);
            let logits = hf.dot(&st.embedding().t());
            let (ce, z, _) = loss_rows(logits.view(), &ex.ids[1..], &ex.loss_mask[1..], lambda, 1.0, None);
            (ce, z)
        })
        .collect();
    let (ce, z) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let out = breakdown::<T>(ce, z, denom, lambda);
    if !out.total.is_finite() {
        return Err(ModelError::NonFinite { tensor: "loss".into() });
    }
    Ok(out)
}

/// Analytic gradients of the batch loss.
pub fn gradients<T: Scalar>(st: &ModelState<T>, batch: &[TrainExample], lambda: f64) -> Result<(Grads<T>, LossBreakdown<T>)> {
    let denom = check_batch(st, batch)?;
    let np = st.param_count();
    let shards: Vec<(Grads<T>, f64, f64)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = Grads::zeros(np);
            let (mut ce, mut z) = (0.0, 0.0);
            for ex in chunk {
                if ex.supervised() == 0 {
                    continue;
                }
                let n = ex.ids.len() - 1;
                let inputs = &ex.ids[..n];
                let (hf, trace) = st.run(inputs, None, true);
                let logits = hf.dot(&st.embedding().t());
                let mut dl = Array2::zeros(logits.raw_dim());
                let (c, zz, _) = loss_rows(logits.view(), &ex.ids[1..], &ex.loss_mask[1..], lambda, denom as f64, Some(&mut dl));
                ce += c;
                z += zz;
                backward(st, inputs, &trace.expect("saved trace"), &dl, &mut g.data);
            }
            (g, ce, z)
        })
        .collect();
    let mut total = Grads::zeros(np);
    let (mut ce, mut z) = (0.0, 0.0);
    for (g, c, zz) in &shards {
        total.add_assign(g);
        ce += c;
        z += zz;
    }
    let out = breakdown::<T>(ce, z, denom, lambda);
    if !out.total.is_finite() {
        return Err(ModelError::NonFinite { tensor: "loss".into() });
    }
    total.check_finite(&st.layout)?;
    Ok((total, out))
}

// ---------------------------------------------------------------------------
// inference

/// Per-layer key/value cache for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
    max: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(st: &ModelState<T>) -> Self {
        let l = st.config.n_layers;
        KvCache { k: vec![Vec::new(); l], v: vec![Vec::new(); l], len: 0, max: st.config.max_positions }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn remaining(&self) -> usize {
        self.max - self.len
    }

    pub fn truncate(&mut self, n: usize) {
        self.len = self.len.min(n);
    }

    /// Final-normed hidden states for the appended positions.
    pub fn extend_hidden(&mut self, st: &ModelState<T>, ids: &[u32]) -> Result<Array2<T>> {
        st.check_input(ids, self.len)?;
        Ok(st.run(ids, Some(self), false).0)
    }

    pub fn extend(&mut self, st: &ModelState<T>, ids: &[u32]) -> Result<Array2<T>> {
        Ok(self.extend_hidden(st, ids)?.dot(&st.embedding().t()))
    }

    /// Logits of the last appended position only.
    pub fn extend_last(&mut self, st: &ModelState<T>, ids: &[u32]) -> Result<Vec<T>> {
        let h = self.extend_hidden(st, ids)?;
        let last = h.row(h.nrows() - 1).to_vec();
        Ok(st.logits_from_hidden(&last))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// Argmax decoding; the zero-temperature limit.
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 1.0, top_p: 1.0, greedy: false }
    }
}

/// Sampling distribution after temperature and nucleus truncation. Tokens
/// tied with the boundary probability are all kept.
pub fn sampling_probs<T: Scalar>(logits: &[T], cfg: &SamplingConfig) -> Vec<f64> {
    let tau = cfg.temperature.max(1e-8);
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64() / tau));
    let mut p: Vec<f64> = logits.iter().map(|&v| (v.f64() / tau - m).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    if cfg.top_p < 1.0 {
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut cut = p[order[0]];
        for &i in &order {
            cum += p[i];
            cut = p[i];
            if cum >= cfg.top_p {
                break;
            }
        }
        p.iter_mut().for_each(|x| {
            if *x < cut {
                *x = 0.0
            }
        });
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
    }
    p
}

pub fn argmax<T: Scalar>(logits: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub fn sample_token<T: Scalar, R: Rng + ?Sized>(logits: &[T], cfg: &SamplingConfig, rng: &mut R) -> u32 {
    if cfg.greedy {
        return argmax(logits);
    }
    let p = sampling_probs(logits, cfg);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last = i;
            cum += pi;
            if u < cum {
                return i as u32;
            }
        }
    }
    last as u32
}

/// Continues decoding from a primed cache whose last logits are `logits`.
/// Stops after a token for which `stop` holds, after `max_new` tokens, or
/// when the cache is full. The stopping token is included.
pub fn continue_sampling<T: Scalar, R: Rng + ?Sized>(
    st: &ModelState<T>,
    cache: &mut KvCache<T>,
    mut logits: Vec<T>,
    cfg: &SamplingConfig,
    max_new: usize,
    stop: &dyn Fn(u32) -> bool,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    while out.len() < max_new {
        let tok = sample_token(&logits, cfg, rng);
        out.push(tok);
        if stop(tok) || out.len() == max_new || cache.remaining() == 0 {
            break;
        }
        logits = cache.extend_last(st, &[tok])?;
    }
    Ok(out)
}

/// Ancestral sampling after `prompt` until `eos`, `max_new` tokens or a
/// full context.
pub fn sample_trajectory<T: Scalar, R: Rng + ?Sized>(
    st: &ModelState<T>,
    prompt: &[u32],
    cfg: &SamplingConfig,
    max_new: usize,
    eos: u32,
    rng: &mut R,
) -> Result<Vec<u32>> {
    st.check_input(prompt, 0)?;
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let mut cache = KvCache::new(st);
    let logits = cache.extend_last(st, prompt)?;
    continue_sampling(st, &mut cache, logits, cfg, max_new, &|t| t == eos, rng)
}
