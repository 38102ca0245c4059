//! One-hidden-layer ReLU networks, Adam with a geometric learning-rate
//! schedule, feature standardization and the model file format.
//!
//! Parameters live in one flat vector laid out as `[W1, b1, W2, b2]` with both
//! weight matrices column-major. Batches are column-major too: sample `s` of
//! an `n`-wide batch occupies `xs[s * n..(s + 1) * n]`.

use std::collections::BTreeMap;
use std::path::Path;

use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::hex_digest;

pub const MODEL_FORMAT: &str = "splitopf-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
}

impl Dims {
    pub fn new(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        Dims { n_in, n_hidden, n_out }
    }

    pub fn n_params(&self) -> usize {
        self.n_hidden * (self.n_in + 1) + self.n_out * (self.n_hidden + 1)
    }

    // Offsets of W1, b1, W2, b2 in the flat parameter vector.
    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = self.n_hidden * self.n_in;
        let w2 = b1 + self.n_hidden;
        let b2 = w2 + self.n_out * self.n_hidden;
        [w1, b1, w2, b2]
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Dims,
    params: Vec<f64>,
    /// Bumped on every parameter change so stale caches can be detected.
    generation: u64,
}

/// Equal shape and parameters; the generation is bookkeeping.
impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.params == other.params
    }
}

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    batch: usize,
    generation: u64,
    x: Vec<f64>,
    z1: Vec<f64>,
    h: Vec<f64>,
}

impl Cache {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn view(data: &[f64], rows: usize, cols: usize) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(data, rows, cols)
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> MatMut<'_, f64> {
    MatMut::from_column_major_slice_mut(data, rows, cols)
}

/// Uniform initialization in `±1/sqrt(fan_in)` for weights and biases alike.
pub fn init_model(dims: Dims, seed: u64) -> Result<Mlp> {
    if dims.n_in == 0 || dims.n_hidden == 0 || dims.n_out == 0 {
        return Err(Error::InvalidArgument(format!("network dimensions must be positive, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [_, _, w2, _] = dims.offsets();
    let bound_in = 1.0 / (dims.n_in as f64).sqrt();
    let bound_hidden = 1.0 / (dims.n_hidden as f64).sqrt();
    let params = (0..dims.n_params())
        .map(|i| {
            let bound = if i < w2 { bound_in } else { bound_hidden };
            bound * (2.0 * rng.random::<f64>() - 1.0)
        })
        .collect();
    Ok(Mlp { dims, params, generation: 0 })
}

impl Mlp {
    pub fn from_params(dims: Dims, params: Vec<f64>) -> Result<Self> {
        if dims.n_in == 0 || dims.n_hidden == 0 || dims.n_out == 0 {
            return Err(Error::InvalidArgument(format!("network dimensions must be positive, got {dims:?}")));
        }
        if params.len() != dims.n_params() {
            return Err(Error::Dimension(format!(
                "{} parameters given, dimensions {dims:?} need {}",
                params.len(),
                dims.n_params()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite network parameter".into()));
        }
        Ok(Mlp { dims, params, generation: 0 })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Single-sample forward pass without a cache.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1)?.0)
    }

    /// Forward pass over `batch` column-major samples.
    pub fn forward_batch(&self, xs: &[f64], batch: usize) -> Result<(Vec<f64>, Cache)> {
        let Dims { n_in, n_hidden, n_out } = self.dims;
        if xs.len() != n_in * batch {
            return Err(Error::Dimension(format!(
                "network expects {n_in} inputs per sample, got {} values for {batch} samples",
                xs.len()
            )));
        }
        let [w1, b1, w2, b2] = self.dims.offsets();
        let p = &self.params;
        let mut z1 = Vec::with_capacity(n_hidden * batch);
        for _ in 0..batch {
            z1.extend_from_slice(&p[b1..w2]);
        }
        matmul(
            view_mut(&mut z1, n_hidden, batch),
            Accum::Add,
            view(&p[w1..b1], n_hidden, n_in),
            view(xs, n_in, batch),
            1.0,
            Par::Seq,
        );
        let h: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
        let mut out = Vec::with_capacity(n_out * batch);
        for _ in 0..batch {
            out.extend_from_slice(&p[b2..]);
        }
        matmul(
            view_mut(&mut out, n_out, batch),
            Accum::Add,
            view(&p[w2..b2], n_out, n_hidden),
            view(&h, n_hidden, batch),
            1.0,
            Par::Seq,
        );
        let cache = Cache {
            batch,
            generation: self.generation,
            x: xs.to_vec(),
            z1,
            h,
        };
        Ok((out, cache))
    }

    /// Reverse pass. Returns parameter gradients (flat layout) summed over the
    /// batch and the gradient with respect to the inputs. The ReLU
    /// subgradient at 0 is 0.
    pub fn backward(&self, cache: &Cache, d_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if cache.generation != self.generation || cache.x.len() != self.dims.n_in * cache.batch {
            return Err(Error::InvalidArgument("cache does not belong to the current parameters".into()));
        }
        let Dims { n_in, n_hidden, n_out } = self.dims;
        let batch = cache.batch;
        if d_out.len() != n_out * batch {
            return Err(Error::Dimension(format!(
                "output gradient has {} values, expected {}",
                d_out.len(),
                n_out * batch
            )));
        }
        let [w1, b1, w2, b2] = self.dims.offsets();
        let mut grad = vec![0.0; self.dims.n_params()];
        let d_out_m = view(d_out, n_out, batch);
        matmul(
            view_mut(&mut grad[w2..b2], n_out, n_hidden),
            Accum::Replace,
            d_out_m,
            view(&cache.h, n_hidden, batch).transpose(),
            1.0,
            Par::Seq,
        );
        for s in 0..batch {
            for (g, d) in grad[b2..].iter_mut().zip(&d_out[s * n_out..(s + 1) * n_out]) {
                *g += d;
            }
        }
        let mut dz = vec![0.0; n_hidden * batch];
        matmul(
            view_mut(&mut dz, n_hidden, batch),
            Accum::Replace,
            view(&self.params[w2..b2], n_out, n_hidden).transpose(),
            d_out_m,
            1.0,
            Par::Seq,
        );
        for (d, &z) in dz.iter_mut().zip(&cache.z1) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        matmul(
            view_mut(&mut grad[w1..b1], n_hidden, n_in),
            Accum::Replace,
            view(&dz, n_hidden, batch),
            view(&cache.x, n_in, batch).transpose(),
            1.0,
            Par::Seq,
        );
        for s in 0..batch {
            for (g, d) in grad[b1..w2].iter_mut().zip(&dz[s * n_hidden..(s + 1) * n_hidden]) {
                *g += d;
            }
        }
        let mut d_in = vec![0.0; n_in * batch];
        matmul(
            view_mut(&mut d_in, n_in, batch),
            Accum::Replace,
            view(&self.params[w1..b1], n_hidden, n_in).transpose(),
            view(&dz, n_hidden, batch),
            1.0,
            Par::Seq,
        );
        Ok((grad, d_in))
    }

    /// One Adam update with the state's current learning rate.
    pub fn step(&mut self, grads: &[f64], state: &mut OptimState) -> Result<()> {
        state.update(&mut self.params, grads)?;
        self.generation += 1;
        Ok(())
    }
}

/// Geometric decay from `start` to `end` over `horizon` epochs, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { start: 1e-3, end: 1e-6 }
    }
}

impl LrSchedule {
    pub fn check(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0 && self.end <= self.start && self.start.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning-rate schedule needs 0 < end <= start, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn rate(&self, epoch: usize, horizon: usize) -> f64 {
        if horizon <= 1 {
            return if epoch == 0 { self.start } else { self.end };
        }
        let last = horizon - 1;
        if epoch >= last {
            return self.end;
        }
        let t = epoch as f64 / last as f64;
        (self.start * (self.end / self.start).powf(t)).clamp(self.end, self.start)
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam moment accumulators plus the current learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub schedule: LrSchedule,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimState {
    pub fn new(n_params: usize, schedule: LrSchedule) -> Self {
        OptimState {
            schedule,
            lr: schedule.start,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_epoch(&mut self, epoch: usize, horizon: usize) {
        self.lr = self.schedule.rate(epoch, horizon);
    }

    /// Applies one Adam update to `params`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.len() != params.len() || params.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer state for {} parameters given {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient {} at parameter {i}", grads[i])));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powf(self.t as f64);
        let c2 = 1.0 - BETA2.powf(self.t as f64);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
        Ok(())
    }
}

/// Per-feature affine map `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

fn moments<'a>(n: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut count = 0usize;
    let mut sum = vec![0.0; n];
    let mut rows_seen = Vec::new();
    for row in rows {
        if row.len() != n {
            return Err(Error::Dimension(format!("feature row of width {} where {n} expected", row.len())));
        }
        count += 1;
        for (s, x) in sum.iter_mut().zip(row) {
            *s += x;
        }
        rows_seen.push(row);
    }
    if count == 0 {
        return Err(Error::InvalidArgument("cannot fit a standardizer on no samples".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; n];
    for row in rows_seen {
        for ((q, x), m) in sq.iter_mut().zip(row).zip(&mean) {
            *q += (x - m) * (x - m);
        }
    }
    let sd = sq.iter().map(|q| (q / count as f64).sqrt()).collect();
    Ok((mean, sd))
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Standardizer { mean: vec![0.0; n], scale: vec![1.0; n] }
    }

    /// Mean and population standard deviation of each column of `rows`.
    /// Constant features get scale 1.
    pub fn fit<'a>(n: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let (mean, sd) = moments(n, rows)?;
        let scale = sd
            .iter()
            .zip(&mean)
            .map(|(&sd, m)| if sd > 1e-9 * (1.0 + m.abs()) { sd } else { 1.0 })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    /// Like [`Standardizer::fit`] but a constant feature gets scale `floor`
    /// instead of 1, so a target that never varies is reproduced almost
    /// exactly whatever the network outputs. Features that vary, however
    /// little, keep their own spread.
    pub fn fit_floored<'a>(n: usize, rows: impl IntoIterator<Item = &'a [f64]>, floor: f64) -> Result<Self> {
        let (mean, sd) = moments(n, rows)?;
        let scale = sd
            .iter()
            .zip(&mean)
            .map(|(&sd, m)| if sd > 1e-9 * (1.0 + m.abs()) { sd } else { floor })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (((o, x), m), s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.scale) {
            *o = (x - m) / s;
        }
    }

    pub fn invert(&self, y: &[f64], out: &mut [f64]) {
        for (((o, y), m), s) in out.iter_mut().zip(y).zip(&self.mean).zip(&self.scale) {
            *o = m + s * y;
        }
    }
}

/// A network together with the input and output standardization fitted on
/// its training data. Callers see raw (per-unit) values on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub mlp: Mlp,
    pub input: Standardizer,
    pub output: Standardizer,
    pub seed: u64,
}

impl Network {
    pub fn new(dims: Dims, seed: u64, input: Standardizer, output: Standardizer) -> Result<Self> {
        if input.len() != dims.n_in || output.len() != dims.n_out {
            return Err(Error::Dimension(format!(
                "standardizers of width {}/{} for network {dims:?}",
                input.len(),
                output.len()
            )));
        }
        Ok(Network { mlp: init_model(dims, seed)?, input, output, seed })
    }

    pub fn dims(&self) -> Dims {
        self.mlp.dims()
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1)?.0)
    }

    /// Forward pass on raw inputs, returning raw outputs.
    pub fn forward_batch(&self, xs: &[f64], batch: usize) -> Result<(Vec<f64>, Cache)> {
        let Dims { n_in, n_out, .. } = self.dims();
        if xs.len() != n_in * batch {
            return Err(Error::Dimension(format!(
                "network expects {n_in} inputs per sample, got {} values for {batch} samples",
                xs.len()
            )));
        }
        let mut z = vec![0.0; xs.len()];
        for s in 0..batch {
            self.input.apply(&xs[s * n_in..(s + 1) * n_in], &mut z[s * n_in..(s + 1) * n_in]);
        }
        let (y, cache) = self.mlp.forward_batch(&z, batch)?;
        let mut out = vec![0.0; y.len()];
        for s in 0..batch {
            self.output.invert(&y[s * n_out..(s + 1) * n_out], &mut out[s * n_out..(s + 1) * n_out]);
        }
        Ok((out, cache))
    }

    /// Parameter gradients given the gradient with respect to raw outputs.
    pub fn backward(&self, cache: &Cache, d_out: &[f64]) -> Result<Vec<f64>> {
        let n_out = self.dims().n_out;
        let scaled: Vec<f64> = d_out
            .iter()
            .enumerate()
            .map(|(i, d)| d * self.output.scale[i % n_out])
            .collect();
        Ok(self.mlp.backward(cache, &scaled)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SubnetHeader {
    name: String,
    dims: Dims,
    seed: u64,
    input: Standardizer,
    output: Standardizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    meta: BTreeMap<String, String>,
    subnets: Vec<SubnetHeader>,
    params_sha256: String,
}

/// A set of named networks plus free-form metadata (kind, case hash, ...).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelFile {
    pub meta: BTreeMap<String, String>,
    pub subnets: Vec<(String, Network)>,
}

impl ModelFile {
    pub fn subnet(&self, name: &str) -> Option<&Network> {
        self.subnets.iter().find(|(n, _)| n == name).map(|(_, net)| net)
    }

    /// One line of JSON header, then every parameter as little-endian f64 in
    /// subnet order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut raw = Vec::new();
        for (_, net) in &self.subnets {
            for p in net.mlp.params() {
                raw.extend_from_slice(&p.to_le_bytes());
            }
        }
        let header = FileHeader {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            meta: self.meta.clone(),
            subnets: self
                .subnets
                .iter()
                .map(|(name, net)| SubnetHeader {
                    name: name.clone(),
                    dims: net.dims(),
                    seed: net.seed,
                    input: net.input.clone(),
                    output: net.output.clone(),
                })
                .collect(),
            params_sha256: hex_digest(&raw),
        };
        let mut bytes = serde_json::to_vec(&header).expect("model header serializes");
        bytes.push(b'\n');
        bytes.extend_from_slice(&raw);
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse { line: 1, msg: "model file has no header line".into() })?;
        let header: FileHeader = serde_json::from_slice(&bytes[..split])?;
        if header.format != MODEL_FORMAT || header.version != MODEL_FORMAT_VERSION {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported model format {} version {}", header.format, header.version),
            });
        }
        let raw = &bytes[split + 1..];
        let expected: usize = header.subnets.iter().map(|s| s.dims.n_params() * 8).sum();
        if raw.len() != expected {
            return Err(Error::Integrity(format!(
                "model file holds {} parameter bytes, header describes {expected}",
                raw.len()
            )));
        }
        if hex_digest(raw) != header.params_sha256 {
            return Err(Error::Integrity("model parameter hash mismatch".into()));
        }
        let mut offset = 0;
        let mut subnets = Vec::with_capacity(header.subnets.len());
        for s in header.subnets {
            let n = s.dims.n_params();
            let params = raw[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            offset += 8 * n;
            if s.input.len() != s.dims.n_in || s.output.len() != s.dims.n_out {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("standardizer widths do not match subnet {}", s.name),
                });
            }
            let net = Network {
                mlp: Mlp::from_params(s.dims, params)?,
                input: s.input,
                output: s.output,
                seed: s.seed,
            };
            subnets.push((s.name, net));
        }
        Ok(ModelFile { meta: header.meta, subnets })
    }

    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
