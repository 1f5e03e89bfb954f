//! Causal transformer over latent sequences (stage 2).
//!
//! A window `Z` (`L × d`) becomes `Y = (Z + PE)·W_in + b_in`, passes through
//! post-norm decoder blocks
//!
//! ```text
//! Ỹ = LN(Y + MultiHead(Y)),   out = LN(Ỹ + FFN(Ỹ))
//! ```
//!
//! and a linear head maps each row back to `d`. Row `i` of the output is
//! trained to match row `i + 1` of the trajectory.
//!
//! Attention scores are masked as `S∘C + B(1 − C)` with `C_ij = 1` for
//! `j ≤ i`. The diagonal is left open so that the first row attends to
//! itself; every cross-row flow still runs from past to future only.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::params::{ParamId, ParamStore};
use crate::spline_gcn::join;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which time index feeds the positional encoding of a window row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    /// The row's absolute frame index in the trajectory.
    Absolute,
    /// The row's offset inside its window (`0..L`).
    WindowRelative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub window: usize,
    pub heads: usize,
    pub layers: usize,
    /// Model width; `None` keeps the data dimension.
    pub d_model: Option<usize>,
    /// Feed-forward width; `None` means `4·d_model`.
    pub d_ff: Option<usize>,
    pub mask_value: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Windows drawn per epoch; `None` uses every window.
    pub windows_per_epoch: Option<usize>,
    pub seed: u64,
    pub layer_norm_eps: f64,
    pub positions: PositionMode,
    /// Cosine-anneal the learning rate to this fraction of its start over
    /// the run; `1.0` keeps it constant.
    pub final_lr_fraction: f64,
    /// Predict `z(t+1) − z(t)` and add the input row back.
    pub residual_output: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            window: 128,
            heads: 4,
            layers: 2,
            d_model: None,
            d_ff: None,
            mask_value: -1e9,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 8,
            windows_per_epoch: None,
            seed: 0,
            layer_norm_eps: 1e-5,
            positions: PositionMode::Absolute,
            final_lr_fraction: 1.0,
            residual_output: false,
        }
    }
}

impl TransformerConfig {
    pub fn model_dim(&self, data_dim: usize) -> usize {
        self.d_model.unwrap_or(data_dim)
    }

    pub fn validate(&self, data_dim: usize) -> Result<()> {
        let d = self.model_dim(data_dim);
        if self.heads == 0 || d == 0 || d % self.heads != 0 {
            return Err(invalid(format!("model width {d} is not divisible by {} heads", self.heads)));
        }
        if self.window < 2 {
            return Err(invalid("window must hold at least 2 rows"));
        }
        if !(self.mask_value < -1e3) {
            return Err(invalid("mask value must be a large negative number"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(invalid("final_lr_fraction must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.layers == 0 {
            return Err(invalid("batch_size and layers must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Sinusoidal encoding: `PE(t,2i) = sin(t/10000^{2i/d})`,
/// `PE(t,2i+1) = cos(t/10000^{2i/d})`, one row per position.
pub fn positional_encoding(positions: &[usize], dim: usize) -> Tensor {
    let mut data = vec![0.0; positions.len() * dim];
    for (r, &t) in positions.iter().enumerate() {
        for c in 0..dim {
            let i2 = (c - c % 2) as f64;
            let angle = t as f64 / libm::pow(10000.0, i2 / dim as f64);
            data[r * dim + c] = if c % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) };
        }
    }
    Tensor::new(&[positions.len(), dim], data).expect("shape")
}

/// `(C, B(1 − C))` for an `l × l` window: `C_ij = 1` iff `j ≤ i`.
pub fn causal_mask(l: usize, mask_value: f64) -> (Tensor, Tensor) {
    let mut c = vec![0.0; l * l];
    let mut m = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            if j <= i {
                c[i * l + j] = 1.0;
            } else {
                m[i * l + j] = mask_value;
            }
        }
    }
    (Tensor::new(&[l, l], c).expect("shape"), Tensor::new(&[l, l], m).expect("shape"))
}

/// Single-head masked attention on one window. Returns the head output
/// (`L × d_k`) and the attention weights (`L × L`).
pub fn masked_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: (Var, Var)) -> Result<(Var, Var)> {
    let dk = tape.try_value(q)?.shape()[1];
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / libm::sqrt(dk as f64))?;
    let s = tape.mul(s, mask.0)?;
    let s = tape.add(s, mask.1)?;
    let w = tape.softmax(s)?;
    let out = tape.matmul(w, v)?;
    Ok((out, w))
}

#[derive(Debug, Clone, PartialEq)]
struct Affine {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Affine {
    fn new(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / libm::sqrt(fan_in as f64);
        let weight = store.insert_uniform(&join(prefix, "weight"), &[fan_in, fan_out], s, rng);
        let bias = bias.then(|| store.insert(&join(prefix, "bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let w = tape.param(store, self.weight, trainable);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b, trainable);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(&join(prefix, "gamma"), Tensor::filled(&[dim], 1.0)),
            beta: store.insert(&join(prefix, "beta"), Tensor::zeros(&[dim])),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, eps: f64, trainable: bool) -> Result<Var> {
        let y = tape.layer_norm(x, eps)?;
        let g = tape.param(store, self.gamma, trainable);
        let b = tape.param(store, self.beta, trainable);
        let y = tape.mul_row(y, g)?;
        tape.add_row(y, b)
    }
}

/// One post-norm decoder block. `Q`, `K`, `V` projections are stored as
/// `d × d` matrices whose column blocks of width `d/H` belong to the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    wq: Affine,
    wk: Affine,
    wv: Affine,
    wo: Affine,
    norm1: Norm,
    ff1: Affine,
    ff2: Affine,
    norm2: Norm,
}

/// Per-forward constants shared by every block: the input holds `windows`
/// stacked windows of `len` rows, and `mask` is the recorded
/// [`causal_mask`] pair.
#[derive(Debug, Clone, Copy)]
pub struct BlockContext {
    pub windows: usize,
    pub len: usize,
    pub heads: usize,
    pub eps: f64,
    pub mask: (Var, Var),
    pub trainable: bool,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Affine::new(store, &join(prefix, "attn.q"), d, d, false, rng),
            wk: Affine::new(store, &join(prefix, "attn.k"), d, d, false, rng),
            wv: Affine::new(store, &join(prefix, "attn.v"), d, d, false, rng),
            wo: Affine::new(store, &join(prefix, "attn.o"), d, d, true, rng),
            norm1: Norm::new(store, &join(prefix, "norm1"), d),
            ff1: Affine::new(store, &join(prefix, "ffn.0"), d, d_ff, true, rng),
            ff2: Affine::new(store, &join(prefix, "ffn.1"), d_ff, d, true, rng),
            norm2: Norm::new(store, &join(prefix, "norm2"), d),
        }
    }

    /// Parameter ids of the output projection and the second FFN layer, the
    /// last linear maps of the two residual branches.
    pub fn branch_outputs(&self) -> [ParamId; 4] {
        [self.wo.weight, self.wo.bias.expect("bias"), self.ff2.weight, self.ff2.bias.expect("bias")]
    }

    /// Concatenated head outputs times `W_O` (plus bias).
    pub fn multi_head(&self, tape: &mut Tape, store: &ParamStore, y: Var, cx: &BlockContext) -> Result<Var> {
        let d = tape.try_value(y)?.shape()[1];
        let dk = d / cx.heads;
        let q = self.wq.forward(tape, store, y, cx.trainable)?;
        let k = self.wk.forward(tape, store, y, cx.trainable)?;
        let v = self.wv.forward(tape, store, y, cx.trainable)?;
        let mut windows = Vec::with_capacity(cx.windows);
        for w in 0..cx.windows {
            let rows = |tape: &mut Tape, x: Var| tape.slice(x, 0, w * cx.len, (w + 1) * cx.len);
            let (qw, kw, vw) = (rows(tape, q)?, rows(tape, k)?, rows(tape, v)?);
            let mut heads = Vec::with_capacity(cx.heads);
            for h in 0..cx.heads {
                let cols = |tape: &mut Tape, x: Var| tape.slice(x, 1, h * dk, (h + 1) * dk);
                let (qh, kh, vh) = (cols(tape, qw)?, cols(tape, kw)?, cols(tape, vw)?);
                heads.push(masked_attention(tape, qh, kh, vh, cx.mask)?.0);
            }
            windows.push(if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? });
        }
        let merged = if windows.len() == 1 { windows[0] } else { tape.concat(&windows, 0)? };
        self.wo.forward(tape, store, merged, cx.trainable)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, y: Var, cx: &BlockContext) -> Result<Var> {
        let a = self.multi_head(tape, store, y, cx)?;
        let r = tape.add(y, a)?;
        let yt = self.norm1.forward(tape, store, r, cx.eps, cx.trainable)?;
        let f = self.ff1.forward(tape, store, yt, cx.trainable)?;
        let f = tape.relu(f)?;
        let f = self.ff2.forward(tape, store, f, cx.trainable)?;
        let r = tape.add(yt, f)?;
        self.norm2.forward(tape, store, r, cx.eps, cx.trainable)
    }
}

/// Per-epoch mean of the shifted-window loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct LatentTransformer {
    pub config: TransformerConfig,
    pub dim: usize,
    pub params: ParamStore,
    input: Affine,
    blocks: Vec<DecoderBlock>,
    head: Affine,
}

impl LatentTransformer {
    /// A model over sequences of `dim`-vectors.
    pub fn new(dim: usize, config: TransformerConfig) -> Result<Self> {
        config.validate(dim)?;
        let d = config.model_dim(dim);
        let d_ff = config.d_ff.unwrap_or(4 * d);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let input = Affine::new(&mut p, "transformer.input", dim, d, true, &mut rng);
        if d == dim {
            p.insert("transformer.input.weight", Tensor::eye(d));
        }
        let blocks = (0..config.layers)
            .map(|l| DecoderBlock::new(&mut p, &format!("transformer.block{l}"), d, d_ff, &mut rng))
            .collect();
        let head = Affine::new(&mut p, "transformer.head", d, dim, true, &mut rng);
        Ok(Self {
            config,
            dim,
            params: p,
            input,
            blocks,
            head,
        })
    }

    pub fn blocks(&self) -> &[DecoderBlock] {
        &self.blocks
    }

    fn positions(&self, starts: &[usize]) -> Vec<usize> {
        let l = self.config.window;
        starts
            .iter()
            .flat_map(|&s| match self.config.positions {
                PositionMode::Absolute => (s..s + l).collect::<Vec<_>>(),
                PositionMode::WindowRelative => (0..l).collect(),
            })
            .collect()
    }

    /// Runs stacked windows `z` (`[W·L, dim]`, window `w` starting at frame
    /// `starts[w]`) through the model, giving `[W·L, dim]`.
    pub fn forward_var(&self, tape: &mut Tape, z: Var, starts: &[usize], trainable: bool) -> Result<Var> {
        self.forward_with(tape, &self.params, z, starts, trainable)
    }

    /// [`forward_var`](Self::forward_var) reading parameters from `store`,
    /// which must share this model's layout.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, z: Var, starts: &[usize], trainable: bool) -> Result<Var> {
        let l = self.config.window;
        let shape = tape.try_value(z)?.shape().to_vec();
        if shape != [starts.len() * l, self.dim] {
            return Err(Error::ShapeMismatch {
                op: "transformer",
                lhs: shape,
                rhs: vec![starts.len() * l, self.dim],
            });
        }
        let pe = tape.constant(positional_encoding(&self.positions(starts), self.dim));
        let y = tape.add(z, pe)?;
        let mut y = self.input.forward(tape, store, y, trainable)?;
        let (c, m) = causal_mask(l, self.config.mask_value);
        let cx = BlockContext {
            windows: starts.len(),
            len: l,
            heads: self.config.heads,
            eps: self.config.layer_norm_eps,
            mask: (tape.constant(c), tape.constant(m)),
            trainable,
        };
        for b in &self.blocks {
            y = b.forward(tape, store, y, &cx)?;
        }
        let out = self.head.forward(tape, store, y, trainable)?;
        if self.config.residual_output {
            tape.add(out, z)
        } else {
            Ok(out)
        }
    }

    /// Forward pass of one window (`L × dim`) starting at frame `start`.
    pub fn predict(&self, window: &Tensor, start: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(window.clone());
        let y = self.forward_var(&mut tape, z, &[start], false)?;
        Ok(tape.value(y).clone())
    }

    /// Mean over windows and rows of `‖ŷ − z_{+1}‖²` for windows starting at
    /// `starts` in `seq` (`frames × dim`).
    pub fn window_loss(&self, tape: &mut Tape, seq: &[f64], starts: &[usize], trainable: bool) -> Result<Var> {
        let (l, d) = (self.config.window, self.dim);
        let frames = seq.len() / d;
        if starts.iter().any(|&s| s + l + 1 > frames) {
            return Err(invalid("window runs past the end of the sequence"));
        }
        let gather = |off: usize| -> Vec<f64> {
            starts
                .iter()
                .flat_map(|&s| seq[(s + off) * d..(s + off + l) * d].iter().copied())
                .collect()
        };
        let x = tape.constant(Tensor::new(&[starts.len() * l, d], gather(0))?);
        let y = tape.constant(Tensor::new(&[starts.len() * l, d], gather(1))?);
        let yhat = self.forward_var(tape, x, starts, trainable)?;
        let r = tape.sub(yhat, y)?;
        let s = tape.sum_sq(r)?;
        tape.scale(s, 1.0 / (starts.len() * l) as f64)
    }

    /// Teacher-forced training on the first `train_frames` rows of `seq`
    /// (`frames × dim`). Every window and its shifted target lie inside the
    /// training rows.
    pub fn train(&mut self, seq: &[f64], train_frames: usize, mut on_epoch: impl FnMut(&Stage2Epoch)) -> Result<Vec<Stage2Epoch>> {
        let (l, d) = (self.config.window, self.dim);
        if seq.len() < train_frames * d || train_frames < l + 1 {
            return Err(invalid(format!("need more than {l} training frames")));
        }
        let train = &seq[..train_frames * d];
        let mut starts: Vec<usize> = (0..train_frames - l).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0002);
        let mut adam = AdamState::new(&self.params, self.config.learning_rate);
        let per_epoch = self.config.windows_per_epoch.unwrap_or(starts.len()).min(starts.len());
        let mut log = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let progress = epoch as f64 / self.config.epochs.max(1) as f64;
            let floor = self.config.final_lr_fraction;
            adam.learning_rate = self.config.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)));
            starts.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for (step, batch) in starts[..per_epoch].chunks(self.config.batch_size).enumerate() {
                let mut tape = Tape::new();
                let loss = self.window_loss(&mut tape, train, batch, true).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { epoch, step },
                    e => e,
                })?;
                let value = tape.scalar(loss);
                let grads = tape.backward(loss)?;
                self.params.zero_grads();
                self.params.accumulate(&grads);
                adam_step(&mut self.params, &mut adam).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { epoch, step },
                    e => e,
                })?;
                total += value;
                batches += 1;
            }
            let entry = Stage2Epoch {
                epoch,
                loss: total / batches.max(1) as f64,
            };
            on_epoch(&entry);
            log.push(entry);
        }
        Ok(log)
    }

    /// Autoregressive forecast from a seed window (`L × dim`, last row at
    /// frame `t0`): each step appends the final output row and drops the
    /// oldest row. Returns `horizon × dim`.
    pub fn rollout(&self, seed: &[f64], t0: usize, horizon: usize) -> Result<Vec<f64>> {
        let (l, d) = (self.config.window, self.dim);
        if horizon == 0 {
            return Err(invalid("rollout horizon must be positive"));
        }
        if seed.len() != l * d || t0 + 1 < l {
            return Err(Error::ShapeMismatch {
                op: "rollout",
                lhs: vec![seed.len()],
                rhs: vec![l, d],
            });
        }
        let mut window: Vec<f64> = seed.to_vec();
        let mut start = t0 + 1 - l;
        let mut out = Vec::with_capacity(horizon * d);
        for _ in 0..horizon {
            let y = self.predict(&Tensor::new(&[l, d], window.clone())?, start)?;
            let next = &y.data()[(l - 1) * d..];
            out.extend_from_slice(next);
            window.drain(..d);
            window.extend_from_slice(next);
            start += 1;
        }
        Ok(out)
    }
}

/// Per-dimension affine standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Fits on `rows × dim` data; constant dimensions get unit scale.
    pub fn fit(data: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(invalid("standardizer needs a non-empty rows × dim buffer"));
        }
        let rows = data.len() / dim;
        let mut mean = vec![0.0; dim];
        for r in data.chunks(dim) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / rows as f64);
        }
        let mut var = vec![0.0; dim];
        for r in data.chunks(dim) {
            for c in 0..dim {
                var[c] += (r[c] - mean[c]) * (r[c] - mean[c]) / rows as f64;
            }
        }
        let scale = var.iter().map(|v| if *v > 1e-24 { libm::sqrt(*v) } else { 1.0 }).collect();
        Ok(Self { mean, scale })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn apply(&self, data: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        data.iter().enumerate().map(|(i, v)| (v - self.mean[i % d]) / self.scale[i % d]).collect()
    }

    pub fn invert(&self, data: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        data.iter().enumerate().map(|(i, v)| v * self.scale[i % d] + self.mean[i % d]).collect()
    }
}
