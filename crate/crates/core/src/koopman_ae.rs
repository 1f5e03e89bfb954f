//! Graph autoencoder with a linear latent propagator (stage 1).
//!
//! ```text
//! encoder: lift 1→C · block@0 · pool · block@1 · pool · pointwise ×2 · flatten · linear → d_z
//! decoder: linear · unflatten · pointwise ×2 · unpool · block@1 · unpool · block@0 · pointwise C→1
//! ```
//!
//! Losses: `L_recon = E‖x − ψ_d(ψ_e(x))‖²`,
//! `L_dyn = E_{t,Δt}‖x(t+Δt) − ψ_d(K^Δt ψ_e(x(t)))‖²`, `L_decay = ‖K‖²_F`.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::mesh::GraphHierarchy;
use crate::optim::{adam_step, AdamState};
use crate::params::{ParamId, ParamStore};
use crate::sparse::SparseOp;
use crate::spline_gcn::{basis_operator, KernelSpec, Pointwise, SpatialBlock};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Config {
    pub d_z: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta_t: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Feature channels of every spatial block.
    pub channels: usize,
    pub kernel: KernelSpec,
    /// Adds the `X·R` self term to each spline convolution.
    pub root_weight: bool,
    /// Standard deviation of the noise added to `K = I` at init.
    pub koopman_init_noise: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            d_z: 64,
            lambda1: 1.0,
            lambda2: 1e-4,
            delta_t: 4,
            epochs: 200,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
            channels: 8,
            kernel: KernelSpec::default(),
            root_weight: true,
            koopman_init_noise: 1e-3,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.delta_t == 0 {
            return Err(invalid("delta_t must be at least 1"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        if self.d_z == 0 || self.channels == 0 || self.batch_size == 0 {
            return Err(invalid("d_z, channels and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Encoded trajectory, `frames × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub frames: usize,
    pub dim: usize,
    pub z: Vec<f64>,
}

impl LatentTrajectory {
    pub fn new(frames: usize, dim: usize, z: Vec<f64>) -> Result<Self> {
        if z.len() != frames * dim {
            return Err(invalid(format!("latent buffer holds {} values, expected {frames}×{dim}", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "latent_trajectory" });
        }
        Ok(Self { frames, dim, z })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.z[t * self.dim..(t + 1) * self.dim]
    }

    /// Rows `start..end` as a tensor.
    pub fn window(&self, start: usize, end: usize) -> Tensor {
        Tensor::new(&[end - start, self.dim], self.z[start * self.dim..end * self.dim].to_vec()).expect("window in range")
    }
}

/// Per-epoch averages of the stage-1 loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub recon: f64,
    pub dyn_: f64,
    pub decay: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct KoopmanAutoencoder {
    pub config: Stage1Config,
    pub params: ParamStore,
    pub koopman: ParamId,
    hierarchy: Arc<GraphHierarchy>,
    bases: Vec<Arc<SparseOp>>,
    lift: Pointwise,
    enc_blocks: Vec<SpatialBlock>,
    enc_point: Vec<Pointwise>,
    enc_linear: (ParamId, ParamId),
    dec_linear: (ParamId, ParamId),
    dec_point: Vec<Pointwise>,
    dec_blocks: Vec<SpatialBlock>,
    out: Pointwise,
}

/// Loss terms of one batch, with the tape vars used for backward.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Losses {
    pub recon: f64,
    pub dyn_: f64,
    pub decay: f64,
    pub total: f64,
    pub total_var: Var,
}

impl KoopmanAutoencoder {
    /// Builds the network on `hierarchy` (which must have depth 2).
    pub fn new(hierarchy: Arc<GraphHierarchy>, config: Stage1Config) -> Result<Self> {
        config.validate()?;
        if hierarchy.depth() != 2 {
            return Err(invalid(format!("autoencoder needs a depth-2 hierarchy, got {}", hierarchy.depth())));
        }
        let bases = hierarchy
            .levels()
            .iter()
            .map(|g| basis_operator(g, &config.kernel).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let c = config.channels;
        let flat = hierarchy.coarsest_count() * c;
        let lift = Pointwise::new(&mut p, "encoder.lift", 1, c, false, &mut rng);
        let enc_blocks = vec![
            SpatialBlock::new(&mut p, "encoder.block0", c, config.kernel, config.root_weight, &mut rng)?,
            SpatialBlock::new(&mut p, "encoder.block1", c, config.kernel, config.root_weight, &mut rng)?,
        ];
        let enc_point = vec![
            Pointwise::new(&mut p, "encoder.point0", c, c, true, &mut rng),
            Pointwise::new(&mut p, "encoder.point1", c, c, true, &mut rng),
        ];
        let s = 1.0 / libm::sqrt(flat as f64);
        let enc_linear = (
            p.insert_uniform("encoder.linear.weight", &[flat, config.d_z], s, &mut rng),
            p.insert("encoder.linear.bias", Tensor::zeros(&[config.d_z])),
        );
        let mut k = Tensor::eye(config.d_z);
        for v in k.data_mut() {
            *v += config.koopman_init_noise * rng.sample::<f64, _>(StandardNormal);
        }
        let koopman = p.insert("koopman.K", k);
        let s = 1.0 / libm::sqrt(config.d_z as f64);
        let dec_linear = (
            p.insert_uniform("decoder.linear.weight", &[config.d_z, flat], s, &mut rng),
            p.insert("decoder.linear.bias", Tensor::zeros(&[flat])),
        );
        let dec_point = vec![
            Pointwise::new(&mut p, "decoder.point0", c, c, true, &mut rng),
            Pointwise::new(&mut p, "decoder.point1", c, c, true, &mut rng),
        ];
        let dec_blocks = vec![
            SpatialBlock::new(&mut p, "decoder.block1", c, config.kernel, config.root_weight, &mut rng)?,
            SpatialBlock::new(&mut p, "decoder.block0", c, config.kernel, config.root_weight, &mut rng)?,
        ];
        let out = Pointwise::new(&mut p, "decoder.out", c, 1, false, &mut rng);
        Ok(Self {
            config,
            params: p,
            koopman,
            hierarchy,
            bases,
            lift,
            enc_blocks,
            enc_point,
            enc_linear,
            dec_linear,
            dec_point,
            dec_blocks,
            out,
        })
    }

    pub fn hierarchy(&self) -> &Arc<GraphHierarchy> {
        &self.hierarchy
    }

    pub fn nodes(&self) -> usize {
        self.hierarchy.fine_count()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.d_z
    }

    pub fn koopman_matrix(&self) -> &Tensor {
        self.params.get(self.koopman)
    }

    /// Encodes `x` (`[B, N]`, one snapshot per row) into `[B, d_z]`.
    pub fn encode_var(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        let n = self.nodes();
        let shape = tape.try_value(x)?.shape().to_vec();
        if shape.len() != 2 || shape[1] != n {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: shape,
                rhs: vec![n],
            });
        }
        let b = shape[0];
        let c = self.config.channels;
        let p = &self.params;
        let h = tape.reshape(x, &[b * n, 1])?;
        let h = self.lift.forward(tape, p, h, trainable)?;
        let h = self.enc_blocks[0].forward(tape, p, &self.bases[0], h, trainable)?;
        let h = tape.sparse(self.hierarchy.pool_op(0), h, c)?;
        let h = self.enc_blocks[1].forward(tape, p, &self.bases[1], h, trainable)?;
        let h = tape.sparse(self.hierarchy.pool_op(1), h, c)?;
        let h = self.enc_point[0].forward(tape, p, h, trainable)?;
        let h = self.enc_point[1].forward(tape, p, h, trainable)?;
        let h = tape.reshape(h, &[b, self.hierarchy.coarsest_count() * c])?;
        let w = tape.param(p, self.enc_linear.0, trainable);
        let bias = tape.param(p, self.enc_linear.1, trainable);
        let z = tape.matmul(h, w)?;
        tape.add_row(z, bias)
    }

    /// Decodes `[B, d_z]` latents into `[B, N]` snapshots.
    pub fn decode_var(&self, tape: &mut Tape, z: Var, trainable: bool) -> Result<Var> {
        let shape = tape.try_value(z)?.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_z {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: shape,
                rhs: vec![self.config.d_z],
            });
        }
        let b = shape[0];
        let c = self.config.channels;
        let p = &self.params;
        let w = tape.param(p, self.dec_linear.0, trainable);
        let bias = tape.param(p, self.dec_linear.1, trainable);
        let h = tape.matmul(z, w)?;
        let h = tape.add_row(h, bias)?;
        let h = tape.reshape(h, &[b * self.hierarchy.coarsest_count(), c])?;
        let h = self.dec_point[0].forward(tape, p, h, trainable)?;
        let h = self.dec_point[1].forward(tape, p, h, trainable)?;
        let h = tape.sparse(self.hierarchy.unpool_op(1), h, c)?;
        let h = self.dec_blocks[0].forward(tape, p, &self.bases[1], h, trainable)?;
        let h = tape.sparse(self.hierarchy.unpool_op(0), h, c)?;
        let h = self.dec_blocks[1].forward(tape, p, &self.bases[0], h, trainable)?;
        let h = self.out.forward(tape, p, h, trainable)?;
        tape.reshape(h, &[b, self.nodes()])
    }

    /// Encodes snapshots stored row-major as `frames × N`.
    pub fn encode(&self, snapshots: &[f64]) -> Result<LatentTrajectory> {
        let n = self.nodes();
        if n == 0 || snapshots.len() % n != 0 {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![snapshots.len()],
                rhs: vec![n],
            });
        }
        let frames = snapshots.len() / n;
        let mut z = Vec::with_capacity(frames * self.config.d_z);
        for chunk in snapshots.chunks(64 * n) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[chunk.len() / n, n], chunk.to_vec())?);
            let zv = self.encode_var(&mut tape, x, false)?;
            z.extend_from_slice(tape.value(zv).data());
        }
        LatentTrajectory::new(frames, self.config.d_z, z)
    }

    /// Decodes latents stored row-major as `rows × d_z` into `rows × N`.
    pub fn decode(&self, latents: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.d_z;
        if latents.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: vec![latents.len()],
                rhs: vec![d],
            });
        }
        let mut out = Vec::with_capacity(latents.len() / d * self.nodes());
        for chunk in latents.chunks(64 * d) {
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::new(&[chunk.len() / d, d], chunk.to_vec())?);
            let x = self.decode_var(&mut tape, z, false)?;
            out.extend_from_slice(tape.value(x).data());
        }
        Ok(out)
    }

    /// `K^steps z` for a single latent vector.
    pub fn koopman_advance(&self, z: &[f64], steps: usize) -> Result<Vec<f64>> {
        koopman_advance(self.koopman_matrix(), z, steps)
    }

    /// Builds the three loss terms for the frames `batch` (indices into
    /// `frames`, a `T × N` row-major buffer). Items with `t + ΔT ≥ T` skip the
    /// dynamics term.
    pub fn stage1_losses(&self, tape: &mut Tape, frames: &[f64], batch: &[usize], trainable: bool) -> Result<Stage1Losses> {
        let n = self.nodes();
        let t_total = frames.len() / n;
        let dt = self.config.delta_t;
        if batch.is_empty() || batch.iter().any(|&t| t >= t_total) {
            return Err(invalid("batch indices out of range"));
        }
        let gather = |idx: &mut dyn Iterator<Item = usize>| -> Vec<f64> {
            idx.flat_map(|t| frames[t * n..(t + 1) * n].iter().copied()).collect()
        };
        let b = batch.len();
        let x = tape.constant(Tensor::new(&[b, n], gather(&mut batch.iter().copied()))?);
        let z = self.encode_var(tape, x, trainable)?;

        let dyn_items: Vec<usize> = batch.iter().copied().filter(|&t| t + dt < t_total).collect();
        let kv = tape.param(&self.params, self.koopman, trainable);
        let decay = tape.sum_sq(kv)?;

        // One decoder pass for the reconstruction and every advanced latent.
        let mut parts = vec![z];
        let mut targets = Vec::new();
        if !dyn_items.is_empty() {
            let rows: Vec<usize> = batch.iter().enumerate().filter(|(_, &t)| t + dt < t_total).map(|(i, _)| i).collect();
            let zd = if rows.len() == b {
                z
            } else {
                let pieces: Vec<Var> = rows.iter().map(|&i| tape.slice(z, 0, i, i + 1)).collect::<Result<_>>()?;
                tape.concat(&pieces, 0)?
            };
            let kt = tape.transpose(kv)?;
            let mut cur = zd;
            for step in 1..=dt {
                cur = tape.matmul(cur, kt)?;
                parts.push(cur);
                targets.extend(dyn_items.iter().map(|&t| t + step));
            }
        }
        let all = if parts.len() == 1 { z } else { tape.concat(&parts, 0)? };
        let xhat = self.decode_var(tape, all, trainable)?;

        let rec = tape.slice(xhat, 0, 0, b)?;
        let r = tape.sub(rec, x)?;
        let l_recon = tape.sum_sq(r)?;
        let l_recon = tape.scale(l_recon, 1.0 / b as f64)?;
        let mut total = l_recon;
        let mut dyn_value = 0.0;
        if !targets.is_empty() {
            let y = tape.constant(Tensor::new(&[targets.len(), n], gather(&mut targets.iter().copied()))?);
            let pred = tape.slice(xhat, 0, b, b + targets.len())?;
            let r = tape.sub(pred, y)?;
            let l_dyn = tape.sum_sq(r)?;
            let l_dyn = tape.scale(l_dyn, 1.0 / targets.len() as f64)?;
            dyn_value = tape.scalar(l_dyn);
            let weighted = tape.scale(l_dyn, self.config.lambda1)?;
            total = tape.add(total, weighted)?;
        }
        let weighted = tape.scale(decay, self.config.lambda2)?;
        total = tape.add(total, weighted)?;
        Ok(Stage1Losses {
            recon: tape.scalar(l_recon),
            dyn_: dyn_value,
            decay: tape.scalar(decay),
            total: tape.scalar(total),
            total_var: total,
        })
    }

    /// Trains on the first `train_frames` rows of `frames` (`T × N`).
    /// `on_epoch` sees each epoch's averages.
    pub fn train(&mut self, frames: &[f64], train_frames: usize, mut on_epoch: impl FnMut(&Stage1Epoch)) -> Result<Vec<Stage1Epoch>> {
        let n = self.nodes();
        if frames.len() < train_frames * n || train_frames == 0 {
            return Err(invalid("training split exceeds the dataset"));
        }
        let train = &frames[..train_frames * n];
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0001);
        let mut adam = AdamState::new(&self.params, self.config.learning_rate);
        let mut order: Vec<usize> = (0..train_frames).collect();
        let mut log = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut acc = Stage1Epoch {
                epoch,
                ..Stage1Epoch::default()
            };
            let mut batches = 0;
            for (step, batch) in order.chunks(self.config.batch_size).enumerate() {
                let mut tape = Tape::new();
                let losses = self.stage1_losses(&mut tape, train, batch, true).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { epoch, step },
                    e => e,
                })?;
                if !losses.total.is_finite() {
                    return Err(Error::Diverged { epoch, step });
                }
                let grads = tape.backward(losses.total_var)?;
                self.params.zero_grads();
                self.params.accumulate(&grads);
                adam_step(&mut self.params, &mut adam).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { epoch, step },
                    e => e,
                })?;
                acc.recon += losses.recon;
                acc.dyn_ += losses.dyn_;
                acc.decay += losses.decay;
                acc.total += losses.total;
                batches += 1;
            }
            let k = batches as f64;
            acc.recon /= k;
            acc.dyn_ /= k;
            acc.decay /= k;
            acc.total /= k;
            on_epoch(&acc);
            log.push(acc);
        }
        Ok(log)
    }

    /// Per-node mean squared reconstruction error over snapshots (`T × N`).
    pub fn reconstruction_mse(&self, snapshots: &[f64]) -> Result<f64> {
        let z = self.encode(snapshots)?;
        let xhat = self.decode(&z.z)?;
        let se: f64 = xhat.iter().zip(snapshots).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(se / snapshots.len() as f64)
    }

    /// `x̂(t₀+i) = ψ_d(Kⁱ ψ_e(x₀))` for `i = 1..=horizon`, as `horizon × N`.
    pub fn pure_koopman_forecast(&self, x0: &[f64], horizon: usize) -> Result<Vec<f64>> {
        if horizon == 0 {
            return Ok(Vec::new());
        }
        let z0 = self.encode(x0)?;
        if z0.frames != 1 {
            return Err(invalid("pure Koopman forecast starts from a single snapshot"));
        }
        let mut latents = Vec::with_capacity(horizon * self.config.d_z);
        let mut z = z0.z;
        for _ in 0..horizon {
            z = koopman_advance(self.koopman_matrix(), &z, 1)?;
            latents.extend_from_slice(&z);
        }
        self.decode(&latents)
    }
}

/// `K^steps z` by repeated multiplication.
pub fn koopman_advance(k: &Tensor, z: &[f64], steps: usize) -> Result<Vec<f64>> {
    let d = z.len();
    if k.shape() != [d, d] {
        return Err(Error::ShapeMismatch {
            op: "koopman_advance",
            lhs: k.shape().to_vec(),
            rhs: vec![d],
        });
    }
    let mut cur = z.to_vec();
    let mut next = vec![0.0; d];
    for _ in 0..steps {
        for i in 0..d {
            next[i] = k.row(i).iter().zip(&cur).map(|(a, b)| a * b).sum();
        }
        core::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}
