//! Affine-coupling normalizing flow over feature vectors.
//!
//! Each block permutes its input, splits it into halves `(u1, u2)` and applies
//!
//! ```text
//! v1 = u1 * exp(c(s2(u2))) + t2(u2)
//! v2 = u2 * exp(c(s1(v1))) + t1(v1)
//! ```
//!
//! with the soft clamp `c(x) = α tanh(x / α)`. The log-determinant is the sum
//! of every clamped scale activation, so the negative log-likelihood under a
//! standard normal base is `‖z‖² / 2 − log_det` (dropping `D/2 · log 2π`).
//!
//! All batched routines take row-major `[B, D]` slices.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

pub const DEFAULT_BLOCKS: usize = 8;
pub const DEFAULT_CLAMP: f32 = 3.0;
pub const MAX_DEFAULT_HIDDEN: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub n_blocks: usize,
    pub subnet_hidden: usize,
    pub clamp: f32,
    pub seed: u64,
}

impl FlowConfig {
    pub fn new(dim: usize, seed: u64) -> Self {
        FlowConfig {
            dim,
            n_blocks: DEFAULT_BLOCKS,
            subnet_hidden: (2 * dim).min(MAX_DEFAULT_HIDDEN),
            clamp: DEFAULT_CLAMP,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("flow dim must be positive and even, got {}", self.dim)));
        }
        if self.n_blocks == 0 || self.subnet_hidden == 0 {
            return Err(Error::Config("flow needs at least one block and one hidden unit".into()));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::Config(format!("clamp must be positive, got {}", self.clamp)));
        }
        Ok(())
    }
}

/// Two-layer relu MLP `half -> hidden -> half`.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Subnet {
    fn zeros(half: usize, hidden: usize) -> Self {
        Subnet {
            w1: Tensor::zeros(&[hidden, half]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[half, hidden]),
            b2: Tensor::zeros(&[half]),
        }
    }

    fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    fn half(&self) -> usize {
        self.w1.shape()[1]
    }

    /// Returns `(hidden activations, output)` for a `[B, half]` input.
    fn forward(&self, input: &[f32], batch: usize) -> (Vec<f32>, Vec<f32>) {
        let (h, n) = (self.half(), self.hidden());
        let mut hidden = Vec::with_capacity(batch * n);
        for _ in 0..batch {
            hidden.extend_from_slice(self.b1.data());
        }
        gemm(batch, h, n, input, (h, 1), self.w1.data(), (1, h), &mut hidden, 1.0);
        for v in &mut hidden {
            *v = v.max(0.0);
        }
        let mut out = Vec::with_capacity(batch * h);
        for _ in 0..batch {
            out.extend_from_slice(self.b2.data());
        }
        gemm(batch, n, h, &hidden, (n, 1), self.w2.data(), (1, n), &mut out, 1.0);
        (hidden, out)
    }

    fn output(&self, input: &[f32], batch: usize) -> Vec<f32> {
        self.forward(input, batch).1
    }

    /// Adds parameter gradients into `grads` and returns d/d input.
    fn backward(&self, input: &[f32], hidden: &[f32], grad_out: &[f32], batch: usize, grads: &mut Subnet) -> Vec<f32> {
        let (h, n) = (self.half(), self.hidden());
        gemm(h, batch, n, grad_out, (1, h), hidden, (n, 1), grads.w2.data_mut(), 1.0);
        add_column_sums(grads.b2.data_mut(), grad_out, h);
        let mut dhidden = vec![0.0f32; batch * n];
        gemm(batch, h, n, grad_out, (h, 1), self.w2.data(), (n, 1), &mut dhidden, 0.0);
        for (d, &a) in dhidden.iter_mut().zip(hidden) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        gemm(n, batch, h, &dhidden, (1, n), input, (h, 1), grads.w1.data_mut(), 1.0);
        add_column_sums(grads.b1.data_mut(), &dhidden, n);
        let mut dinput = vec![0.0f32; batch * h];
        gemm(batch, n, h, &dhidden, (n, 1), self.w1.data(), (h, 1), &mut dinput, 0.0);
        dinput
    }

    fn params(&self) -> [(&'static str, &Tensor); 4] {
        [("W1", &self.w1), ("b1", &self.b1), ("W2", &self.w2), ("b2", &self.b2)]
    }

    fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("W1", &mut self.w1),
            ("b1", &mut self.b1),
            ("W2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

fn add_column_sums(acc: &mut [f32], rows: &[f32], width: usize) {
    for row in rows.chunks(width) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    /// Block input index feeding each permuted position: `u[j] = x[perm[j]]`.
    pub permutation: Vec<u32>,
    pub s1: Subnet,
    pub t1: Subnet,
    pub s2: Subnet,
    pub t2: Subnet,
}

impl CouplingBlock {
    pub fn subnets(&self) -> [(&'static str, &Subnet); 4] {
        [("s1", &self.s1), ("t1", &self.t1), ("s2", &self.s2), ("t2", &self.t2)]
    }

    fn subnets_mut(&mut self) -> [(&'static str, &mut Subnet); 4] {
        [
            ("s1", &mut self.s1),
            ("t1", &mut self.t1),
            ("s2", &mut self.s2),
            ("t2", &mut self.t2),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct FlowOutput {
    pub z: Tensor,
    pub log_det: f64,
}

impl FlowOutput {
    pub fn nll(&self) -> f64 {
        nll(self)
    }
}

/// `‖z‖² / 2 − log_det`.
pub fn nll(out: &FlowOutput) -> f64 {
    nll_parts(out.z.data(), out.log_det)
}

pub(crate) fn nll_parts(z: &[f32], log_det: f64) -> f64 {
    0.5 * z.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() - log_det
}

#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    config: FlowConfig,
    blocks: Vec<CouplingBlock>,
}

struct BlockTrace {
    u1: Vec<f32>,
    u2: Vec<f32>,
    v1: Vec<f32>,
    a1: Vec<f32>,
    a2: Vec<f32>,
    s1_hidden: Vec<f32>,
    t1_hidden: Vec<f32>,
    s2_hidden: Vec<f32>,
    t2_hidden: Vec<f32>,
}

/// Saved activations of a batched forward pass.
pub struct FlowTrace {
    batch: usize,
    blocks: Vec<BlockTrace>,
}

/// Batched forward result.
#[derive(Clone, Debug)]
pub struct FlowBatch {
    /// Row-major `[B, D]` latents.
    pub z: Vec<f32>,
    pub log_det: Vec<f64>,
}

impl FlowBatch {
    pub fn nll(&self, row: usize) -> f64 {
        let d = self.z.len() / self.log_det.len();
        nll_parts(&self.z[row * d..(row + 1) * d], self.log_det[row])
    }
}

impl Flow {
    /// Random permutations and He-initialized first subnet layers; final
    /// subnet layers start at zero so the untrained flow is a pure
    /// permutation with zero log-determinant.
    pub fn new(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let half = config.dim / 2;
        let normal = Normal::new(0.0f32, (2.0 / half as f32).sqrt()).expect("finite std");
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            let mut permutation: Vec<u32> = (0..config.dim as u32).collect();
            permutation.shuffle(&mut rng);
            let mut mk = || {
                let mut s = Subnet::zeros(half, config.subnet_hidden);
                for v in s.w1.data_mut() {
                    *v = normal.sample(&mut rng);
                }
                s
            };
            let (s1, t1, s2, t2) = (mk(), mk(), mk(), mk());
            blocks.push(CouplingBlock {
                permutation,
                s1,
                t1,
                s2,
                t2,
            });
        }
        Ok(Flow { config, blocks })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [CouplingBlock] {
        &mut self.blocks
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.params_mut() {
            t.fill(0.0);
        }
        out
    }

    /// Trainable tensors (permutations excluded), in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (sn, s) in b.subnets() {
                for (pn, t) in s.params() {
                    out.push((format!("flow.block{i}.{sn}.{pn}"), t));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (sn, s) in b.subnets_mut() {
                for (pn, t) in s.params_mut() {
                    out.push((format!("flow.block{i}.{sn}.{pn}"), t));
                }
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_batch(&self, x: &[f32], batch: usize) -> Result<()> {
        if batch == 0 || x.len() != batch * self.config.dim {
            return Err(Error::dim("flow", &[x.len()], &[batch, self.config.dim]));
        }
        Ok(())
    }

    #[inline]
    fn soft_clamp(&self, v: &mut [f32]) {
        let a = self.config.clamp;
        for x in v {
            *x = a * (*x / a).tanh();
        }
    }

    pub fn forward(&self, f: &[f32]) -> Result<FlowOutput> {
        let out = self.forward_batch(f, 1)?;
        Ok(FlowOutput {
            z: Tensor::from_vec(out.z),
            log_det: out.log_det[0],
        })
    }

    pub fn forward_batch(&self, x: &[f32], batch: usize) -> Result<FlowBatch> {
        self.run_forward(x, batch, false).map(|(b, _)| b)
    }

    pub fn forward_batch_traced(&self, x: &[f32], batch: usize) -> Result<(FlowBatch, FlowTrace)> {
        self.run_forward(x, batch, true)
            .map(|(b, t)| (b, t.expect("trace requested")))
    }

    fn run_forward(&self, x: &[f32], batch: usize, keep: bool) -> Result<(FlowBatch, Option<FlowTrace>)> {
        self.check_batch(x, batch)?;
        let d = self.config.dim;
        let h = d / 2;
        let mut cur = x.to_vec();
        let mut log_det = vec![0.0f64; batch];
        let mut traces = Vec::with_capacity(if keep { self.blocks.len() } else { 0 });
        for block in &self.blocks {
            let mut u1 = Vec::with_capacity(batch * h);
            let mut u2 = Vec::with_capacity(batch * h);
            for row in cur.chunks(d) {
                for (j, &p) in block.permutation.iter().enumerate() {
                    if j < h {
                        u1.push(row[p as usize]);
                    } else {
                        u2.push(row[p as usize]);
                    }
                }
            }
            let (s2_hidden, mut a2) = block.s2.forward(&u2, batch);
            let (t2_hidden, t2_out) = block.t2.forward(&u2, batch);
            self.soft_clamp(&mut a2);
            let v1: Vec<f32> = (0..batch * h).map(|i| u1[i] * a2[i].exp() + t2_out[i]).collect();
            let (s1_hidden, mut a1) = block.s1.forward(&v1, batch);
            let (t1_hidden, t1_out) = block.t1.forward(&v1, batch);
            self.soft_clamp(&mut a1);
            let v2: Vec<f32> = (0..batch * h).map(|i| u2[i] * a1[i].exp() + t1_out[i]).collect();
            for (b, ld) in log_det.iter_mut().enumerate() {
                let r = b * h..(b + 1) * h;
                *ld += a1[r.clone()].iter().chain(&a2[r.clone()]).map(|&v| v as f64).sum::<f64>();
                cur[b * d..b * d + h].copy_from_slice(&v1[r.clone()]);
                cur[b * d + h..(b + 1) * d].copy_from_slice(&v2[r]);
            }
            if keep {
                traces.push(BlockTrace {
                    u1,
                    u2,
                    v1,
                    a1,
                    a2,
                    s1_hidden,
                    t1_hidden,
                    s2_hidden,
                    t2_hidden,
                });
            }
        }
        if !cur.iter().all(|v| v.is_finite()) || !log_det.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("flow produced a non-finite latent".into()));
        }
        let trace = keep.then_some(FlowTrace { batch, blocks: traces });
        Ok((FlowBatch { z: cur, log_det }, trace))
    }

    /// Algebraic inverse of [`Flow::forward`].
    pub fn inverse(&self, z: &[f32]) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.inverse_batch(z, 1)?))
    }

    pub fn inverse_batch(&self, z: &[f32], batch: usize) -> Result<Vec<f32>> {
        self.check_batch(z, batch)?;
        let d = self.config.dim;
        let h = d / 2;
        let mut cur = z.to_vec();
        for block in self.blocks.iter().rev() {
            let mut v1 = Vec::with_capacity(batch * h);
            let mut v2 = Vec::with_capacity(batch * h);
            for row in cur.chunks(d) {
                v1.extend_from_slice(&row[..h]);
                v2.extend_from_slice(&row[h..]);
            }
            let mut a1 = block.s1.output(&v1, batch);
            self.soft_clamp(&mut a1);
            let t1 = block.t1.output(&v1, batch);
            let u2: Vec<f32> = (0..batch * h).map(|i| (v2[i] - t1[i]) * (-a1[i]).exp()).collect();
            let mut a2 = block.s2.output(&u2, batch);
            self.soft_clamp(&mut a2);
            let t2 = block.t2.output(&u2, batch);
            let u1: Vec<f32> = (0..batch * h).map(|i| (v1[i] - t2[i]) * (-a2[i]).exp()).collect();
            for (b, row) in cur.chunks_mut(d).enumerate() {
                for (j, &p) in block.permutation.iter().enumerate() {
                    row[p as usize] = if j < h { u1[b * h + j] } else { u2[b * h + j - h] };
                }
            }
        }
        if !cur.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("flow inverse produced a non-finite value".into()));
        }
        Ok(cur)
    }

    /// Backpropagates `grad_z` (`[B, D]`) and `grad_log_det` (`[B]`) through a
    /// traced forward pass, adding parameter gradients into `grads` and
    /// returning the gradient w.r.t. the flow input.
    pub fn backward_batch(
        &self,
        trace: &FlowTrace,
        grad_z: &[f32],
        grad_log_det: &[f32],
        grads: &mut Flow,
    ) -> Result<Vec<f32>> {
        let batch = trace.batch;
        self.check_batch(grad_z, batch)?;
        if grad_log_det.len() != batch {
            return Err(Error::dim("flow backward", &[grad_log_det.len()], &[batch]));
        }
        let d = self.config.dim;
        let h = d / 2;
        let alpha = self.config.clamp;
        let mut dcur = grad_z.to_vec();
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let t = &trace.blocks[bi];
            let g = &mut grads.blocks[bi];
            let mut dv1 = Vec::with_capacity(batch * h);
            let mut dv2 = Vec::with_capacity(batch * h);
            for row in dcur.chunks(d) {
                dv1.extend_from_slice(&row[..h]);
                dv2.extend_from_slice(&row[h..]);
            }

            // v2 = u2 * exp(a1) + t1(v1)
            let mut du2 = vec![0.0f32; batch * h];
            let mut dr1 = vec![0.0f32; batch * h];
            for i in 0..batch * h {
                let e = t.a1[i].exp();
                du2[i] = dv2[i] * e;
                let da = dv2[i] * t.u2[i] * e + grad_log_det[i / h];
                let q = t.a1[i] / alpha;
                dr1[i] = da * (1.0 - q * q);
            }
            let from_s1 = block.s1.backward(&t.v1, &t.s1_hidden, &dr1, batch, &mut g.s1);
            let from_t1 = block.t1.backward(&t.v1, &t.t1_hidden, &dv2, batch, &mut g.t1);
            for i in 0..batch * h {
                dv1[i] += from_s1[i] + from_t1[i];
            }

            // v1 = u1 * exp(a2) + t2(u2)
            let mut du1 = vec![0.0f32; batch * h];
            let mut dr2 = vec![0.0f32; batch * h];
            for i in 0..batch * h {
                let e = t.a2[i].exp();
                du1[i] = dv1[i] * e;
                let da = dv1[i] * t.u1[i] * e + grad_log_det[i / h];
                let q = t.a2[i] / alpha;
                dr2[i] = da * (1.0 - q * q);
            }
            let from_s2 = block.s2.backward(&t.u2, &t.s2_hidden, &dr2, batch, &mut g.s2);
            let from_t2 = block.t2.backward(&t.u2, &t.t2_hidden, &dv1, batch, &mut g.t2);
            for i in 0..batch * h {
                du2[i] += from_s2[i] + from_t2[i];
            }

            for (b, row) in dcur.chunks_mut(d).enumerate() {
                for (j, &p) in block.permutation.iter().enumerate() {
                    row[p as usize] = if j < h { du1[b * h + j] } else { du2[b * h + j - h] };
                }
            }
        }
        Ok(dcur)
    }

    /// Gradient of `nll(forward(f))` w.r.t. every flow parameter (returned
    /// as a zero-initialized model of the same shape) and w.r.t. `f`.
    pub fn nll_gradient(&self, f: &[f32]) -> Result<(Flow, Tensor)> {
        let (out, trace) = self.forward_batch_traced(f, 1)?;
        let mut grads = self.zeros_like();
        let df = self.backward_batch(&trace, &out.z, &[-1.0], &mut grads)?;
        Ok((grads, Tensor::from_vec(df)))
    }
}
