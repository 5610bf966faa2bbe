//! Spatial attention over pooled region features.
//!
//! Raw region rows are projected into the sentence space
//! (`F_v[r] = tanh(W_I · raw[r])`), scored against `u` through
//! `h = tanh(W_vh F_v[r] + W_uh u)` and `score[r] = W_p · h[r]`, and the
//! softmax of the scores weights the projected rows into `ṽ`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::glorot;
use crate::tensor::{framewise_max_forward, Graph, Tensor, Var};

/// Frame-pooled region features for one video, `R × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pooled: Tensor,
}

impl VideoFeatures {
    pub fn new(pooled: Tensor) -> Result<Self> {
        if pooled.rank() != 2 {
            return Err(Error::dim("video features", pooled.shape(), &[]));
        }
        if pooled.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(
                "region features contain a non-finite value".into(),
            ));
        }
        Ok(Self { pooled })
    }

    /// Max-pools a `T × R × C` frame stack.
    pub fn from_frames(frames: &Tensor) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 3 {
            return Err(Error::dim("video frames", s, &[]));
        }
        let (data, _) = framewise_max_forward(frames.data(), s[0], s[1] * s[2])?;
        Self::new(Tensor::matrix(s[1], s[2], data)?)
    }

    pub fn regions(&self) -> usize {
        self.pooled.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.pooled.shape()[1]
    }

    pub fn pooled(&self) -> &Tensor {
        &self.pooled
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Region projection, `d_u × C`.
    pub w_i: Tensor,
    /// `k × d_u`
    pub w_vh: Tensor,
    /// `k × d_u`
    pub w_uh: Tensor,
    /// `1 × k`
    pub w_p: Tensor,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        u_dim: usize,
        attn_dim: usize,
    ) -> Self {
        Self {
            w_i: glorot(rng, u_dim, channels),
            w_vh: glorot(rng, attn_dim, u_dim),
            w_uh: glorot(rng, attn_dim, u_dim),
            w_p: glorot(rng, 1, attn_dim),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_i.shape()[1]
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> AttentionVars {
        let mut reg = |t: &Tensor| if trainable { g.param(t) } else { g.leaf(t) };
        AttentionVars {
            w_i: reg(&self.w_i),
            w_vh: reg(&self.w_vh),
            w_uh: reg(&self.w_uh),
            w_p: reg(&self.w_p),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_i: Var,
    pub w_vh: Var,
    pub w_uh: Var,
    pub w_p: Var,
}

/// Normalized region weights read back from a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Vec<f64>,
}

impl AttentionMap {
    /// Highest-weight region, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.weights)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `F_v = tanh(raw · W_Iᵀ)`, one projected row per region.
pub fn project_regions(g: &mut Graph, raw: Var, w_i: Var) -> Result<Var> {
    let z = g.matmul_nt(raw, w_i)?;
    g.tanh(z)
}

/// Attention weights over the rows of `f_v` conditioned on `u`.
pub fn attend(g: &mut Graph, f_v: Var, u: Var, p: &AttentionVars) -> Result<Var> {
    let regions = g.shape(f_v).first().copied().unwrap_or(0);
    let vh = g.matmul_nt(f_v, p.w_vh)?;
    let uh = g.matvec(p.w_uh, u)?;
    let pre = g.broadcast_row_add(vh, uh)?;
    let h = g.tanh(pre)?;
    let scores = g.matmul_nt(h, p.w_p)?;
    let scores = g.reshape(scores, &[regions])?;
    g.softmax(scores)
}

/// `ṽ = Σ_r P[r] · F_v[r]`.
pub fn weighted_pool(g: &mut Graph, weights: Var, f_v: Var) -> Result<Var> {
    g.vecmat(weights, f_v)
}
