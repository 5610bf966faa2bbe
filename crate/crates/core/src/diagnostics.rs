//! Finite-difference check of the whole model on a tiny random instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::VideoFeatures;
use crate::error::Result;
use crate::model::{AnswerVocab, Mode, ModelConfig, ModelParams, ModelVars, SampleInput};
use crate::tensor::{grad_check, GradCheckReport, Tensor};

/// Sizes of the throwaway model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyModel {
    pub mode: Mode,
    pub regions: usize,
    pub channels: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub u_dim: usize,
    pub attn_dim: usize,
    pub answers: usize,
}

impl Default for TinyModel {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            regions: 4,
            channels: 6,
            emb_dim: 5,
            hidden: 7,
            u_dim: 8,
            attn_dim: 6,
            answers: 5,
        }
    }
}

/// Region features are drawn wider than embeddings so the attention
/// gradients stay well above finite-difference rounding noise.
const FEATURE_SCALE: f64 = 3.0;

/// Central-difference step for the whole-model check. Smaller steps let
/// rounding in the loss swamp gradients near 1e-8.
pub const MODEL_EPS: f64 = 1e-4;

/// Fragment lengths of the probe batch; covers empty left and right sides.
const FRAGMENTS: [(usize, usize); 4] = [(3, 2), (0, 4), (2, 0), (1, 1)];

/// Builds a seeded random model plus a small batch and compares the
/// batch-mean cross-entropy gradient of every parameter against central
/// differences.
pub fn check_model_gradients(tiny: &TinyModel, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        mode: tiny.mode,
        emb_dim: tiny.emb_dim,
        hidden: tiny.hidden,
        u_dim: tiny.u_dim,
        attn_dim: tiny.attn_dim,
        channels: tiny.channels,
        right_reverse: true,
    };
    let answers = AnswerVocab::new((0..tiny.answers).map(|i| format!("a{i}")).collect())?;
    let params = ModelParams::init(config.clone(), answers, &mut rng)?;

    let mut vec = |n: usize, scale: f64| -> Vec<f64> {
        (0..n)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect()
    };
    let mut batch = Vec::new();
    for (l, r) in FRAGMENTS {
        let left: Vec<Vec<f64>> = (0..l).map(|_| vec(tiny.emb_dim, 1.0)).collect();
        let right: Vec<Vec<f64>> = (0..r).map(|_| vec(tiny.emb_dim, 1.0)).collect();
        let raw = Tensor::matrix(
            tiny.regions,
            tiny.channels,
            vec(tiny.regions * tiny.channels, FEATURE_SCALE),
        )?;
        batch.push((left, right, VideoFeatures::new(raw)?));
    }
    let targets: Vec<usize> = (0..batch.len())
        .map(|_| rng.random_range(0..tiny.answers))
        .collect();

    let tensors: Vec<Tensor> = params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    grad_check(&tensors, eps, |g, v| {
        let vars = ModelVars::from_ordered(&config, v)?;
        let mut total = None;
        for ((left, right, feats), &t) in batch.iter().zip(&targets) {
            let input = SampleInput {
                left: left.iter().map(Vec::as_slice).collect(),
                right: right.iter().map(Vec::as_slice).collect(),
                features: Some(feats),
            };
            let out = vars.forward(g, &input)?;
            let l = g.softmax_cross_entropy(out.logits, t)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let total = total.expect("nonempty batch");
        g.scale(total, 1.0 / batch.len() as f64)
    })
}
