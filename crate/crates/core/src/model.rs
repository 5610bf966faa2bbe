//! The full blank predictor: two fragment encoders merged into `u`, optional
//! attention-pooled visual vector `ṽ`, and `softmax(W_blank (u + ṽ))`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, project_regions, weighted_pool, AttentionParams, AttentionVars, VideoFeatures,
};
use crate::error::{Error, Result};
use crate::init::glorot;
use crate::tensor::{softmax_forward, Graph, Tensor, Var};
use crate::text::{
    encode_fragment, merge, BlankSentence, EmbeddingTable, LstmParams, LstmVars, Side,
};

/// Which inputs reach the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Sentence fragments plus attended video features.
    Full,
    /// Both fragments, no visual pathway.
    Sentence,
    /// Left fragment only; `u_R` is held at zero.
    LeftOnly,
}

impl Mode {
    pub fn uses_video(self) -> bool {
        self == Mode::Full
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::Sentence => "sentence",
            Mode::LeftOnly => "left_only",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "sentence" => Ok(Mode::Sentence),
            "left_only" => Ok(Mode::LeftOnly),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Layer widths and switches. `emb_dim` comes from the embedding table and
/// `channels` from the feature files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub emb_dim: usize,
    pub hidden: usize,
    pub u_dim: usize,
    pub attn_dim: usize,
    pub channels: usize,
    pub right_reverse: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("emb_dim", self.emb_dim),
            ("hidden", self.hidden),
            ("u_dim", self.u_dim),
            ("attn_dim", self.attn_dim),
            ("channels", self.channels),
        ];
        for (name, v) in dims {
            let needed = name != "channels" || self.mode.uses_video();
            if needed && v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Answer classes of the output softmax, indexed densely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 {
            return Err(Error::Config(format!(
                "answer vocabulary needs at least 2 classes, got {}",
                words.len()
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate answer word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Every answer seen at least `min_count` times, in lexicographic order.
    pub fn from_samples(samples: &[BlankSentence], min_count: usize) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in samples {
            *counts.entry(s.answer.as_str()).or_default() += 1;
        }
        let words = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .map(|(w, _)| w.to_string())
            .collect();
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }
}

/// Every trainable tensor of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub answers: AnswerVocab,
    pub left: LstmParams,
    pub right: LstmParams,
    pub w_u: Tensor,
    /// Present only in [`Mode::Full`].
    pub attention: Option<AttentionParams>,
    pub w_blank: Tensor,
}

pub(crate) const LSTM_PARTS: [&str; 3] = ["w_x", "w_h", "b"];
pub(crate) const ATTENTION_PARTS: [&str; 4] = ["w_i", "w_vh", "w_uh", "w_p"];

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        answers: AnswerVocab,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let left = LstmParams::init(rng, config.emb_dim, config.hidden);
        let right = LstmParams::init(rng, config.emb_dim, config.hidden);
        let w_u = glorot(rng, config.u_dim, 2 * config.hidden);
        let attention = config
            .mode
            .uses_video()
            .then(|| AttentionParams::init(rng, config.channels, config.u_dim, config.attn_dim));
        let w_blank = glorot(rng, answers.len(), config.u_dim);
        Ok(Self {
            config,
            answers,
            left,
            right,
            w_u,
            attention,
            w_blank,
        })
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig, answers: AnswerVocab) -> Result<Self> {
        config.validate()?;
        let (d, h, u, k) = (config.emb_dim, config.hidden, config.u_dim, config.attn_dim);
        let attention = config.mode.uses_video().then(|| AttentionParams {
            w_i: Tensor::zeros(&[u, config.channels]),
            w_vh: Tensor::zeros(&[k, u]),
            w_uh: Tensor::zeros(&[k, u]),
            w_p: Tensor::zeros(&[1, k]),
        });
        Ok(Self {
            left: LstmParams::zeros(d, h),
            right: LstmParams::zeros(d, h),
            w_u: Tensor::zeros(&[u, 2 * h]),
            attention,
            w_blank: Tensor::zeros(&[answers.len(), u]),
            config,
            answers,
        })
    }

    /// Stable (name, tensor) listing; the order is the checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (side, p) in [("left", &self.left), ("right", &self.right)] {
            for (part, t) in LSTM_PARTS.iter().zip([&p.w_x, &p.w_h, &p.bias]) {
                out.push((format!("{side}.{part}"), t));
            }
        }
        out.push(("w_u".to_string(), &self.w_u));
        if let Some(a) = &self.attention {
            for (part, t) in ATTENTION_PARTS
                .iter()
                .zip([&a.w_i, &a.w_vh, &a.w_uh, &a.w_p])
            {
                out.push((format!("attn.{part}"), t));
            }
        }
        out.push(("w_blank".to_string(), &self.w_blank));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (side, p) in [("left", &mut self.left), ("right", &mut self.right)] {
            for (part, t) in LSTM_PARTS.iter().zip([&mut p.w_x, &mut p.w_h, &mut p.bias]) {
                out.push((format!("{side}.{part}"), t));
            }
        }
        out.push(("w_u".to_string(), &mut self.w_u));
        if let Some(a) = &mut self.attention {
            for (part, t) in
                ATTENTION_PARTS
                    .iter()
                    .zip([&mut a.w_i, &mut a.w_vh, &mut a.w_uh, &mut a.w_p])
            {
                out.push((format!("attn.{part}"), t));
            }
        }
        out.push(("w_blank".to_string(), &mut self.w_blank));
        out
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let left = self.left.register(g, trainable);
        let right = self.right.register(g, trainable);
        let mut reg = |t: &Tensor| if trainable { g.param(t) } else { g.leaf(t) };
        let w_u = reg(&self.w_u);
        let attention = self.attention.as_ref().map(|a| a.register(g, trainable));
        let w_blank = if trainable {
            g.param(&self.w_blank)
        } else {
            g.leaf(&self.w_blank)
        };
        ModelVars {
            config: self.config.clone(),
            left,
            right,
            w_u,
            attention,
            w_blank,
        }
    }

    /// Adds the graph's leaf gradients into each tensor's grad slot.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &ModelVars) -> Result<()> {
        let order = vars.ordered();
        let tensors = self.named_tensors_mut();
        if order.len() != tensors.len() {
            return Err(Error::Contract("model vars do not match parameters".into()));
        }
        for (v, (_, t)) in order.into_iter().zip(tensors) {
            g.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    /// Single-sample inference.
    pub fn predict(
        &self,
        sample: &BlankSentence,
        embeddings: &EmbeddingTable,
        features: Option<&VideoFeatures>,
    ) -> Result<Prediction> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let input = SampleInput::new(sample, embeddings, features);
        let out = vars.forward(&mut g, &input)?;
        out.read(&g)
    }
}

/// [`ModelParams`] as recorded on a graph.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub config: ModelConfig,
    pub left: LstmVars,
    pub right: LstmVars,
    pub w_u: Var,
    pub attention: Option<AttentionVars>,
    pub w_blank: Var,
}

/// Borrowed inputs for one forward pass.
#[derive(Debug, Clone)]
pub struct SampleInput<'a> {
    pub left: Vec<&'a [f64]>,
    pub right: Vec<&'a [f64]>,
    pub features: Option<&'a VideoFeatures>,
}

impl<'a> SampleInput<'a> {
    pub fn new(
        sample: &BlankSentence,
        embeddings: &'a EmbeddingTable,
        features: Option<&'a VideoFeatures>,
    ) -> Self {
        Self {
            left: embeddings.embed_lookup(&sample.left_tokens),
            right: embeddings.embed_lookup(&sample.right_tokens),
            features,
        }
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub u: Var,
    pub v_tilde: Option<Var>,
    pub attention: Option<Var>,
    pub logits: Var,
}

/// Probabilities and (in full mode) attention weights for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub attention: Option<Vec<f64>>,
    pub u: Vec<f64>,
}

impl Prediction {
    /// Predicted class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        crate::attention::argmax(&self.probs)
    }

    /// Indices of the `n` most probable classes, best first.
    pub fn top_n(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        idx.truncate(n);
        idx
    }
}

impl ForwardOut {
    pub fn read(&self, g: &Graph) -> Result<Prediction> {
        Ok(Prediction {
            probs: softmax_forward(g.value(self.logits))?,
            attention: self.attention.map(|a| g.value(a).to_vec()),
            u: g.value(self.u).to_vec(),
        })
    }
}

impl ModelVars {
    /// Inverse of the [`ModelParams::named_tensors`] order.
    pub fn from_ordered(config: &ModelConfig, v: &[Var]) -> Result<Self> {
        let expected = if config.mode.uses_video() { 12 } else { 8 };
        if v.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} parameter vars, got {}",
                v.len()
            )));
        }
        let lstm = |i: usize| LstmVars {
            w_x: v[i],
            w_h: v[i + 1],
            bias: v[i + 2],
            hidden: config.hidden,
        };
        let attention = config.mode.uses_video().then(|| AttentionVars {
            w_i: v[7],
            w_vh: v[8],
            w_uh: v[9],
            w_p: v[10],
        });
        Ok(Self {
            config: config.clone(),
            left: lstm(0),
            right: lstm(3),
            w_u: v[6],
            attention,
            w_blank: v[expected - 1],
        })
    }

    fn ordered(&self) -> Vec<Var> {
        let mut v = vec![
            self.left.w_x,
            self.left.w_h,
            self.left.bias,
            self.right.w_x,
            self.right.w_h,
            self.right.bias,
            self.w_u,
        ];
        if let Some(a) = &self.attention {
            v.extend([a.w_i, a.w_vh, a.w_uh, a.w_p]);
        }
        v.push(self.w_blank);
        v
    }

    /// Sentence encoding `u` for one sample.
    pub fn encode_text(&self, g: &mut Graph, input: &SampleInput<'_>) -> Result<Var> {
        let rr = self.config.right_reverse;
        let u_left = encode_fragment(g, &input.left, &self.left, Side::Left, rr)?;
        let u_right = match self.config.mode {
            Mode::LeftOnly => g.zeros(&[self.config.hidden])?,
            _ => encode_fragment(g, &input.right, &self.right, Side::Right, rr)?,
        };
        merge(g, u_left, u_right, self.w_u)
    }

    pub fn forward(&self, g: &mut Graph, input: &SampleInput<'_>) -> Result<ForwardOut> {
        let u = self.encode_text(g, input)?;
        let (v_tilde, attention) = match &self.attention {
            Some(a) => {
                let feats = input.features.ok_or_else(|| {
                    Error::Config("full mode needs video features for every sample".into())
                })?;
                let raw = g.leaf(feats.pooled());
                let f_v = project_regions(g, raw, a.w_i)?;
                let p = attend(g, f_v, u, a)?;
                (Some(weighted_pool(g, p, f_v)?), Some(p))
            }
            None => (None, None),
        };
        let logits = predict_logits(g, u, v_tilde, self.w_blank)?;
        Ok(ForwardOut {
            u,
            v_tilde,
            attention,
            logits,
        })
    }
}

/// `W_blank · (u + ṽ)`; a missing `ṽ` acts as the zero vector.
pub fn predict_logits(g: &mut Graph, u: Var, v_tilde: Option<Var>, w_blank: Var) -> Result<Var> {
    let z = match v_tilde {
        Some(v) => g.add(u, v)?,
        None => u,
    };
    g.matvec(w_blank, z)
}

/// `softmax(W_blank · (u + ṽ))`.
pub fn predict_blank(g: &mut Graph, u: Var, v_tilde: Option<Var>, w_blank: Var) -> Result<Var> {
    let logits = predict_logits(g, u, v_tilde, w_blank)?;
    g.softmax(logits)
}

/// `−ln dist[target]` for an already-normalized distribution. Training uses
/// the fused [`Graph::softmax_cross_entropy`] on logits instead.
pub fn cross_entropy(dist: &[f64], target: usize) -> Result<f64> {
    match dist.get(target) {
        Some(&p) => Ok(-p.ln()),
        None => Err(Error::Index {
            index: target,
            len: dist.len(),
        }),
    }
}
