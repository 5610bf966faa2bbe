//! Training and evaluation: batched cross-entropy with Adagrad, early
//! stopping on validation loss, and the end-to-end / incremental regimes.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::VideoFeatures;
use crate::error::{Error, Result};
use crate::model::{AnswerVocab, Mode, ModelConfig, ModelParams, SampleInput};
use crate::tensor::{Graph, Tensor};
use crate::text::{BlankSentence, EmbeddingTable};

/// Pooled features keyed by video id.
pub type FeatureMap = HashMap<String, VideoFeatures>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// All parameters from fresh initialization.
    #[serde(rename = "e2e", alias = "end_to_end")]
    EndToEnd,
    /// Encoders and `W_u` seeded from a trained sentence model.
    #[serde(rename = "incremental")]
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub regime: Regime,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// Answers rarer than this in the training set are left out of the
    /// output vocabulary.
    pub answer_min_count: usize,
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            regime: Regime::EndToEnd,
            lr: 0.01,
            batch_size: 16,
            max_epochs: 50,
            patience: 3,
            seed: 0,
            epsilon: 1e-8,
            answer_min_count: 1,
            init_checkpoint: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("adagrad epsilon must be positive".into()));
        }
        if self.regime == Regime::Incremental && self.init_checkpoint.is_none() {
            return Err(Error::Config(
                "incremental regime requires an init checkpoint".into(),
            ));
        }
        Ok(())
    }
}

/// Layer widths not implied by the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: usize,
    pub u_dim: usize,
    pub attn_dim: usize,
    pub right_reverse: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: 512,
            u_dim: 1000,
            attn_dim: 512,
            right_reverse: true,
        }
    }
}

/// Per-coordinate Adagrad accumulators, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub epsilon: f64,
    accumulators: BTreeMap<String, Vec<f64>>,
}

impl AdagradState {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            accumulators: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.accumulators.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.accumulators.get(name).map(Vec::as_slice)
    }

    pub fn insert(&mut self, name: impl Into<String>, acc: Vec<f64>) {
        self.accumulators.insert(name.into(), acc);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.accumulators
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// `acc += g²; θ −= lr·g / (sqrt(acc) + ε)`.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::dim("adagrad_step", param.shape(), &[grad.len()]));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {name}[{i}]"
            )));
        }
        let acc = self
            .accumulators
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        if acc.len() != grad.len() {
            return Err(Error::dim("adagrad_step", &[acc.len()], &[grad.len()]));
        }
        let eps = self.epsilon;
        for ((theta, a), &g) in param.data_mut().iter_mut().zip(acc.iter_mut()).zip(grad) {
            *a += g * g;
            *theta -= lr * g / (a.sqrt() + eps);
        }
        Ok(())
    }
}

/// One Adagrad update over every parameter's grad slot, then clears the
/// slots. Nothing is modified if any gradient is non-finite.
pub fn adagrad_step(params: &mut ModelParams, state: &mut AdagradState, lr: f64) -> Result<()> {
    for (name, t) in params.named_tensors() {
        if let Some(i) = t.grad().and_then(|g| g.iter().position(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {name}[{i}]"
            )));
        }
    }
    for (name, t) in params.named_tensors_mut() {
        let grad = match t.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        };
        state.step(&name, t, &grad, lr)?;
        t.zero_grad();
    }
    Ok(())
}

/// Early-stopping decision over the validation losses seen so far.
///
/// Returns `(stop, best_epoch)`: `best_epoch` is the first index of the
/// minimum loss, and training stops once `patience` epochs have passed
/// since it without a strict improvement.
pub fn early_stop(val_losses: &[f64], patience: usize) -> (bool, usize) {
    let mut best = 0;
    for (i, &l) in val_losses.iter().enumerate() {
        if l < val_losses[best] {
            best = i;
        }
    }
    if val_losses.is_empty() {
        return (false, 0);
    }
    let since = val_losses.len() - 1 - best;
    (since >= patience.max(1), best)
}

/// Seeds a fresh full model with the encoders and `W_u` of a trained
/// sentence model, bit for bit. Everything else stays as initialized.
pub fn init_incremental(sentence: &ModelParams, mut fresh: ModelParams) -> Result<ModelParams> {
    let (s, f) = (&sentence.config, &fresh.config);
    let pairs = [
        ("embedding width", s.emb_dim, f.emb_dim),
        ("hidden width", s.hidden, f.hidden),
        ("u dimension", s.u_dim, f.u_dim),
    ];
    for (what, a, b) in pairs {
        if a != b {
            return Err(Error::Config(format!(
                "checkpoint {what} {a} does not match configured {b}"
            )));
        }
    }
    fresh.left = sentence.left.clone();
    fresh.right = sentence.right.clone();
    fresh.w_u = sentence.w_u.clone();
    for (_, t) in fresh.named_tensors_mut() {
        t.set_requires_grad(false);
    }
    Ok(fresh)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub params: ModelParams,
    pub optimizer: AdagradState,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Optimizer steps taken over all epochs, one per batch.
    pub updates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean cross-entropy over samples whose answer is in the vocabulary.
    pub loss: f64,
    pub total: usize,
    pub correct: usize,
    /// Samples whose answer is outside the vocabulary (always wrong).
    pub oov: usize,
}

impl EvalReport {
    pub fn oov_rate(&self) -> f64 {
        self.oov as f64 / self.total as f64
    }
}

fn features_for<'a>(
    mode: Mode,
    features: &'a FeatureMap,
    s: &BlankSentence,
) -> Result<Option<&'a VideoFeatures>> {
    if !mode.uses_video() {
        return Ok(None);
    }
    features
        .get(&s.video_id)
        .map(Some)
        .ok_or_else(|| Error::Config(format!("no video features for {:?}", s.video_id)))
}

/// Accuracy (argmax, lowest index on ties) and loss of `params` on `samples`.
///
/// Reported accuracies of the original system on the LSMDC movie
/// fill-in-the-blank benchmark were 0.280 (sentence), 0.155 (left
/// sentence), 0.317 (end-to-end) and 0.342 (incremental). Those figures need
/// the full benchmark and are context only, not targets for this code.
pub fn evaluate(
    params: &ModelParams,
    samples: &[BlankSentence],
    embeddings: &EmbeddingTable,
    features: &FeatureMap,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let mode = params.config.mode;
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let mark = g.len();
    let (mut correct, mut oov, mut loss_sum, mut scored) = (0, 0, 0.0, 0);
    for s in samples {
        let input = SampleInput::new(s, embeddings, features_for(mode, features, s)?);
        let out = vars.forward(&mut g, &input)?;
        let pred = out.read(&g)?;
        match params.answers.index_of(&s.answer) {
            Some(t) => {
                let l = g.softmax_cross_entropy(out.logits, t)?;
                loss_sum += g.scalar(l);
                scored += 1;
                if pred.argmax() == t {
                    correct += 1;
                }
            }
            None => oov += 1,
        }
        g.truncate(mark);
    }
    Ok(EvalReport {
        accuracy: correct as f64 / samples.len() as f64,
        loss: if scored > 0 {
            loss_sum / scored as f64
        } else {
            0.0
        },
        total: samples.len(),
        correct,
        oov,
    })
}

/// Borrowed training inputs.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [BlankSentence],
    pub val: &'a [BlankSentence],
    pub embeddings: &'a EmbeddingTable,
    pub features: &'a FeatureMap,
}

pub fn build_config(mode: Mode, arch: &Architecture, data: &TrainData<'_>) -> Result<ModelConfig> {
    let channels = if mode.uses_video() {
        let first = data
            .train
            .first()
            .ok_or_else(|| Error::Config("empty training set".into()))?;
        features_for(mode, data.features, first)?
            .map(VideoFeatures::channels)
            .unwrap_or(0)
    } else {
        0
    };
    let cfg = ModelConfig {
        mode,
        emb_dim: data.embeddings.dim(),
        hidden: arch.hidden,
        u_dim: arch.u_dim,
        attn_dim: arch.attn_dim,
        channels,
        right_reverse: arch.right_reverse,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains a fresh model (or, with `init`, an incremental one) and returns
/// the parameters of the best validation epoch.
pub fn train(
    cfg: &TrainingConfig,
    arch: &Architecture,
    data: &TrainData<'_>,
    init: Option<&ModelParams>,
) -> Result<TrainOutcome> {
    if cfg.regime == Regime::Incremental && init.is_none() {
        return Err(Error::Config(
            "incremental regime requires an init checkpoint".into(),
        ));
    }
    let mut check = cfg.clone();
    if init.is_some() && check.init_checkpoint.is_none() {
        check.init_checkpoint = Some(PathBuf::new());
    }
    check.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }

    let model_cfg = build_config(cfg.mode, arch, data)?;
    let answers = AnswerVocab::from_samples(data.train, cfg.answer_min_count)?;

    let mut prepared = Vec::with_capacity(data.train.len());
    for s in data.train {
        let Some(target) = answers.index_of(&s.answer) else {
            continue;
        };
        let feats = features_for(cfg.mode, data.features, s)?;
        if let Some(f) = feats {
            if f.channels() != model_cfg.channels {
                return Err(Error::dim(
                    "video features",
                    &[f.channels()],
                    &[model_cfg.channels],
                ));
            }
        }
        prepared.push((SampleInput::new(s, data.embeddings, feats), target));
    }
    if prepared.is_empty() {
        return Err(Error::Config(
            "no training sample has an in-vocabulary answer".into(),
        ));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(model_cfg, answers, &mut init_rng)?;
    if cfg.regime == Regime::Incremental {
        if let Some(src) = init {
            params = init_incremental(src, params)?;
        }
    }
    let mut state = AdagradState::new(cfg.epsilon);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut metrics = Vec::new();
    let mut val_losses = Vec::new();
    let mut best: Option<(ModelParams, AdagradState)> = None;
    let mut stopped_early = false;
    let mut updates = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let vars = params.register(&mut g, true);
            let mut sum = None;
            for &i in batch {
                let (input, target) = &prepared[i];
                let out = vars.forward(&mut g, input)?;
                let l = g.softmax_cross_entropy(out.logits, *target)?;
                sum = Some(match sum {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let Some(sum) = sum else { continue };
            let loss = g.scale(sum, 1.0 / batch.len() as f64)?;
            loss_total += g.scalar(sum);
            g.backward(loss)?;
            params.accumulate_grads(&g, &vars)?;
            adagrad_step(&mut params, &mut state, cfg.lr)?;
            updates += 1;
        }

        let val = evaluate(&params, data.val, data.embeddings, data.features)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_total / prepared.len() as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
        });
        val_losses.push(val.loss);
        let (stop, best_epoch) = early_stop(&val_losses, cfg.patience);
        if best_epoch == epoch {
            best = Some((params.clone(), state.clone()));
        }
        if stop {
            stopped_early = true;
            break;
        }
    }

    let (_, best_epoch) = early_stop(&val_losses, cfg.patience);
    let (params, optimizer) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        optimizer,
        metrics,
        best_epoch,
        stopped_early,
        updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn early_stop_examples() {
        assert_eq!(early_stop(&[3.0, 2.0, 1.0], 2), (false, 2));
        assert_eq!(early_stop(&[1.0, 1.1, 1.2], 2), (true, 0));
        // ties do not count as improvement
        assert_eq!(early_stop(&[2.0, 1.0, 1.0], 1), (true, 1));
        assert_eq!(early_stop(&[2.0, 1.0, 1.0, 1.0], 2), (true, 1));
        assert_eq!(early_stop(&[2.0, 1.0, 1.0], 2), (false, 1));
        assert_eq!(early_stop(&[], 3), (false, 0));
    }

    fn scalar_param(v: f64) -> Tensor {
        Tensor::vector(vec![v]).unwrap()
    }

    #[test]
    fn adagrad_zero_gradient_is_a_no_op() {
        let mut st = AdagradState::new(1e-8);
        let mut p = scalar_param(1.5);
        st.step("p", &mut p, &[0.0], 0.1).unwrap();
        assert_eq!(p.data(), &[1.5]);
        assert_eq!(st.get("p").unwrap(), &[0.0]);
    }

    #[test]
    fn adagrad_first_and_second_step() {
        let lr = 0.01;
        for g in [3.0, -0.2, 1e-3] {
            let mut st = AdagradState::new(1e-8);
            let mut p = scalar_param(0.0);
            st.step("p", &mut p, &[g], lr).unwrap();
            let first = p.data()[0];
            assert!(
                (first + lr * g.signum()).abs() < 1e-6 * lr.max(1.0),
                "{first}"
            );
            st.step("p", &mut p, &[g], lr).unwrap();
            let second = p.data()[0] - first;
            let expect = -lr * g / ((2.0 * g * g).sqrt() + 1e-8);
            assert!((second - expect).abs() < 1e-15);
            assert!((second + lr / 2f64.sqrt() * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn adagrad_rejects_non_finite_gradient() {
        let mut st = AdagradState::new(1e-8);
        let mut p = scalar_param(0.0);
        match st.step("w_blank", &mut p, &[f64::NAN], 0.1) {
            Err(Error::Numeric(m)) => assert!(m.contains("w_blank")),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.data(), &[0.0]);
    }

    #[test]
    fn adagrad_accumulators_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = AdagradState::new(1e-8);
        let mut p = Tensor::zeros(&[5]);
        let mut prev = vec![0.0; 5];
        for _ in 0..200 {
            let g: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            st.step("p", &mut p, &g, 0.05).unwrap();
            let acc = st.get("p").unwrap();
            assert!(acc.iter().zip(&prev).all(|(a, b)| a >= b));
            prev = acc.to_vec();
        }
    }

    #[test]
    fn incremental_requires_checkpoint() {
        let cfg = TrainingConfig {
            regime: Regime::Incremental,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
