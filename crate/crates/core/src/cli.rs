//! The `vfb` command line.
//!
//! `run` returns the process exit code: 0 on success, 1 for runtime
//! failures and 2 for usage errors. Every subcommand loads and validates its
//! inputs before writing anything.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::diagnostics::{check_model_gradients, TinyModel, MODEL_EPS};
use crate::error::{Error, Result};
use crate::io::{
    load_checkpoint, load_dataset, load_embeddings, load_feature_map, save_checkpoint,
    write_metrics, CheckpointMeta,
};
use crate::model::{Mode, ModelParams};
use crate::synth::{gen_corpus, SynthConfig};
use crate::text::{BlankSentence, EmbeddingTable};
use crate::train::{evaluate, train, Architecture, FeatureMap, Regime, TrainData, TrainingConfig};

/// Checkpoint file written by `train --out DIR`.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
/// Per-epoch log written next to the checkpoint.
pub const METRICS_FILE: &str = "metrics.tsv";
/// `gradcheck` passes when the worst relative error is below this.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "vfb",
    version,
    about = "Video fill-in-the-blank with merging LSTMs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write model.ckpt and metrics.tsv into --out.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print top-n answers (and optionally attention) per record.
    Predict(PredictArgs),
    /// Finite-difference check of all model gradients on a tiny instance.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic corpus.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML file with the same keys as the long flags (underscored); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    val_dataset: Option<PathBuf>,
    #[arg(long)]
    features_dir: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// full | sentence | left_only
    #[arg(long)]
    mode: Option<Mode>,
    /// e2e | incremental
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    /// Sentence-model checkpoint to seed the incremental regime.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    u_dim: Option<usize>,
    #[arg(long)]
    attn_dim: Option<usize>,
    /// Must match the embedding file when given.
    #[arg(long)]
    emb_dim: Option<usize>,
    #[arg(long)]
    answer_min_count: Option<usize>,
    /// Feed the right fragment in reading order instead of reversed.
    #[arg(long)]
    right_forward: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    dataset: Option<PathBuf>,
    val_dataset: Option<PathBuf>,
    features_dir: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    mode: Option<Mode>,
    regime: Option<Regime>,
    init_from: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    patience: Option<usize>,
    hidden: Option<usize>,
    u_dim: Option<usize>,
    attn_dim: Option<usize>,
    emb_dim: Option<usize>,
    answer_min_count: Option<usize>,
    right_forward: Option<bool>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Required for full-mode checkpoints.
    #[arg(long)]
    features_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    features_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    top_n: usize,
    /// Also print the attention weights over regions.
    #[arg(long)]
    dump_attention: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "full")]
    mode: Mode,
    #[arg(long, default_value_t = 4)]
    regions: usize,
    #[arg(long, default_value_t = 6)]
    channels: usize,
    #[arg(long, default_value_t = 5)]
    emb_dim: usize,
    #[arg(long, default_value_t = 7)]
    hidden: usize,
    #[arg(long, default_value_t = 8)]
    u_dim: usize,
    #[arg(long, default_value_t = 6)]
    attn_dim: usize,
    #[arg(long, default_value_t = 5)]
    answers: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = MODEL_EPS)]
    eps: f64,
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    answers: Option<usize>,
    /// Answers sharing one sentence template in the visual family.
    #[arg(long)]
    ambiguity: Option<usize>,
    #[arg(long)]
    visual_fraction: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    emb_dim: Option<usize>,
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    match s {
        "e2e" => Ok(Regime::EndToEnd),
        "incremental" => Ok(Regime::Incremental),
        other => Err(format!(
            "unknown regime {other:?} (expected e2e or incremental)"
        )),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::GenSynth(a) => cmd_gen_synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn required(v: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    v.ok_or_else(|| Error::Config(format!("missing --{flag}")))
}

fn features_needed(
    mode: Mode,
    dir: Option<&Path>,
    sets: &[&[BlankSentence]],
) -> Result<FeatureMap> {
    if !mode.uses_video() {
        return Ok(FeatureMap::new());
    }
    let dir = dir.ok_or_else(|| Error::Config("mode full needs --features-dir".into()))?;
    load_feature_map(
        dir,
        sets.iter()
            .flat_map(|s| s.iter().map(|b| b.video_id.as_str())),
    )
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let file: TrainFile = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text)
                .map_err(|e| Error::format(p.display().to_string(), e.message()))?
        }
        None => TrainFile::default(),
    };
    let defaults = TrainingConfig::default();
    let arch_defaults = Architecture::default();

    let dataset = required(a.dataset.or(file.dataset), "dataset")?;
    let val_dataset = required(a.val_dataset.or(file.val_dataset), "val-dataset")?;
    let embeddings_path = required(a.embeddings.or(file.embeddings), "embeddings")?;
    let out = required(a.out.or(file.out), "out")?;
    let features_dir = a.features_dir.or(file.features_dir);
    let init_from = a.init_from.or(file.init_from);

    let cfg = TrainingConfig {
        mode: a.mode.or(file.mode).unwrap_or(defaults.mode),
        regime: a.regime.or(file.regime).unwrap_or(defaults.regime),
        lr: a.lr.or(file.lr).unwrap_or(defaults.lr),
        batch_size: a
            .batch_size
            .or(file.batch_size)
            .unwrap_or(defaults.batch_size),
        max_epochs: a.epochs.or(file.epochs).unwrap_or(defaults.max_epochs),
        patience: a.patience.or(file.patience).unwrap_or(defaults.patience),
        seed: a.seed.or(file.seed).unwrap_or(defaults.seed),
        epsilon: defaults.epsilon,
        answer_min_count: a
            .answer_min_count
            .or(file.answer_min_count)
            .unwrap_or(defaults.answer_min_count),
        init_checkpoint: init_from.clone(),
    };
    cfg.validate()?;
    let arch = Architecture {
        hidden: a.hidden.or(file.hidden).unwrap_or(arch_defaults.hidden),
        u_dim: a.u_dim.or(file.u_dim).unwrap_or(arch_defaults.u_dim),
        attn_dim: a
            .attn_dim
            .or(file.attn_dim)
            .unwrap_or(arch_defaults.attn_dim),
        right_reverse: !(a.right_forward || file.right_forward.unwrap_or(false)),
    };

    let embeddings = load_embeddings(&embeddings_path)?;
    if let Some(d) = a.emb_dim.or(file.emb_dim) {
        if d != embeddings.dim() {
            return Err(Error::Config(format!(
                "--emb-dim {d} does not match embedding file width {}",
                embeddings.dim()
            )));
        }
    }
    let train_set = load_dataset(&dataset)?;
    let val_set = load_dataset(&val_dataset)?;
    let features = features_needed(cfg.mode, features_dir.as_deref(), &[&train_set, &val_set])?;
    let init = match (&cfg.regime, &init_from) {
        (Regime::Incremental, Some(p)) => Some(load_checkpoint(p)?.params),
        _ => None,
    };

    let data = TrainData {
        train: &train_set,
        val: &val_set,
        embeddings: &embeddings,
        features: &features,
    };
    let outcome = train(&cfg, &arch, &data, init.as_ref())?;

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let meta = CheckpointMeta {
        seed: cfg.seed,
        training: Some(cfg.clone()),
    };
    save_checkpoint(
        out.join(CHECKPOINT_FILE),
        &outcome.params,
        Some(&outcome.optimizer),
        &meta,
    )?;
    write_metrics(out.join(METRICS_FILE), &outcome.metrics)?;

    let mut stdout = std::io::stdout().lock();
    for m in &outcome.metrics {
        let _ = writeln!(
            stdout,
            "epoch {} train_loss {:.6} val_loss {:.6} val_acc {:.6}",
            m.epoch, m.train_loss, m.val_loss, m.val_acc
        );
    }
    let _ = writeln!(
        stdout,
        "best epoch {}{}; wrote {}",
        outcome.best_epoch,
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        },
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(0)
}

struct Loaded {
    params: ModelParams,
    samples: Vec<BlankSentence>,
    embeddings: EmbeddingTable,
    features: FeatureMap,
}

fn load_for_inference(
    checkpoint: &Path,
    dataset: &Path,
    embeddings: &Path,
    features_dir: Option<&Path>,
) -> Result<Loaded> {
    let params = load_checkpoint(checkpoint)?.params;
    let embeddings = load_embeddings(embeddings)?;
    if embeddings.dim() != params.config.emb_dim {
        return Err(Error::Config(format!(
            "embedding width {} does not match checkpoint ({})",
            embeddings.dim(),
            params.config.emb_dim
        )));
    }
    let samples = load_dataset(dataset)?;
    let features = features_needed(params.config.mode, features_dir, &[&samples])?;
    Ok(Loaded {
        params,
        samples,
        embeddings,
        features,
    })
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let l = load_for_inference(
        &a.checkpoint,
        &a.dataset,
        &a.embeddings,
        a.features_dir.as_deref(),
    )?;
    let r = evaluate(&l.params, &l.samples, &l.embeddings, &l.features)?;
    println!("accuracy {:.6}", r.accuracy);
    println!("loss {:.6}", r.loss);
    println!(
        "samples {} correct {} oov_answers {} ({:.6})",
        r.total,
        r.correct,
        r.oov,
        r.oov_rate()
    );
    Ok(0)
}

fn cmd_predict(a: PredictArgs) -> Result<i32> {
    if a.top_n == 0 {
        return Err(Error::Config("--top-n must be positive".into()));
    }
    let l = load_for_inference(
        &a.checkpoint,
        &a.dataset,
        &a.embeddings,
        a.features_dir.as_deref(),
    )?;
    if a.dump_attention && !l.params.config.mode.uses_video() {
        return Err(Error::Config(format!(
            "--dump-attention needs a full-mode checkpoint, this one is {}",
            l.params.config.mode
        )));
    }
    let mut stdout = std::io::stdout().lock();
    for s in &l.samples {
        let feats =
            match l.params.config.mode.uses_video() {
                true => Some(l.features.get(&s.video_id).ok_or_else(|| {
                    Error::Config(format!("no video features for {:?}", s.video_id))
                })?),
                false => None,
            };
        let p = l.params.predict(s, &l.embeddings, feats)?;
        for (rank, k) in p.top_n(a.top_n).into_iter().enumerate() {
            let _ = writeln!(
                stdout,
                "pred\t{}\t{}\t{}\t{:.6}",
                s.video_id,
                rank + 1,
                l.params.answers.word(k),
                p.probs[k]
            );
        }
        if a.dump_attention {
            let weights = p.attention.as_deref().unwrap_or_default();
            let cols: Vec<String> = weights.iter().map(|w| format!("{w:.9}")).collect();
            let _ = writeln!(stdout, "attn\t{}\t{}", s.video_id, cols.join("\t"));
        }
    }
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let tiny = TinyModel {
        mode: a.mode,
        regions: a.regions,
        channels: a.channels,
        emb_dim: a.emb_dim,
        hidden: a.hidden,
        u_dim: a.u_dim,
        attn_dim: a.attn_dim,
        answers: a.answers,
    };
    let r = check_model_gradients(&tiny, a.seed, a.eps)?;
    let ok = r.max_rel_error < GRADCHECK_TOLERANCE;
    println!("checked {} coordinates", r.checked);
    println!(
        "max relative error {:.3e} (parameter {} entry {}: analytic {:.6e}, numeric {:.6e})",
        r.max_rel_error, r.worst.0, r.worst.1, r.analytic, r.numeric
    );
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { 0 } else { 1 })
}

fn cmd_gen_synth(a: GenSynthArgs) -> Result<i32> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        seed: a.seed.unwrap_or(d.seed),
        n_train: a.n_train.unwrap_or(d.n_train),
        n_val: a.n_val.unwrap_or(d.n_val),
        n_test: a.n_test.unwrap_or(d.n_test),
        regions: a.regions.unwrap_or(d.regions),
        channels: a.channels.unwrap_or(d.channels),
        n_answers: a.answers.unwrap_or(d.n_answers),
        ambiguity: a.ambiguity.unwrap_or(d.ambiguity),
        visual_fraction: a.visual_fraction.unwrap_or(d.visual_fraction),
        amplitude: a.amplitude.unwrap_or(d.amplitude),
        noise: a.noise.unwrap_or(d.noise),
        frames: a.frames.unwrap_or(d.frames),
        emb_dim: a.emb_dim.unwrap_or(d.emb_dim),
    };
    cfg.validate()?;
    let paths = gen_corpus(&cfg, &a.out)?;
    println!(
        "wrote {} train / {} val / {} test records to {}",
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        paths.root.display()
    );
    Ok(0)
}
