//! Training runs, evaluation and ablation sweeps.
//!
//! A run directory holds:
//!
//! ```text
//! metrics.jsonl     one EpochMetrics object per line
//! last.ssvc         checkpoint after the latest epoch
//! last.state.json   optimizer moments and progress, for --resume
//! best.ssvc         best validation checkpoint so far
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{load_embeddings, DataError, Dataset, Example, Vocabulary};
use crate::metrics::{corpus_bleu, BleuReport, MetricsError};
use crate::network::{load_checkpoint, save_checkpoint, ModelError, SsvcConfig, SsvcParams};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("incompatible config and data: {0}")]
    Incompatible(String),
    #[error("cannot resume: {0}")]
    Resume(String),
}

impl From<crate::network::CheckpointError> for ExperimentError {
    fn from(e: crate::network::CheckpointError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    /// Directory with `train` and `val` splits.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Pretrained word vectors in text format.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `vocab_size: 0` means "take it from the training captions".
    pub model: SsvcConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Stop as soon as validation exact match reaches this fraction.
    #[serde(default)]
    pub target_exact_match: Option<f64>,
    #[serde(default)]
    pub paths: RunPaths,
}

fn default_batch_size() -> usize {
    8
}

fn default_eval_every() -> usize {
    1
}

impl RunConfig {
    pub fn new(model: SsvcConfig, seed: u64, epochs: usize) -> Self {
        Self {
            model,
            optimizer: AdamConfig::default(),
            seed,
            epochs,
            batch_size: default_batch_size(),
            eval_every: default_eval_every(),
            target_exact_match: None,
            paths: RunPaths::default(),
        }
    }

    /// Hex SHA-256 of the canonical JSON of the model and training
    /// settings. Paths are left out.
    pub fn hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.paths = RunPaths::default();
        let json = serde_json::to_string(&hashed).expect("serializable");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn resolved_model(&self, vocab: &Vocabulary) -> Result<SsvcConfig> {
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = vocab.len();
        } else if model.vocab_size != vocab.len() {
            return Err(ExperimentError::Incompatible(format!(
                "config vocab_size is {} but the training captions give {} tokens",
                model.vocab_size,
                vocab.len()
            )));
        }
        model.validate()?;
        Ok(model)
    }
}

fn check_compatible(config: &SsvcConfig, ds: &Dataset, split: &str) -> Result<()> {
    for v in &ds.videos {
        if v.num_frames() != config.frames_per_seq {
            return Err(ExperimentError::Incompatible(format!(
                "{split} video `{}` has {} frames, config frames_per_seq is {}",
                v.id,
                v.num_frames(),
                config.frames_per_seq
            )));
        }
        if v.feature_dim() != config.feature_dim {
            return Err(ExperimentError::Incompatible(format!(
                "{split} video `{}` has feature dimension {}, config feature_dim is {}",
                v.id,
                v.feature_dim(),
                config.feature_dim
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default)]
    pub val_loss: Option<f64>,
    #[serde(default)]
    pub val_exact_match: Option<f64>,
    #[serde(default)]
    pub val_bleu: Option<BleuReport>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    /// Fraction of videos whose caption equals one of their references.
    pub exact_match: f64,
    pub bleu: BleuReport,
    pub captions: BTreeMap<String, String>,
}

/// Greedy caption for one video, as words.
pub fn caption_words(
    params: &SsvcParams,
    vocab: &Vocabulary,
    frames: &Tensor,
) -> Result<Vec<String>> {
    let ids = params.infer(frames, params.config.max_caption_len - 1)?;
    Ok(vocab.decode(&ids))
}

/// Greedy caption string per video id.
pub fn caption_dataset(
    params: &SsvcParams,
    vocab: &Vocabulary,
    videos: &[crate::data::VideoSequence],
) -> Result<BTreeMap<String, String>> {
    videos
        .par_iter()
        .map(|v| {
            Ok((
                v.id.clone(),
                caption_words(params, vocab, &v.frames)?.join(" "),
            ))
        })
        .collect()
}

pub fn evaluate(params: &SsvcParams, vocab: &Vocabulary, ds: &Dataset) -> Result<Evaluation> {
    let examples = ds.examples(vocab, params.config.max_caption_len)?;
    if examples.is_empty() {
        return Err(ExperimentError::Incompatible(
            "evaluation split is empty".into(),
        ));
    }
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| params.loss(&ex.frames, &ex.caption))
        .collect::<std::result::Result<_, _>>()?;
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;

    let words: Vec<Vec<String>> = ds
        .videos
        .par_iter()
        .map(|v| caption_words(params, vocab, &v.frames))
        .collect::<Result<_>>()?;
    let refs: Vec<Vec<Vec<String>>> = ds
        .videos
        .iter()
        .map(|v| ds.tokenized_references(v))
        .collect();
    let exact = words
        .iter()
        .zip(&refs)
        .filter(|(w, r)| r.contains(w))
        .count();
    let bleu = corpus_bleu(&words, &refs)?;
    let captions = ds
        .videos
        .iter()
        .zip(&words)
        .map(|(v, w)| (v.id.clone(), w.join(" ")))
        .collect();
    Ok(Evaluation {
        loss,
        exact_match: exact as f64 / ds.videos.len() as f64,
        bleu,
        captions,
    })
}

/// Optimizer and bookkeeping needed to continue a run exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub adam: Adam,
    pub best: Option<(f64, f64)>,
    pub best_epoch: Option<usize>,
}

pub struct TrainOutcome {
    pub params: SsvcParams,
    pub vocab: Vocabulary,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Seeded order of the examples for one epoch.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One pass over `examples` in mini-batches; returns the mean pre-update loss.
pub fn train_epoch(
    params: &mut SsvcParams,
    adam: &mut Adam,
    examples: &[Example],
    order: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in order.chunks(batch_size.max(1)) {
        let mut grads = params.store.zero_grads();
        for &i in batch {
            let (loss, g) = params.loss_and_grads(&examples[i].frames, &examples[i].caption)?;
            total += loss;
            for (acc, g) in grads.iter_mut().zip(g) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        adam.step(&mut params.store, &grads);
    }
    Ok(total / order.len() as f64)
}

/// Larger exact match wins, then lower loss.
fn better(candidate: (f64, f64), best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((em, loss)) => candidate.0 > em || (candidate.0 == em && candidate.1 < loss),
    }
}

fn state_path(out: &Path) -> PathBuf {
    out.join("last.state.json")
}

/// Trains on `train`, evaluating on `val` every `eval_every` epochs and on
/// the final epoch. With `out_dir` set, checkpoints and the metrics log are
/// written there; `resume` continues from its `last.*` files.
pub fn train_run(
    run: &RunConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    out_dir: Option<&Path>,
    resume: bool,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let vocab = train.build_vocab();
    let config = run.resolved_model(&vocab)?;
    check_compatible(&config, train, "train")?;
    if let Some(val) = val {
        check_compatible(&config, val, "val")?;
    }
    let examples = train.examples(&vocab, config.max_caption_len)?;
    if examples.is_empty() {
        return Err(ExperimentError::Incompatible(
            "training split is empty".into(),
        ));
    }

    let mut params = SsvcParams::new(config.clone(), run.seed)?;
    if let Some(path) = &run.paths.embeddings {
        let loaded = load_embeddings(path, &vocab, config.embed_dim, run.seed)?;
        log::info!(
            "embeddings cover {:.1}% of the vocabulary ({} missing)",
            100.0 * loaded.coverage.ratio(),
            loaded.coverage.missing.len()
        );
        *params.store.get_mut(params.embedding.matrix) = loaded.matrix;
    }
    let mut state = TrainState {
        epoch: 0,
        adam: Adam::new(run.optimizer.clone(), &params.store),
        best: None,
        best_epoch: None,
    };

    if let Some(out) = out_dir {
        fs::create_dir_all(out)?;
        if resume {
            let ck = load_checkpoint(&out.join("last.ssvc"), Some(&config)).map_err(|e| {
                ExperimentError::Resume(format!("{}: {e}", out.join("last.ssvc").display()))
            })?;
            if ck.vocab != vocab {
                return Err(ExperimentError::Resume(
                    "checkpoint vocabulary differs from the training captions".into(),
                ));
            }
            params = ck.params;
            state = serde_json::from_str(&fs::read_to_string(state_path(out))?)?;
            log::info!("resuming after epoch {}", state.epoch);
        } else {
            fs::write(out.join("metrics.jsonl"), "")?;
        }
    } else if resume {
        return Err(ExperimentError::Resume(
            "no output directory to resume from".into(),
        ));
    }

    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in state.epoch + 1..=run.epochs {
        let started = Instant::now();
        let order = epoch_order(run.seed, epoch, examples.len());
        let train_loss = train_epoch(
            &mut params,
            &mut state.adam,
            &examples,
            &order,
            run.batch_size,
        )?;
        let mut metrics = EpochMetrics {
            epoch,
            train_loss,
            val_loss: None,
            val_exact_match: None,
            val_bleu: None,
            seconds: 0.0,
        };
        let key = match val {
            Some(val) if epoch % run.eval_every.max(1) == 0 || epoch == run.epochs => {
                let ev = evaluate(&params, &vocab, val)?;
                metrics.val_loss = Some(ev.loss);
                metrics.val_exact_match = Some(ev.exact_match);
                metrics.val_bleu = Some(ev.bleu);
                Some((ev.exact_match, ev.loss))
            }
            Some(_) => None,
            None => Some((0.0, train_loss)),
        };
        metrics.seconds = started.elapsed().as_secs_f64();
        state.epoch = epoch;
        let improved = key.is_some_and(|k| better(k, state.best));
        if improved {
            state.best = key;
            state.best_epoch = Some(epoch);
        }
        if let Some(out) = out_dir {
            save_checkpoint(&params, &vocab, &out.join("last.ssvc"))?;
            fs::write(state_path(out), serde_json::to_string(&state)?)?;
            if improved {
                save_checkpoint(&params, &vocab, &out.join("best.ssvc"))?;
            }
            let mut log = OpenOptions::new()
                .append(true)
                .create(true)
                .open(out.join("metrics.jsonl"))?;
            writeln!(log, "{}", serde_json::to_string(&metrics)?)?;
        }
        on_epoch(&metrics);
        let reached = matches!(
            (run.target_exact_match, metrics.val_exact_match),
            (Some(t), Some(em)) if em >= t
        );
        history.push(metrics);
        if reached {
            stopped_early = epoch < run.epochs;
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        vocab,
        history,
        best_epoch: state.best_epoch,
        stopped_early,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub enc_layers: usize,
    pub shp_units: usize,
    pub config_hash: String,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub val_loss: f64,
    pub exact_match: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub wall_seconds: f64,
}

/// One run per `(layers, shp)` pair, each with `base` otherwise unchanged.
/// Variants run in parallel; rows come back in sweep order.
pub fn ablate(
    base: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    layers: &[usize],
    shp_units: &[usize],
) -> Result<Vec<AblationRow>> {
    let variants: Vec<(usize, usize)> = layers
        .iter()
        .flat_map(|&l| shp_units.iter().map(move |&s| (l, s)))
        .collect();
    variants
        .par_iter()
        .map(|&(l, s)| {
            let started = Instant::now();
            let mut run = base.clone();
            run.model.enc_layers = l;
            run.model.shp_units = s;
            run.paths = RunPaths::default();
            let outcome = train_run(&run, train, Some(val), None, false, |_| {})?;
            let ev = evaluate(&outcome.params, &outcome.vocab, val)?;
            Ok(AblationRow {
                enc_layers: l,
                shp_units: s,
                config_hash: run.hash(),
                epochs_run: outcome.history.len(),
                final_train_loss: outcome.history.last().map_or(f64::NAN, |m| m.train_loss),
                val_loss: ev.loss,
                exact_match: ev.exact_match,
                bleu1: ev.bleu.bleu1,
                bleu2: ev.bleu.bleu2,
                bleu3: ev.bleu.bleu3,
                bleu4: ev.bleu.bleu4,
                wall_seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
