use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{Phase, TrainConfig};
use crate::autodiff::Graph;
use crate::corpus::{make_batches, temperature_sample_weights, BatchStream, Corpus, Direction, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{bind, init_params, Dropout, ModelConfig};
use crate::objectives::{make_negative, mle_batch_loss, unions_step_loss, PositiveBatch};

const STREAM_DROPOUT: u64 = 0;
const STREAM_NEGATIVE: u64 = 1;
const STREAM_BATCHES: u64 = 2;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub phase: Phase,
    pub mle_loss: f64,
    pub ul_loss: Option<f64>,
    /// Mean gold-token probability of the negative batch.
    pub negative_prob: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Receives checkpoints and per-step log records as training proceeds.
pub trait TrainHooks {
    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()>;
    fn on_log(&mut self, record: &LogRecord) -> Result<()>;
}

/// Keeps everything in memory.
#[derive(Default)]
pub struct Collect {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRecord>,
}

impl TrainHooks for Collect {
    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.checkpoints.push(ckpt.clone());
        Ok(())
    }

    fn on_log(&mut self, record: &LogRecord) -> Result<()> {
        self.log.push(record.clone());
        Ok(())
    }
}

/// Writes `step-NNNNNN.ckpt` files and appends `train.log.jsonl` in a
/// run directory.
pub struct RunDir {
    dir: PathBuf,
    log: BufWriter<File>,
    echo_every: u64,
}

pub const LOG_FILE: &str = "train.log.jsonl";

pub fn checkpoint_file_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

impl RunDir {
    /// `echo_every > 0` prints a loss line to stderr at that cadence.
    pub fn open(dir: &Path, echo_every: u64) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let log = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            log: BufWriter::new(log),
            echo_every,
        })
    }

    /// Drops log lines past `step`, for resuming after an interruption.
    pub fn truncate_log(dir: &Path, step: u64) -> Result<()> {
        let path = dir.join(LOG_FILE);
        let Ok(text) = fs::read_to_string(&path) else { return Ok(()) };
        let mut kept = String::new();
        for line in text.lines() {
            let rec: LogRecord = serde_json::from_str(line)?;
            if rec.step <= step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(path, kept)?;
        Ok(())
    }
}

impl TrainHooks for RunDir {
    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.log.flush()?;
        save_checkpoint(ckpt, &self.dir.join(checkpoint_file_name(ckpt.step)))
    }

    fn on_log(&mut self, r: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.log, r)?;
        self.log.write_all(b"\n")?;
        if self.echo_every > 0 && r.step % self.echo_every == 0 {
            let ul = r.ul_loss.map(|u| format!(" ul {u:.4} neg_p {:.4}", r.negative_prob.unwrap_or(0.0)));
            eprintln!(
                "[{}] step {:>6} mle {:.4}{} lr {:.3e}",
                r.phase,
                r.step,
                r.mle_loss,
                ul.unwrap_or_default(),
                r.lr
            );
        }
        Ok(())
    }
}

fn step_rng(cfg: &TrainConfig, stream: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.phase.seed_salt());
    rng.set_stream(step.wrapping_mul(4).wrapping_add(stream));
    rng
}

/// Temperature-scaled sampling weights over the supervised directions.
pub fn direction_weights(corpus: &Corpus, temperature: f64) -> Result<Vec<(Direction, f64)>> {
    let dirs = corpus.supervised_directions();
    let sizes: Vec<f64> = corpus
        .direction_sizes(Split::Train, &dirs)
        .into_iter()
        .map(|s| s as f64)
        .collect();
    let w = temperature_sample_weights(&sizes, temperature)?;
    Ok(dirs.into_iter().zip(w).collect())
}

fn batch_stream(cfg: &TrainConfig, model: &ModelConfig, corpus: &Corpus) -> Result<BatchStream> {
    let weights = direction_weights(corpus, cfg.temperature)?;
    let seed = step_rng(cfg, STREAM_BATCHES, 0).next_u64();
    make_batches(corpus, Split::Train, cfg.max_tokens_per_batch, &weights, model.max_len, seed)
}

/// Fresh step-0 pretraining state.
pub fn pretrain_start(model: &ModelConfig, cfg: &TrainConfig, fingerprint: &str) -> Result<Checkpoint> {
    if cfg.phase != Phase::Pretrain {
        return Err(Error::config(format!("pretrain needs phase pretrain, got {}", cfg.phase)));
    }
    cfg.validate()?;
    let params = init_params(model)?;
    Ok(Checkpoint {
        model: model.clone(),
        train: cfg.clone(),
        step: 0,
        fingerprint: fingerprint.to_string(),
        adam: AdamState::zeros(&params),
        params,
    })
}

/// Step-0 tuning state: the start checkpoint's parameters with a fresh
/// optimizer.
pub fn tune_start(start: &Checkpoint, cfg: &TrainConfig) -> Result<Checkpoint> {
    if !cfg.phase.is_tune() {
        return Err(Error::config(format!("tuning needs a tune phase, got {}", cfg.phase)));
    }
    cfg.validate()?;
    Ok(Checkpoint {
        model: start.model.clone(),
        train: cfg.clone(),
        step: 0,
        fingerprint: start.fingerprint.clone(),
        adam: AdamState::zeros(&start.params),
        params: start.params.clone(),
    })
}

pub fn pretrain(
    model: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    fingerprint: &str,
    hooks: &mut dyn TrainHooks,
) -> Result<Checkpoint> {
    run(pretrain_start(model, cfg, fingerprint)?, corpus, hooks)
}

pub fn unions_tune(
    start: &Checkpoint,
    cfg: &TrainConfig,
    corpus: &Corpus,
    hooks: &mut dyn TrainHooks,
) -> Result<Checkpoint> {
    if cfg.phase != Phase::UnionsTune {
        return Err(Error::config(format!("unions_tune needs phase unions_tune, got {}", cfg.phase)));
    }
    run(tune_start(start, cfg)?, corpus, hooks)
}

/// The UNIONS loop with the unlikelihood weight forced to zero.
pub fn vanilla_tune(
    start: &Checkpoint,
    cfg: &TrainConfig,
    corpus: &Corpus,
    hooks: &mut dyn TrainHooks,
) -> Result<Checkpoint> {
    let cfg = TrainConfig {
        phase: Phase::VanillaTune,
        ul_weight: 0.0,
        ..cfg.clone()
    };
    run(tune_start(start, &cfg)?, corpus, hooks)
}

/// Trains from `state` until `state.train.total_steps`. A step-0 state is
/// emitted as a checkpoint first, so tuning series start at the untuned
/// model. Resuming from any emitted checkpoint reproduces the
/// uninterrupted run exactly.
pub fn run(mut state: Checkpoint, corpus: &Corpus, hooks: &mut dyn TrainHooks) -> Result<Checkpoint> {
    state.check_fingerprint(&corpus.fingerprint())?;
    let cfg = state.train.clone();
    cfg.validate()?;
    state.model.validate()?;
    let vocab: Vocabulary = corpus.vocabulary()?;
    if vocab.len() != state.model.vocab_size {
        return Err(Error::config(format!(
            "model vocabulary {} does not match corpus vocabulary {}",
            state.model.vocab_size,
            vocab.len()
        )));
    }
    let mut batches = batch_stream(&cfg, &state.model, corpus)?;
    for _ in 0..state.step {
        batches.next();
    }
    if state.step == 0 {
        hooks.on_checkpoint(&state)?;
    }
    let clock = Instant::now();
    while state.step < cfg.total_steps {
        let t = state.step + 1;
        let batch = batches.next().ok_or_else(|| Error::Corpus("batch stream ended".into()))?;
        let pos = PositiveBatch::from_batch(corpus, &vocab, Split::Train, &batch)?;
        let mut g = Graph::new();
        let bound = bind(&mut g, &state.params);
        let mut drop_rng = step_rng(&cfg, STREAM_DROPOUT, t);
        let mut dropout = Dropout::new(state.model.dropout, &mut drop_rng);
        let (loss, mle, ul, negative_prob) = if cfg.phase == Phase::UnionsTune {
            let mut neg_rng = step_rng(&cfg, STREAM_NEGATIVE, t);
            let neg = make_negative(&pos, &vocab, cfg.negative_mode, &mut neg_rng)?;
            let s = unions_step_loss(
                &mut g,
                &bound,
                &state.model,
                &pos,
                &neg,
                cfg.ul_weight,
                cfg.smoothing,
                &mut dropout,
            )?;
            (s.total, s.mle, Some(s.ul), Some(s.negative_prob))
        } else {
            let l = mle_batch_loss(&mut g, &bound, &state.model, &pos, cfg.smoothing, &mut dropout)?;
            (l, g.value(l).data()[0], None, None)
        };
        if !g.value(loss).data()[0].is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = g.backward(loss)?;
        drop(g);
        let lr = cfg.lr_at(t);
        state.adam.update(&mut state.params, &grads, cfg.adam, lr, t)?;
        state.step = t;
        hooks.on_log(&LogRecord {
            step: t,
            phase: cfg.phase,
            mle_loss: mle,
            ul_loss: ul,
            negative_prob,
            lr,
            wall_ms: clock.elapsed().as_millis() as u64,
        })?;
        if t % cfg.checkpoint_every == 0 || t == cfg.total_steps {
            hooks.on_checkpoint(&state)?;
        }
    }
    Ok(state)
}
