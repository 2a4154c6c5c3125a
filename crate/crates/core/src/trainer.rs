//! Pretraining loop: sampler → twin encoders → hard-negative mining → loss →
//! SGD on the query encoder → momentum update of the key encoder → enqueue.
//!
//! The anchor goes through the gradient-updated query encoder. The positive,
//! the intra-video negatives and everything in the queue come from the
//! momentum key encoder and are constants for the step.
//!
//! Randomness is drawn from per-epoch streams derived from the run seed, so a
//! run resumed from an epoch-boundary checkpoint replays the same draws.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::curriculum::{CurriculumConfig, Phase};
use crate::dataset::{augment, AugConfig, Image, ImageShape, VideoCorpus};
use crate::encoder::{momentum_update, EncoderArch, EncoderParams};
use crate::error::{Error, Result};
use crate::loss::{contrastive_gradients, DEFAULT_TAU};
use crate::nn::Pool;
use crate::mining::{hard_negative_aggregate, NegativeQueue, GB_QUEUE_CAPACITY, GB_TOP_N};
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::rng::{stream, Rng, Stream};
use crate::sampler::{sample_tuple, SampleTuple, SamplerConfig};

/// Which negatives enter the loss (the negative-type ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMix {
    /// Intra-video and cross-video negatives, phase-gated by the curriculum.
    #[default]
    Joint,
    /// Only the aggregated cross-video negative, every epoch.
    CrossOnly,
    /// Only intra-video negatives, every epoch; Δ still follows the curriculum.
    IntraOnly,
}

impl std::str::FromStr for NegativeMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "cross_only" => Ok(Self::CrossOnly),
            "intra_only" => Ok(Self::IntraOnly),
            other => Err(Error::config("trainer.negatives", format!("unknown mix `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Queue capacity |N|.
    pub queue_capacity: usize,
    /// Number n of hardest cross-video entries aggregated into ẑ⁻.
    pub top_n: usize,
    pub tau: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            queue_capacity: GB_QUEUE_CAPACITY,
            top_n: GB_TOP_N,
            tau: DEFAULT_TAU,
        }
    }
}

impl MiningConfig {
    /// Entries required before loss-bearing steps start.
    pub fn warmup_target(&self) -> usize {
        self.top_n.max(self.queue_capacity / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.queue_capacity == 0 {
            return Err(Error::config("mining.queue_capacity", "must be ≥ 1"));
        }
        if self.top_n == 0 || self.top_n > self.queue_capacity {
            return Err(Error::config("mining.top_n", "need 1 ≤ top_n ≤ queue_capacity"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("mining.tau", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    /// Key-encoder momentum m.
    pub momentum: f64,
    /// Channel width of the reference backbone.
    pub encoder_width: usize,
    /// Global pooling of the reference backbone.
    pub encoder_pool: Pool,
    pub negatives: NegativeMix,
    /// Checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Write per-anchor mining diagnostics.
    pub log_mining: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl PretrainConfig {
    /// Reference encoder for images of `shape`.
    pub fn encoder_arch(&self, shape: ImageShape) -> EncoderArch {
        let mut arch = EncoderArch::reference(shape, self.encoder_width);
        arch.backbone.pool = self.encoder_pool;
        arch
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            optimizer: SgdConfig::default(),
            momentum: 0.999,
            encoder_width: 8,
            encoder_pool: Pool::Avg,
            negatives: NegativeMix::Joint,
            checkpoint_every: 0,
            log_mining: false,
            seed: 0,
        }
    }
}

/// Everything the pretraining loop needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainSetup {
    pub trainer: PretrainConfig,
    pub sampler: SamplerConfig,
    pub curriculum: CurriculumConfig,
    pub mining: MiningConfig,
    pub augment: AugConfig,
}

impl PretrainSetup {
    pub fn validate(&self) -> Result<()> {
        let t = &self.trainer;
        if t.epochs == 0 {
            return Err(Error::config("trainer.epochs", "must be ≥ 1"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&t.momentum) {
            return Err(Error::config("trainer.momentum", "must lie in [0, 1]"));
        }
        if !(t.optimizer.lr > 0.0) || t.optimizer.momentum < 0.0 || t.optimizer.weight_decay < 0.0 {
            return Err(Error::config("trainer.optimizer", "lr must be > 0, momentum and weight_decay ≥ 0"));
        }
        if t.encoder_width == 0 {
            return Err(Error::config("trainer.encoder_width", "must be ≥ 1"));
        }
        self.sampler.validate()?;
        self.mining.validate()?;
        self.effective_curriculum().validate()
    }

    /// Curriculum with epoch count and Δ_l taken from the trainer and sampler.
    pub fn effective_curriculum(&self) -> CurriculumConfig {
        CurriculumConfig {
            total_epochs: self.trainer.epochs,
            delta_low: self.sampler.delta_low,
            ..self.curriculum.clone()
        }
    }

    /// Loss phase for an epoch once the negative mix is applied.
    pub fn phase(&self, epoch: usize) -> Phase {
        match self.trainer.negatives {
            NegativeMix::Joint => self.effective_curriculum().phase(epoch),
            NegativeMix::CrossOnly => Phase::CrossOnly,
            NegativeMix::IntraOnly => Phase::Full,
        }
    }
}

/// Mutable training state. Checkpoints capture all of it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub optimizer: Sgd,
    pub queue: NegativeQueue,
    pub seed: u64,
}

/// One row of the step log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLogRow {
    pub epoch: usize,
    pub step: u64,
    pub phase: Phase,
    /// Mean Δ over the batch's tuples.
    pub delta: f64,
    pub loss: f64,
    pub lr: f64,
}

pub const STEP_LOG_HEADER: &str = "epoch,step,phase,delta,loss,lr";

impl StepLogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.2},{:?},{:?}",
            self.epoch, self.step, self.phase, self.delta, self.loss, self.lr
        )
    }
}

/// Per-anchor mining diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningRecord {
    pub step: u64,
    pub video_id: String,
    pub top: Vec<usize>,
    pub alpha: Vec<f64>,
    pub z_hat_norm: f64,
}

pub const MINING_LOG_HEADER: &str = "step,video_id,top_positions,top_alpha,z_hat_norm";

impl MiningRecord {
    pub fn to_csv(&self) -> String {
        let join = |v: Vec<String>| v.join(" ");
        format!(
            "{},{},{},{},{:?}",
            self.step,
            self.video_id,
            join(self.top.iter().map(|t| t.to_string()).collect()),
            join(self.alpha.iter().map(|a| format!("{a:?}")).collect()),
            self.z_hat_norm
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub phase: Phase,
    pub mining: Vec<MiningRecord>,
}

/// Checkpoint metadata stored next to the parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone_id: String,
    pub arch: EncoderArch,
    /// `(feature_dim, hidden, embed_dim)` of the projection head.
    pub head_dims: (usize, usize, usize),
    pub normalized: bool,
    pub step: u64,
    pub epochs_completed: usize,
    pub seed: u64,
    pub queue_capacity: usize,
    pub queue_video_ids: Vec<String>,
}

pub struct Pretrainer<'a> {
    corpus: &'a VideoCorpus,
    setup: PretrainSetup,
    video_index: HashMap<String, usize>,
    pub state: TrainState,
}

impl<'a> Pretrainer<'a> {
    pub fn new(corpus: &'a VideoCorpus, setup: PretrainSetup) -> Result<Self> {
        setup.validate()?;
        if corpus.videos().len() < 2 {
            return Err(Error::SingleVideo);
        }
        let arch = setup.trainer.encoder_arch(corpus.image_shape);
        let seed = setup.trainer.seed;
        let query = EncoderParams::init(arch, &mut stream(seed, Stream::Init, 0));
        // Key starts as an exact copy of the query.
        let key = query.clone();
        let n_params = query.backbone.len() + query.head.len();
        let state = TrainState {
            step: 0,
            epoch: 0,
            optimizer: Sgd::new(setup.trainer.optimizer.clone(), n_params),
            queue: NegativeQueue::new(setup.mining.queue_capacity),
            query,
            key,
            seed,
        };
        Ok(Self::with_state(corpus, setup, state))
    }

    fn with_state(corpus: &'a VideoCorpus, setup: PretrainSetup, state: TrainState) -> Self {
        let video_index = corpus
            .videos()
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.clone(), i))
            .collect();
        Self {
            corpus,
            setup,
            video_index,
            state,
        }
    }

    pub fn setup(&self) -> &PretrainSetup {
        &self.setup
    }

    fn frame(&self, video_id: &str, j: usize, rng: &mut Rng) -> Result<Image> {
        let idx = *self.video_index.get(video_id).ok_or_else(|| Error::Video {
            video: video_id.to_string(),
            reason: "not in corpus".into(),
        })?;
        let img = self.corpus.videos()[idx].frame(j)?;
        if self.setup.augment.is_identity() {
            Ok(img)
        } else {
            augment(&img, &self.setup.augment, rng)
        }
    }

    /// Samples one tuple per video in `videos`, using the Δ in force at `epoch`.
    pub fn sample_batch(&self, videos: &[usize], epoch: usize, rng: &mut Rng) -> Result<Vec<SampleTuple>> {
        let curriculum = self.setup.effective_curriculum();
        let with_negatives = self.setup.phase(epoch) == Phase::Full;
        let cfg = SamplerConfig {
            k: if with_negatives { self.setup.sampler.k } else { 0 },
            ..self.setup.sampler.clone()
        };
        videos
            .iter()
            .map(|&i| {
                let v = &self.corpus.videos()[i];
                let exclusion = curriculum.delta_at(epoch, v.len(), rng);
                sample_tuple(v, exclusion, &cfg, rng)
            })
            .collect()
    }

    /// Fills the queue with key embeddings of sampled positives until it holds
    /// enough entries for mining. No parameters change.
    pub fn warm_up(&mut self) -> Result<()> {
        let target = self.setup.mining.warmup_target();
        let mut rng = stream(self.state.seed, Stream::Warmup, 0);
        let mut order: Vec<usize> = (0..self.corpus.videos().len()).collect();
        while self.state.queue.len() < target {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.setup.trainer.batch_size) {
                let batch = self.sample_batch(chunk, 0, &mut rng)?;
                let mut embeddings = Vec::with_capacity(batch.len());
                let mut ids = Vec::with_capacity(batch.len());
                for t in &batch {
                    let img = self.frame(&t.video_id, t.positive, &mut rng)?;
                    embeddings.push(self.state.key.embed_one(&img)?);
                    ids.push(t.video_id.clone());
                }
                self.state.queue.enqueue(&embeddings, &ids)?;
                if self.state.queue.len() >= target {
                    break;
                }
            }
        }
        Ok(())
    }

    /// One optimization step over `batch` at `epoch`, with learning rate `lr`.
    pub fn train_step(&mut self, batch: &[SampleTuple], epoch: usize, lr: f64, rng: &mut Rng) -> Result<StepReport> {
        let step = self.state.step;
        self.train_step_inner(batch, epoch, lr, rng).map_err(|e| e.at_step(step))
    }

    fn train_step_inner(&mut self, batch: &[SampleTuple], epoch: usize, lr: f64, rng: &mut Rng) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let phase = self.setup.phase(epoch);
        let use_cross = self.setup.trainer.negatives != NegativeMix::IntraOnly;
        let use_intra = phase == Phase::Full && self.setup.trainer.negatives != NegativeMix::CrossOnly;
        if use_cross && self.state.queue.len() < self.setup.mining.warmup_target() {
            return Err(Error::QueueEmpty);
        }
        let tau = self.setup.mining.tau;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = self.state.query.zeros_like();
        let mut loss_sum = 0.0;
        let mut keys = Vec::with_capacity(batch.len());
        let mut ids = Vec::with_capacity(batch.len());
        let mut mining = Vec::new();

        for t in batch {
            let anchor = self.frame(&t.video_id, t.anchor, rng)?;
            let positive = self.frame(&t.video_id, t.positive, rng)?;
            let trace = self.state.query.forward_traced(&anchor)?;
            let q = trace.embedding();
            let z_plus = self.state.key.embed_one(&positive)?;

            let mut negatives: Vec<Vec<f64>> = Vec::new();
            if use_intra {
                for &n in &t.negatives {
                    let img = self.frame(&t.video_id, n, rng)?;
                    negatives.push(self.state.key.embed_one(&img)?);
                }
            }
            if use_cross {
                let hard = hard_negative_aggregate(
                    q,
                    &self.state.queue,
                    self.setup.mining.top_n,
                    tau,
                    Some(&t.video_id),
                )?;
                debug_assert!(hard
                    .top
                    .iter()
                    .all(|&p| self.state.queue.get(p).is_some_and(|e| e.video_id != t.video_id)));
                if self.setup.trainer.log_mining {
                    mining.push(MiningRecord {
                        step: self.state.step,
                        video_id: t.video_id.clone(),
                        top: hard.top.clone(),
                        alpha: hard.top_alpha.clone(),
                        z_hat_norm: crate::nn::l2_norm(&hard.z_hat),
                    });
                }
                negatives.push(hard.z_hat);
            }
            let refs: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
            let (loss, d_q, _, _) = contrastive_gradients(q, &z_plus, &refs, tau)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite);
            }
            loss_sum += loss;
            let d_q: Vec<f64> = d_q.into_iter().map(|g| g * scale).collect();
            self.state.query.backward(&trace, &d_q, &mut grads);
            keys.push(z_plus);
            ids.push(t.video_id.clone());
        }

        let TrainState {
            query, optimizer, ..
        } = &mut self.state;
        optimizer.step(query.iter_mut(), grads.iter(), lr);
        momentum_update(&mut self.state.key, &self.state.query, self.setup.trainer.momentum)?;
        self.state.queue.enqueue(&keys, &ids)?;
        self.state.step += 1;
        Ok(StepReport {
            loss: loss_sum * scale,
            phase,
            mining,
        })
    }

    /// Runs epoch `epoch`: videos in shuffled order, one tuple per video, in
    /// batches of `batch_size`.
    pub fn run_epoch(&mut self, epoch: usize, mut on_mining: impl FnMut(&MiningRecord)) -> Result<Vec<StepLogRow>> {
        let mut rng = stream(self.state.seed, Stream::Epoch, epoch as u64);
        let mut order: Vec<usize> = (0..self.corpus.videos().len()).collect();
        order.shuffle(&mut rng);
        let lr = cosine_lr(self.setup.trainer.optimizer.lr, epoch, self.setup.trainer.epochs);
        let mut rows = Vec::new();
        for chunk in order.chunks(self.setup.trainer.batch_size) {
            let batch = self.sample_batch(chunk, epoch, &mut rng)?;
            let delta = batch.iter().map(|t| t.exclusion as f64).sum::<f64>() / batch.len() as f64;
            let report = self.train_step(&batch, epoch, lr, &mut rng)?;
            report.mining.iter().for_each(&mut on_mining);
            rows.push(StepLogRow {
                epoch,
                step: self.state.step,
                phase: report.phase,
                delta,
                loss: report.loss,
                lr,
            });
        }
        self.state.epoch = epoch + 1;
        Ok(rows)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let s = &self.state;
        let arch = s.query.arch.clone();
        let meta = CheckpointMeta {
            backbone_id: arch.backbone.id(),
            head_dims: (arch.backbone.feature_dim(), arch.head_hidden, arch.embed_dim),
            arch,
            normalized: true,
            step: s.step,
            epochs_completed: s.epoch,
            seed: s.seed,
            queue_capacity: s.queue.capacity(),
            queue_video_ids: s.queue.entries().map(|e| e.video_id.clone()).collect(),
        };
        let queue: Vec<f64> = s.queue.entries().flat_map(|e| e.embedding.iter().copied()).collect();
        checkpoint::save(
            dir,
            &meta,
            &[
                ("query.backbone", &s.query.backbone),
                ("query.head", &s.query.head),
                ("key.backbone", &s.key.backbone),
                ("key.head", &s.key.head),
                ("optimizer.velocity", &s.optimizer.velocity),
                ("queue.embeddings", &queue),
            ],
        )
    }

    /// Restores a trainer from a checkpoint written by [`Pretrainer::save_checkpoint`].
    pub fn resume(corpus: &'a VideoCorpus, setup: PretrainSetup, dir: &Path) -> Result<Self> {
        setup.validate()?;
        let mut archive = checkpoint::load::<CheckpointMeta>(dir)?;
        let meta = archive.meta.clone();
        let expected = setup.trainer.encoder_arch(corpus.image_shape);
        if meta.arch != expected {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                reason: format!("architecture {} does not match config", meta.backbone_id),
            });
        }
        let params = |archive: &mut checkpoint::Archive<CheckpointMeta>, who: &str| -> Result<EncoderParams> {
            Ok(EncoderParams {
                arch: meta.arch.clone(),
                backbone: archive.take(&format!("{who}.backbone"), dir)?,
                head: archive.take(&format!("{who}.head"), dir)?,
            })
        };
        let query = params(&mut archive, "query")?;
        let key = params(&mut archive, "key")?;
        let velocity = archive.take("optimizer.velocity", dir)?;
        let flat = archive.take("queue.embeddings", dir)?;
        let mut queue = NegativeQueue::new(meta.queue_capacity);
        if !meta.queue_video_ids.is_empty() {
            let dim = flat.len() / meta.queue_video_ids.len();
            let embeddings: Vec<Vec<f64>> = flat.chunks(dim).map(<[f64]>::to_vec).collect();
            queue.enqueue(&embeddings, &meta.queue_video_ids)?;
        }
        let state = TrainState {
            step: meta.step,
            epoch: meta.epochs_completed,
            optimizer: Sgd {
                config: setup.trainer.optimizer.clone(),
                velocity,
            },
            queue,
            query,
            key,
            seed: meta.seed,
        };
        Ok(Self::with_state(corpus, setup, state))
    }
}

/// Loads the query encoder from a pretraining checkpoint.
pub fn load_query_encoder(dir: &Path) -> Result<EncoderParams> {
    let mut archive = checkpoint::load::<CheckpointMeta>(dir)?;
    Ok(EncoderParams {
        arch: archive.meta.arch.clone(),
        backbone: archive.take("query.backbone", dir)?,
        head: archive.take("query.head", dir)?,
    })
}

/// Output locations for [`pretrain`].
#[derive(Debug, Clone, Default)]
pub struct RunPaths {
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub query: EncoderParams,
    pub log: Vec<StepLogRow>,
    pub final_checkpoint: Option<PathBuf>,
}

fn append_lines(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
        text.push('\n');
    }
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs (or continues) pretraining to `setup.trainer.epochs`.
///
/// With a run directory, appends `steplog.csv` (and `mining.csv` when mining
/// logging is on) and writes checkpoints under `checkpoints/`.
pub fn run_pretraining(trainer: &mut Pretrainer<'_>, run_dir: Option<&Path>) -> Result<PretrainOutcome> {
    if trainer.state.epoch == 0 && trainer.state.step == 0 {
        trainer.warm_up()?;
    }
    let epochs = trainer.setup.trainer.epochs;
    let every = trainer.setup.trainer.checkpoint_every;
    let mut log = Vec::new();
    let mut final_checkpoint = None;
    for epoch in trainer.state.epoch..epochs {
        let mut mining = Vec::new();
        let rows = trainer.run_epoch(epoch, |r| mining.push(r.to_csv()))?;
        if let Some(dir) = run_dir {
            let lines: Vec<String> = rows.iter().map(StepLogRow::to_csv).collect();
            append_lines(&dir.join("steplog.csv"), STEP_LOG_HEADER, &lines)?;
            if trainer.setup.trainer.log_mining {
                append_lines(&dir.join("mining.csv"), MINING_LOG_HEADER, &mining)?;
            }
            let done = epoch + 1;
            if every > 0 && done % every == 0 && done < epochs {
                trainer.save_checkpoint(&dir.join("checkpoints").join(format!("epoch-{done:04}")))?;
            }
        }
        log.extend(rows);
    }
    if let Some(dir) = run_dir {
        let path = dir.join("checkpoints").join("final");
        trainer.save_checkpoint(&path)?;
        final_checkpoint = Some(path);
    }
    Ok(PretrainOutcome {
        query: trainer.state.query.clone(),
        log,
        final_checkpoint,
    })
}

/// Fresh pretraining run over `corpus`.
pub fn pretrain(corpus: &VideoCorpus, setup: PretrainSetup, run_dir: Option<&Path>) -> Result<PretrainOutcome> {
    let mut trainer = Pretrainer::new(corpus, setup)?;
    run_pretraining(&mut trainer, run_dir)
}
