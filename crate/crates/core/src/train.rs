//! Pair construction, the BCE objective, and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::model::{tokenize_pair, CrossEncoder, ModelError, TokenSequence, Vocab, BCE_EPS};
use crate::optim::{
    AdamWConfig, AdamWState, LionConfig, LionState, OptimError, Optimizer, OptimizerKind, ScheduleKind, ScheduleSpec,
};
use crate::tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training pairs")]
    EmptyPairs,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("triplet line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint optimizer ({found}) does not match the configured {expected}")]
    OptimizerMismatch { expected: OptimizerKind, found: String },
    #[error("baseline mean must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

impl Triplet {
    pub fn is_well_formed(&self) -> bool {
        [&self.query, &self.positive, &self.negative]
            .iter()
            .all(|s| !s.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub query: String,
    pub passage: String,
    pub label: u8,
}

/// Parses `query<TAB>positive<TAB>negative` lines. Blank lines are ignored.
pub fn parse_triplets(text: &str) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(TrainError::Parse {
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        out.push(Triplet {
            query: fields[0].to_string(),
            positive: fields[1].to_string(),
            negative: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn format_triplets(triplets: &[Triplet]) -> String {
    triplets
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.query, t.positive, t.negative))
        .collect()
}

/// Expands each triplet into `(query, positive, 1)` then `(query, negative, 0)`.
/// Triplets with an empty field are skipped; the count of skipped triplets is
/// returned alongside the pairs.
pub fn triplets_to_pairs(triplets: &[Triplet]) -> (Vec<TrainPair>, usize) {
    let mut pairs = Vec::with_capacity(triplets.len() * 2);
    let mut skipped = 0;
    for t in triplets {
        if !t.is_well_formed() {
            skipped += 1;
            continue;
        }
        pairs.push(TrainPair {
            query: t.query.clone(),
            passage: t.positive.clone(),
            label: 1,
        });
        pairs.push(TrainPair {
            query: t.query.clone(),
            passage: t.negative.clone(),
            label: 0,
        });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} malformed triplet(s)");
    }
    (pairs, skipped)
}

/// `−[y·ln ŷ + (1 − y)·ln(1 − ŷ)]` with ŷ clamped to `[1e-12, 1 − 1e-12]`.
pub fn bce_loss(y_hat: f64, y: f64) -> f64 {
    tensor::bce_value(y_hat, y, BCE_EPS)
}

/// d(bce_loss)/dŷ = (ŷ − y) / (ŷ·(1 − ŷ)).
pub fn bce_loss_grad(y_hat: f64, y: f64) -> f64 {
    tensor::bce_grad(y_hat, y, BCE_EPS)
}

/// `(baseline − candidate) / baseline × 100`. Positive when the candidate is
/// cheaper.
pub fn efficiency_gain(baseline_mean: f64, candidate_mean: f64) -> Result<f64> {
    if baseline_mean.is_nan() || baseline_mean <= 0.0 {
        return Err(TrainError::NonPositiveBaseline(baseline_mean));
    }
    Ok((baseline_mean - candidate_mean) / baseline_mean * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Prefix for checkpoint names.
    pub run_name: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub schedule: ScheduleKind,
    pub warmup_ratio: f64,
    pub shuffle: bool,
    pub lion: LionConfig,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            run_name: "model".into(),
            batch_size: 64,
            epochs: 3,
            seed: 12,
            optimizer: OptimizerKind::Lion,
            base_lr: 2e-5,
            schedule: ScheduleKind::Constant,
            warmup_ratio: 0.1,
            shuffle: true,
            lion: LionConfig::default(),
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be ≥ 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be ≥ 1".into()));
        }
        if self.run_name.is_empty() || self.run_name.contains(char::is_whitespace) {
            return Err(TrainError::InvalidConfig(format!(
                "run_name `{}` must be non-empty without whitespace",
                self.run_name
            )));
        }
        self.lion.validate()?;
        self.adamw.validate()?;
        ScheduleSpec::new(self.schedule, self.base_lr, self.warmup_ratio, 1)?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_pairs: usize) -> u64 {
        n_pairs.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n_pairs: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(n_pairs)
    }

    pub fn schedule_for(&self, n_pairs: usize) -> Result<ScheduleSpec> {
        Ok(ScheduleSpec::new(
            self.schedule,
            self.base_lr,
            self.warmup_ratio,
            self.total_steps(n_pairs).max(1),
        )?)
    }

    pub fn checkpoint_name(&self, epoch: usize) -> String {
        format!("{}-{}-epoch{epoch}", self.run_name, self.optimizer)
    }

    pub fn new_optimizer(&self, model: &CrossEncoder) -> Result<Optimizer> {
        Ok(match self.optimizer {
            OptimizerKind::Lion => Optimizer::Lion(LionState::new(self.lion.clone(), model.params())?),
            OptimizerKind::AdamW => Optimizer::AdamW(AdamWState::new(self.adamw.clone(), model.params())?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Formats `x` with 10 significant digits, like C's `%.10g`.
pub fn format_sig10(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.9e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..10).contains(&exp) {
        let decimals = (9 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

/// Tab-separated `step epoch lr loss` lines with a header row.
pub fn format_loss_log(records: &[LossRecord]) -> String {
    let mut out = String::from("step\tepoch\tlr\tloss\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.step,
            r.epoch,
            format_sig10(r.lr),
            format_sig10(r.loss)
        ));
    }
    out
}

/// Optimizer-step accounting, the process-level analogue of GPU utilisation
/// statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResourceStats {
    pub optimizer_state_bytes: usize,
    pub mean_step_ms: f64,
    pub peak_step_ms: f64,
    pub std_step_ms: f64,
    pub n_steps: usize,
}

impl ResourceStats {
    /// Mean, peak and population standard deviation of `step_ms`.
    pub fn from_samples(optimizer_state_bytes: usize, step_ms: &[f64]) -> Self {
        let n = step_ms.len();
        if n == 0 {
            return Self {
                optimizer_state_bytes,
                ..Self::default()
            };
        }
        let mean = step_ms.iter().sum::<f64>() / n as f64;
        let var = step_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
        Self {
            optimizer_state_bytes,
            mean_step_ms: mean,
            peak_step_ms: step_ms.iter().copied().fold(0.0, f64::max),
            std_step_ms: var.sqrt(),
            n_steps: n,
        }
    }

    /// `key=value` lines followed by a tab-separated table block.
    pub fn to_report(&self, optimizer: OptimizerKind) -> String {
        format!(
            "optimizer={optimizer}\noptimizer_state_bytes={}\nmean_step_ms={:.6}\npeak_step_ms={:.6}\nstd_step_ms={:.6}\nn_steps={}\n\n# optimizer\tmean_ms\tpeak_ms\tstd_ms\tdata_points\tstate_bytes\n{optimizer}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
            self.optimizer_state_bytes,
            self.mean_step_ms,
            self.peak_step_ms,
            self.std_step_ms,
            self.n_steps,
            self.mean_step_ms,
            self.peak_step_ms,
            self.std_step_ms,
            self.n_steps,
            self.optimizer_state_bytes,
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CrossEncoder,
    pub optimizer: Optimizer,
    /// One per completed epoch, in order.
    pub checkpoints: Vec<Checkpoint>,
    pub loss_log: Vec<LossRecord>,
    /// Example-weighted mean BCE for each epoch run.
    pub epoch_losses: Vec<f64>,
    pub resources: ResourceStats,
}

/// Trains `model` on `pairs` for `config.epochs` epochs.
///
/// Everything that affects the numbers (initialisation, the per-epoch
/// shuffle seeded with `seed + epoch`, batching, the schedule) is a function
/// of the inputs, so two calls with the same arguments produce bit-identical
/// parameters and loss logs. Only the wall-clock fields of
/// [`ResourceStats`] vary.
pub fn run_training(
    model: CrossEncoder,
    vocab: &Vocab,
    pairs: &[TrainPair],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let optimizer = config.new_optimizer(&model)?;
    Session::new(model, optimizer, vocab, pairs, config)?.run(1, 0)
}

/// Continues training from a per-epoch checkpoint up to `config.epochs`.
pub fn resume_training(checkpoint: Checkpoint, pairs: &[TrainPair], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let optimizer = match checkpoint.optimizer {
        Some(opt) if opt.kind() == config.optimizer => opt,
        Some(opt) => {
            return Err(TrainError::OptimizerMismatch {
                expected: config.optimizer,
                found: opt.kind().to_string(),
            })
        }
        None => {
            return Err(TrainError::OptimizerMismatch {
                expected: config.optimizer,
                found: "none".into(),
            })
        }
    };
    Session::new(checkpoint.model, optimizer, &checkpoint.vocab, pairs, config)?
        .run(checkpoint.epoch + 1, checkpoint.global_step)
}

struct Session<'a> {
    model: CrossEncoder,
    optimizer: Optimizer,
    vocab: &'a Vocab,
    seqs: Vec<TokenSequence>,
    labels: Vec<f64>,
    schedule: ScheduleSpec,
    config: &'a TrainConfig,
}

impl<'a> Session<'a> {
    fn new(
        model: CrossEncoder,
        optimizer: Optimizer,
        vocab: &'a Vocab,
        pairs: &[TrainPair],
        config: &'a TrainConfig,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(TrainError::EmptyPairs);
        }
        model.check_vocab(vocab)?;
        let max_len = model.config().max_len;
        let seqs = pairs
            .iter()
            .map(|p| tokenize_pair(vocab, &p.query, &p.passage, max_len))
            .collect();
        let labels = pairs.iter().map(|p| f64::from(p.label)).collect();
        let schedule = config.schedule_for(pairs.len())?;
        Ok(Self {
            model,
            optimizer,
            vocab,
            seqs,
            labels,
            schedule,
            config,
        })
    }

    fn run(mut self, first_epoch: usize, mut step: u64) -> Result<TrainOutcome> {
        let n = self.seqs.len();
        let mut loss_log = Vec::new();
        let mut epoch_losses = Vec::new();
        let mut checkpoints = Vec::new();
        let mut step_ms = Vec::new();

        for epoch in first_epoch..=self.config.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            if self.config.shuffle {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64));
                order.shuffle(&mut rng);
            }
            let mut weighted = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<TokenSequence> = chunk.iter().map(|&i| self.seqs[i].clone()).collect();
                let labels: Vec<f64> = chunk.iter().map(|&i| self.labels[i]).collect();

                self.model.zero_grad();
                let loss = self.model.bce_with_grad(&batch, &labels)?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step, loss });
                }
                let lr = self.schedule.lr_at(step)?;
                let started = Instant::now();
                self.optimizer.step(self.model.params_mut(), lr)?;
                step_ms.push(started.elapsed().as_secs_f64() * 1e3);

                loss_log.push(LossRecord { step, epoch, lr, loss });
                weighted += loss * chunk.len() as f64;
                step += 1;
            }
            epoch_losses.push(weighted / n as f64);
            checkpoints.push(Checkpoint {
                name: self.config.checkpoint_name(epoch),
                epoch,
                global_step: step,
                vocab: self.vocab.clone(),
                model: self.model.clone(),
                optimizer: Some(self.optimizer.clone()),
            });
            log::info!(
                "{} epoch {epoch}: mean BCE {:.6}",
                self.config.checkpoint_name(epoch),
                epoch_losses.last().unwrap()
            );
        }

        let resources = ResourceStats::from_samples(self.optimizer.state_bytes(), &step_ms);
        Ok(TrainOutcome {
            model: self.model,
            optimizer: self.optimizer,
            checkpoints,
            loss_log,
            epoch_losses,
            resources,
        })
    }
}
