//! Optimization loop, checkpoints and held-out evaluation.
//!
//! All randomness of step `s` derives from `(seed, s)` and the pair order
//! of epoch `e` from `(seed, e)`, so a run resumed from any checkpoint
//! replays the uninterrupted run exactly.

mod checkpoint;
mod model;

pub use checkpoint::{Checkpoint, CheckpointMeta, NamedTensor, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::Model;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{sample_batch, TrainingBatch, TrainingPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, EvalPair, EvalReport};
use crate::geometry::{Homography, Supervision};
use crate::loss::{total_loss, LossConfig, LossGrads, LossInputs, LossReport};
use crate::nn::{zero_grads, Adam};
use crate::proposals::{fit_nc_matcher, ProposalSet, ProposalSource, ProposalSpec};
use crate::refine::{filter_by_confidence, BatchOutputs, PairPyramids};
use crate::seed::{derive_seed, derive_seed2};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

const EPOCH_STREAM: u64 = 0xE90C;
const PROPOSAL_STREAM: u64 = 0x9809;
const BATCH_STREAM: u64 = 0xBA7C;
const NC_STREAM: u64 = 0x0C0C;
const EVAL_STREAM: u64 = 0xE7A1;

/// Learning-rate schedule, stopping rule and stage options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// `nc` or `oracle`.
    pub proposals: ProposalSource,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Epochs run at `lr_initial`.
    pub lr_drop_epoch: usize,
    pub max_epochs: usize,
    /// Relative epoch-mean improvement below which an epoch counts as stalled.
    pub min_improvement: f64,
    /// Stalled epochs in a row that end training.
    pub patience: usize,
    pub max_steps: Option<usize>,
    /// Extra checkpoints every this many steps.
    pub checkpoint_every: Option<usize>,
    pub train_backbone: bool,
    /// Convolution products in `f32` during training.
    pub reduced_precision: bool,
    pub nc_fit_steps: usize,
    pub nc_fit_pairs: usize,
    pub nc_fit_lr: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            proposals: ProposalSource::Oracle,
            lr_initial: 5e-4,
            lr_final: 1e-4,
            lr_drop_epoch: 5,
            max_epochs: 50,
            min_improvement: 0.01,
            patience: 3,
            max_steps: None,
            checkpoint_every: None,
            train_backbone: true,
            reduced_precision: false,
            nc_fit_steps: 300,
            nc_fit_pairs: 16,
            nc_fit_lr: 1e-2,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.proposals == ProposalSource::External {
            return Err(Error::Config("training proposals must be 'nc' or 'oracle'".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) || self.max_epochs == 0 {
            return Err(Error::Config("learning rates and max_epochs must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate of the epoch with 0-based index `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.lr_initial
        } else {
            self.lr_final
        }
    }
}

pub fn steps_per_epoch(num_pairs: usize, batch_size: usize) -> usize {
    num_pairs.div_ceil(batch_size)
}

/// Pair indices used by global step `step` (0-based).
pub fn batch_pairs(seed: u64, step: usize, num_pairs: usize, batch_size: usize) -> Vec<usize> {
    let spe = steps_per_epoch(num_pairs, batch_size);
    let (epoch, k) = (step / spe, step % spe);
    let mut order: Vec<usize> = (0..num_pairs).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed2(seed, EPOCH_STREAM, epoch as u64)));
    order[k * batch_size..((k + 1) * batch_size).min(num_pairs)].to_vec()
}

/// Loss and output gradients of one batch under the current weights.
pub fn batch_loss(
    model: &Model,
    pyramids: &[PairPyramids],
    supervision: &[Supervision],
    batch: &TrainingBatch,
    config: &LossConfig,
) -> Result<(LossReport, LossGrads)> {
    let out = model.refiner.forward_batch(pyramids, &batch.proposals, &batch.pair_index)?;
    Ok(loss_of_outputs(&out, supervision, batch, config))
}

fn loss_of_outputs(
    out: &BatchOutputs,
    supervision: &[Supervision],
    batch: &TrainingBatch,
    config: &LossConfig,
) -> (LossReport, LossGrads) {
    let inputs = LossInputs {
        supervision,
        pair_index: &batch.pair_index,
        proposals: &batch.proposals,
        mid: &out.mid,
        mid_conf: &out.mid_conf,
        fine: &out.fine,
        fine_conf: &out.fine_conf,
    };
    total_loss(&inputs, config)
}

#[derive(Debug, Clone, Serialize)]
struct NanDump<'a> {
    step: usize,
    epoch: usize,
    seed: u64,
    pair_indices: &'a [usize],
    pair_ids: Vec<&'a str>,
    report: &'a LossReport,
}

/// Trainer state over a fixed training set.
pub struct Trainer<'a> {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub state: TrainState,
    pairs: &'a [TrainingPair],
    supervision: Vec<Supervision>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, pairs: &'a [TrainingPair]) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.backbone.clone(), config.refiner.clone(), config.nc, config.seed)?;
        Self::with_model(config, pairs, model, Adam::new(), TrainState::default())
    }

    pub fn resume(config: RunConfig, pairs: &'a [TrainingPair], checkpoint: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let (model, adam, state) = Model::from_checkpoint(checkpoint)?;
        if model.backbone.config != config.backbone || model.refiner.config != config.refiner {
            return Err(Error::Config("checkpoint architecture differs from the run configuration".into()));
        }
        Self::with_model(config, pairs, model, adam, state)
    }

    fn with_model(
        config: RunConfig,
        pairs: &'a [TrainingPair],
        mut model: Model,
        adam: Adam,
        state: TrainState,
    ) -> Result<Self> {
        model.set_reduced_precision(config.train.reduced_precision);
        if pairs.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let supervision = pairs.iter().map(|p| p.supervision.supervision()).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            model,
            adam,
            state,
            pairs,
            supervision,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.pairs.len(), self.config.batch.batch_size)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(&self.adam, &self.state)
    }

    /// Fits the correlation matcher on features of the current backbone.
    /// Returns the per-step losses; a no-op when already fitted.
    pub fn fit_nc(&mut self) -> Result<Vec<f64>> {
        if self.state.nc_fitted {
            return Ok(Vec::new());
        }
        let sched = self.config.train;
        let chosen: Vec<(&TrainingPair, Homography)> = self
            .pairs
            .iter()
            .filter_map(|p| p.supervision.ground_truth().and_then(|g| g.homography().copied()).map(|h| (p, h)))
            .take(sched.nc_fit_pairs)
            .collect();
        let data = chosen
            .par_iter()
            .map(|(p, h)| {
                let (a, b) = self.model.pyramids(&p.image_a, &p.image_b)?;
                Ok((a, b, *h))
            })
            .collect::<Result<Vec<_>>>()?;
        let losses = fit_nc_matcher(
            &mut self.model.nc,
            &data,
            sched.nc_fit_steps,
            sched.nc_fit_lr,
            derive_seed(self.config.seed, NC_STREAM),
        )?;
        self.state.nc_fitted = true;
        Ok(losses)
    }

    fn proposals(&self, pyramids: &[PairPyramids], indices: &[usize], step: usize) -> Result<Vec<ProposalSet>> {
        let spec = match self.config.train.proposals {
            ProposalSource::Nc => ProposalSpec::Nc,
            _ => ProposalSpec::Oracle,
        };
        indices
            .iter()
            .zip(pyramids)
            .map(|(&i, pyr)| {
                let gt = self.pairs[i].supervision.ground_truth();
                // Training uses every correlation proposal regardless of score.
                self.model.propose(
                    &spec,
                    pyr,
                    gt.as_ref(),
                    &self.config.oracle,
                    f64::NEG_INFINITY,
                    derive_seed2(self.config.seed, PROPOSAL_STREAM ^ step as u64, i as u64),
                )
            })
            .collect()
    }

    /// Runs one optimization step and returns its loss report. A non-finite
    /// loss leaves the weights untouched, dumps the batch into `dump_dir`
    /// and fails.
    pub fn step(&mut self, dump_dir: Option<&Path>) -> Result<LossReport> {
        let step = self.state.step;
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let lr = self.config.train.lr(epoch);
        let indices = batch_pairs(self.config.seed, step, self.pairs.len(), self.config.batch.batch_size);
        let pyramids = indices
            .par_iter()
            .map(|&i| self.model.pyramids(&self.pairs[i].image_a, &self.pairs[i].image_b))
            .collect::<Result<Vec<_>>>()?;
        let sets = self.proposals(&pyramids, &indices, step)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(self.config.seed, BATCH_STREAM, step as u64));
        let batch = sample_batch(&sets, &self.config.batch, &mut rng);
        let sups: Vec<Supervision> = indices.iter().map(|&i| self.supervision[i]).collect();
        let (out, traces) =
            self.model.refiner.forward_batch_traced(&pyramids, &batch.proposals, &batch.pair_index)?;
        let (report, grads) = loss_of_outputs(&out, &sups, &batch, &self.config.loss);

        if !report.total.is_finite() {
            let dir = dump_dir.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
            let dump = dir.join(format!("nan_step_{:07}.json", step + 1));
            let body = NanDump {
                step: step + 1,
                epoch: epoch + 1,
                seed: self.config.seed,
                pair_indices: &indices,
                pair_ids: indices.iter().map(|&i| self.pairs[i].id.as_str()).collect(),
                report: &report,
            };
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            std::fs::write(&dump, serde_json::to_string_pretty(&body)?).map_err(|e| Error::io(&dump, e))?;
            return Err(Error::NanLoss { step: step + 1, dump });
        }

        zero_grads(&mut self.model);
        if self.config.train.train_backbone {
            let mut pg: Vec<_> = pyramids.iter().map(|(a, b)| (a.zero_grads(), b.zero_grads())).collect();
            self.model.refiner.backward_batch(
                &pyramids,
                &batch.proposals,
                &batch.pair_index,
                Some(traces),
                &grads,
                Some(&mut pg),
            )?;
            for ((a, b), (ga, gb)) in pyramids.iter().zip(pg) {
                self.model.backbone.backward(a, ga);
                self.model.backbone.backward(b, gb);
            }
        } else {
            self.model.refiner.backward_batch(
                &pyramids,
                &batch.proposals,
                &batch.pair_index,
                Some(traces),
                &grads,
                None,
            )?;
        }
        self.adam.update(&mut self.model, lr);

        self.state.step += 1;
        self.state.adam_step = self.adam.step;
        self.state.epoch_sum += report.total;
        self.state.epoch_count += 1;
        Ok(report)
    }

    /// Closes the current epoch when its last step has run. Returns true at
    /// an epoch boundary.
    pub fn end_epoch_if_due(&mut self) -> bool {
        if !self.state.step.is_multiple_of(self.steps_per_epoch()) || self.state.epoch_count == 0 {
            return false;
        }
        let mean = self.state.epoch_sum / self.state.epoch_count as f64;
        if let Some(&prev) = self.state.epoch_losses.last() {
            let gain = (prev - mean) / prev.abs().max(f64::MIN_POSITIVE);
            if gain < self.config.train.min_improvement {
                self.state.stalled_epochs += 1;
            } else {
                self.state.stalled_epochs = 0;
            }
        }
        self.state.epoch_losses.push(mean);
        self.state.epoch_sum = 0.0;
        self.state.epoch_count = 0;
        let sched = &self.config.train;
        if self.state.stalled_epochs >= sched.patience || self.state.epoch_losses.len() >= sched.max_epochs {
            self.state.converged = true;
        }
        true
    }

    pub fn finished(&self) -> bool {
        self.state.converged || self.config.train.max_steps.is_some_and(|m| self.state.step >= m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub epochs_completed: usize,
    pub converged: bool,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub last_report: Option<LossReport>,
}

/// Keeps the header and the rows of steps `<= step` of an existing log.
fn truncated_log(path: &Path, step: usize) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains until convergence or `max_steps`, writing the step log, a
/// checkpoint per epoch (plus every `checkpoint_every` steps) and a final
/// checkpoint into `out_dir`.
pub fn train(config: &RunConfig, pairs: &[TrainingPair], out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    config.echo(out_dir)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config.clone(), pairs, &Checkpoint::load(p)?)?,
        None => Trainer::new(config.clone(), pairs)?,
    };
    let log_path = out_dir.join(LOG_FILE);
    let existing = if resume.is_some() && log_path.exists() {
        truncated_log(&log_path, trainer.state.step)?
    } else {
        format!("{}\n", LossReport::CSV_HEADER)
    };
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    log.write_all(existing.as_bytes()).map_err(|e| Error::io(&log_path, e))?;

    if config.train.proposals == ProposalSource::Nc && !trainer.state.nc_fitted {
        let losses = trainer.fit_nc()?;
        let path = out_dir.join("nc_fit.csv");
        let body: String = std::iter::once("step,loss".to_string())
            .chain(losses.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1)))
            .map(|l| l + "\n")
            .collect();
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }

    let ckpt_dir = out_dir.join("checkpoints");
    let mut last = None;
    while !trainer.finished() {
        let epoch = trainer.state.step / trainer.steps_per_epoch();
        let lr = config.train.lr(epoch);
        let report = trainer.step(Some(out_dir))?;
        writeln!(log, "{}", report.csv_row(trainer.state.step, epoch + 1, lr))
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))?;
        last = Some(report);
        if trainer.end_epoch_if_due() {
            let n = trainer.state.epoch_losses.len();
            trainer.checkpoint().save(ckpt_dir.join(format!("epoch_{n:04}.ckpt")))?;
        }
        if config.train.checkpoint_every.is_some_and(|k| k > 0 && trainer.state.step % k == 0) {
            trainer.checkpoint().save(ckpt_dir.join(format!("step_{:07}.ckpt", trainer.state.step)))?;
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome {
        steps: trainer.state.step,
        epochs_completed: trainer.state.epoch_losses.len(),
        converged: trainer.state.converged,
        final_checkpoint,
        log_path,
        last_report: last,
    })
}

/// Metrics of the raw proposals and of the confidence-filtered refined
/// matches on the same pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub proposals: EvalReport,
    pub refined: EvalReport,
}

impl CheckpointEval {
    pub fn without_timing(&self) -> Self {
        Self {
            proposals: self.proposals.without_timing(),
            refined: self.refined.without_timing(),
        }
    }
}

/// Proposals and refined matches of every pair, in input order.
pub fn match_pairs(
    model: &Model,
    pairs: &[TrainingPair],
    spec: &ProposalSpec,
    config: &RunConfig,
) -> Result<Vec<(ProposalSet, Vec<crate::refine::RefinedMatch>)>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let pyr = model.pyramids(&p.image_a, &p.image_b)?;
            let gt = p.supervision.ground_truth();
            let seed = derive_seed2(config.seed, EVAL_STREAM, i as u64);
            let set = model.propose(spec, &pyr, gt.as_ref(), &config.oracle, config.nc.score_threshold, seed)?;
            let refined = model.refine(&pyr, &set)?;
            Ok((set, refined))
        })
        .collect()
}

/// Evaluates proposals and refined matches (filtered at the configured
/// confidence) on pairs with homography ground truth.
pub fn evaluate_model(model: &Model, pairs: &[TrainingPair], spec: &ProposalSpec, config: &RunConfig) -> Result<CheckpointEval> {
    let pairs: Vec<TrainingPair> = pairs.iter().filter(|p| p.supervision.ground_truth().is_some()).cloned().collect();
    let matched = match_pairs(model, &pairs, spec, config)?;
    let c = config.refiner.confidence;
    let mut prop = Vec::with_capacity(pairs.len());
    let mut refd = Vec::with_capacity(pairs.len());
    for (p, (set, refined)) in pairs.iter().zip(matched) {
        let gt = p.supervision.ground_truth().expect("filtered");
        prop.push(EvalPair {
            id: p.id.clone(),
            matches: set.matches(),
            gt: gt.clone(),
            image_size: p.size(),
        });
        refd.push(EvalPair {
            id: p.id.clone(),
            matches: filter_by_confidence(&refined, c).iter().map(|r| r.fine).collect(),
            gt,
            image_size: p.size(),
        });
    }
    Ok(CheckpointEval {
        proposals: evaluate_pairs("proposals", &prop, &config.eval),
        refined: evaluate_pairs("refined", &refd, &config.eval),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResultsRecord {
    schema_version: u32,
    checkpoint: PathBuf,
    manifest: PathBuf,
    proposals: String,
    #[serde(flatten)]
    eval: CheckpointEval,
}

/// Evaluates a checkpoint on a held-out manifest and appends one JSON line
/// to `results` when given.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &Path,
    spec: &ProposalSpec,
    config: &RunConfig,
    results: Option<&Path>,
) -> Result<CheckpointEval> {
    let model = Model::load(checkpoint)?;
    let pairs = crate::data::load_manifest(manifest)?;
    let eval = evaluate_model(&model, &pairs, spec, config)?;
    if let Some(path) = results {
        let record = ResultsRecord {
            schema_version: RESULTS_SCHEMA_VERSION,
            checkpoint: checkpoint.to_path_buf(),
            manifest: manifest.to_path_buf(),
            proposals: format!("{:?}", spec.source()).to_lowercase(),
            eval: eval.clone(),
        };
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(eval)
}
