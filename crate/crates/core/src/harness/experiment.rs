//! Full training runs for ERM, Adv, VAT and SALT.
//!
//! A run writes into its output directory:
//! - `metrics.jsonl`: one [`EpochMetrics`] line per epoch, flushed as it goes.
//!   It holds no wall-clock data, so reruns are byte-identical.
//! - `timing.jsonl`: per-epoch wall-clock seconds by phase.
//! - `checkpoint.json`: final parameters.
//! - `reliability.csv`: validation reliability bins (classification only).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::optim::OptimizerState;
use super::rng::{stream_rng, Stream};
use crate::calibration::{bin_predictions, confidence_of, write_reliability_csv, CalibrationReport};
use crate::diffmodel::{
    loss_and_grad_params, mlp_forward, predict_labels, save_checkpoint, task_loss, Batch, ModelOutput, ModelParams,
    Targets,
};
use crate::error::{Error, Result};
use crate::salt::salt_training_step;
use crate::vat::{adv_training_step, vat_training_step, PhaseTiming, StepStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Clean task loss over the whole training set after the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Accuracy for classification, RMSE for regression.
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub train_rmse: Option<f64>,
    pub val_rmse: Option<f64>,
    /// Mean over the epoch's steps of the regularizer at δᴷ (zero for ERM).
    pub reg_loss: f64,
    /// Validation ECE; classification only.
    pub ece: Option<f64>,
    pub mean_interaction_ratio: f64,
    pub degenerate_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub seconds: f64,
    pub phases: PhaseTiming,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub epochs: Vec<EpochMetrics>,
    pub timing: Vec<EpochTiming>,
    pub params: ModelParams,
    pub reliability: Option<CalibrationReport>,
    /// Where the final checkpoint was written, if the run wrote files.
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().expect("runs have at least one epoch")
    }
}

struct Evaluation {
    loss: f64,
    acc: Option<f64>,
    rmse: Option<f64>,
    output: ModelOutput,
}

fn evaluate(params: &ModelParams, batch: &Batch) -> Result<Evaluation> {
    let output = mlp_forward(params, &batch.inputs)?;
    let loss = task_loss(&output, &batch.targets)?;
    let (acc, rmse) = match (&output, &batch.targets) {
        (ModelOutput::Logits(_), Targets::Labels { labels, .. }) => {
            let pred = predict_labels(&output)?;
            let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
            (Some(hits as f64 / labels.len() as f64), None)
        }
        (ModelOutput::Scalars(y), Targets::Values(t)) => {
            let mse = y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
            (None, Some(mse.sqrt()))
        }
        _ => return Err(Error::Config("model head does not match the dataset targets".into())),
    };
    Ok(Evaluation { loss, acc, rmse, output })
}

fn reliability(eval: &Evaluation, batch: &Batch, bins: usize) -> Result<Option<CalibrationReport>> {
    let Targets::Labels { labels, .. } = &batch.targets else {
        return Ok(None);
    };
    let conf = confidence_of(&eval.output)?;
    let pred = predict_labels(&eval.output)?;
    let correct: Vec<bool> = pred.iter().zip(labels).map(|(a, b)| a == b).collect();
    Ok(Some(bin_predictions(&conf, &correct, bins)?))
}

fn check_data(cfg: &ExperimentConfig, train: &Batch, test: &Batch) -> Result<()> {
    let d = cfg.model.layers[0];
    for (name, b) in [("train", train), ("test", test)] {
        if b.inputs.cols != d {
            return Err(Error::Config(format!(
                "{name} set has {} features but the model expects {d}",
                b.inputs.cols
            )));
        }
        if let Targets::Labels { classes, .. } = b.targets {
            let out = *cfg.model.layers.last().unwrap_or(&0);
            if classes > out {
                return Err(Error::Config(format!("{name} set has {classes} classes but the model has {out} outputs")));
            }
        }
    }
    Ok(())
}

fn train_step(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    batch: &Batch,
    optimizer: &mut OptimizerState,
    pert_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(ModelParams, StepStats)> {
    let kind = cfg.regularizer();
    match cfg.method {
        Method::Erm => {
            let t0 = Instant::now();
            let (clean_loss, grad) = loss_and_grad_params(params, batch)?;
            let t1 = Instant::now();
            let next = params.with_values(optimizer.step(&params.values, &grad))?;
            Ok((
                next,
                StepStats {
                    clean_loss,
                    timing: PhaseTiming {
                        leader: (t1 - t0).as_secs_f64(),
                        update: t1.elapsed().as_secs_f64(),
                        ..PhaseTiming::default()
                    },
                    ..StepStats::default()
                },
            ))
        }
        Method::Adv => adv_training_step(params, batch, &cfg.adv, optimizer, pert_rng),
        Method::Vat => vat_training_step(params, batch, &cfg.adv, kind, optimizer, pert_rng),
        Method::Salt => salt_training_step(params, batch, &cfg.adv, kind, optimizer, pert_rng),
    }
}

struct Sinks {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    dir: PathBuf,
}

fn train(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunRecord> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.dataset.load(cfg.seed)?;
    check_data(cfg, &train_set, &test_set)?;

    let mut sinks = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(Sinks {
                metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
                timing: BufWriter::new(File::create(dir.join("timing.jsonl"))?),
                dir: dir.to_path_buf(),
            })
        }
        None => None,
    };

    let mut init_rng = stream_rng(cfg.seed, Stream::ModelInit);
    let mut order_rng = stream_rng(cfg.seed, Stream::DataOrder);
    let mut pert_rng = stream_rng(cfg.seed, Stream::Perturbation);
    let mut params = ModelParams::init(&cfg.model.layers, &mut init_rng)?;
    let mut optimizer = OptimizerState::new(&cfg.optimizer);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut timing = Vec::with_capacity(cfg.epochs);
    let mut report = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let mut phases = PhaseTiming::default();
        let (mut reg_sum, mut ratio_sum, mut degenerate, mut steps) = (0.0, 0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.select(chunk);
            let (next, stats) = train_step(cfg, &params, &batch, &mut optimizer, &mut pert_rng)?;
            if next.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("parameters diverged in epoch {epoch}")));
            }
            params = next;
            reg_sum += stats.reg_loss;
            ratio_sum += stats.interaction_ratio;
            degenerate += usize::from(stats.degenerate);
            steps += 1;
            phases.inner += stats.timing.inner;
            phases.leader += stats.timing.leader;
            phases.interaction += stats.timing.interaction;
            phases.update += stats.timing.update;
        }
        let tr = evaluate(&params, &train_set)?;
        let te = evaluate(&params, &test_set)?;
        report = reliability(&te, &test_set, cfg.calibration_bins)?;
        let m = EpochMetrics {
            epoch,
            train_loss: tr.loss,
            val_loss: te.loss,
            train_acc: tr.acc,
            val_acc: te.acc,
            train_rmse: tr.rmse,
            val_rmse: te.rmse,
            reg_loss: reg_sum / steps as f64,
            ece: report.as_ref().map(|r| r.ece),
            mean_interaction_ratio: ratio_sum / steps as f64,
            degenerate_steps: degenerate,
        };
        let t = EpochTiming {
            epoch,
            seconds: start.elapsed().as_secs_f64(),
            phases,
        };
        if let Some(s) = sinks.as_mut() {
            writeln!(s.metrics, "{}", serde_json::to_string(&m)?)?;
            s.metrics.flush()?;
            writeln!(s.timing, "{}", serde_json::to_string(&t)?)?;
            s.timing.flush()?;
        }
        epochs.push(m);
        timing.push(t);
    }

    let mut checkpoint = None;
    if let Some(s) = sinks.as_ref() {
        let path = s.dir.join("checkpoint.json");
        save_checkpoint(&params, &path)?;
        checkpoint = Some(path);
        if let Some(r) = &report {
            write_reliability_csv(r, BufWriter::new(File::create(s.dir.join("reliability.csv"))?))?;
        }
    }
    Ok(RunRecord {
        epochs,
        timing,
        params,
        reliability: report,
        checkpoint,
    })
}

/// Trains and writes all run files into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    train(cfg, Some(&cfg.output_dir))
}

/// Same training as [`run_experiment`] without touching the filesystem.
pub fn run_experiment_in_memory(cfg: &ExperimentConfig) -> Result<RunRecord> {
    train(cfg, None)
}
