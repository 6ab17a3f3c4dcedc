//! Zero-sum baselines: virtual adversarial training (VAT) and label-using
//! adversarial training (Adv).
//!
//! Both solve the inner maximization by K projected-gradient-ascent steps from
//! a Gaussian start and then treat δᴷ as a constant in the leader gradient.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::diffmodel::{grad_input, loss_and_grad_params, mlp_forward, task_loss, Batch, InputObjective, Matrix, ModelParams};
use crate::error::Result;
use crate::harness::optim::OptimizerState;
use crate::perturb::{ascent_step, project_rows, sample_init, AdvConfig, Perturbation};
use crate::regularizers::{adv_reg_grad_params_with, adv_reg_loss, AdvRegObjective, RegularizerKind};

/// Per-step diagnostics shared by all training methods.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub clean_loss: f64,
    /// Regularizer (or adversarial loss for Adv) at the final perturbation.
    pub reg_loss: f64,
    /// Largest per-example norm of δᴷ.
    pub delta_norm: f64,
    /// ‖interaction‖ / ‖leader‖; zero for methods without an interaction term.
    pub interaction_ratio: f64,
    /// The follower gradient at δᴷ vanished, so the interaction was skipped.
    pub degenerate: bool,
    pub timing: PhaseTiming,
}

/// Wall-clock seconds per phase of a training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PhaseTiming {
    pub inner: f64,
    pub leader: f64,
    pub interaction: f64,
    pub update: f64,
}

/// Runs sample_init and K ascent steps on the regularizer; returns δᴷ.
pub fn vat_inner_maximize<R: Rng + ?Sized>(
    params: &ModelParams,
    x: &Matrix,
    cfg: &AdvConfig,
    kind: RegularizerKind,
    rng: &mut R,
) -> Result<Perturbation> {
    let delta0 = sample_init(cfg.sigma, x.rows, x.cols, rng);
    vat_inner_from(params, x, cfg, kind, delta0)
}

pub(crate) fn vat_inner_from(
    params: &ModelParams,
    x: &Matrix,
    cfg: &AdvConfig,
    kind: RegularizerKind,
    delta0: Perturbation,
) -> Result<Perturbation> {
    let obj = AdvRegObjective::new(params, x, kind, cfg.detach_clean)?;
    let mut delta = delta0.values.data;
    for _ in 0..cfg.k_steps {
        delta = ascent_step(&obj, &params.values, &delta, cfg)?.0;
    }
    Ok(Perturbation {
        values: Matrix::new(x.rows, x.cols, delta)?,
        constraint: if cfg.k_steps > 0 {
            Some((cfg.norm, cfg.epsilon))
        } else {
            delta0.constraint
        },
    })
}

/// Leader gradient with δ frozen: dℓ/dθ + α ∂ℓ_v(x, δ, θ)/∂θ. Also returns the
/// clean loss so callers avoid a second forward pass.
pub(crate) fn leader_gradient(
    params: &ModelParams,
    batch: &Batch,
    delta: &Matrix,
    cfg: &AdvConfig,
    kind: RegularizerKind,
) -> Result<(f64, Vec<f64>)> {
    let (loss, mut g) = loss_and_grad_params(params, batch)?;
    let r = adv_reg_grad_params_with(params, &batch.inputs, delta, kind, cfg.detach_clean)?;
    for (gi, ri) in g.iter_mut().zip(&r) {
        *gi += cfg.alpha * ri;
    }
    Ok((loss, g))
}

/// VAT parameter gradient with the perturbation treated as a constant.
pub fn vat_gradient(
    params: &ModelParams,
    batch: &Batch,
    delta: &Perturbation,
    cfg: &AdvConfig,
    kind: RegularizerKind,
) -> Result<Vec<f64>> {
    Ok(leader_gradient(params, batch, &delta.values, cfg, kind)?.1)
}

/// Like [`vat_inner_maximize`] but ascends the task loss ℓ(f(x+δ), y), so the
/// perturbation sees the labels.
pub fn adv_inner_maximize<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    cfg: &AdvConfig,
    rng: &mut R,
) -> Result<Perturbation> {
    let x = &batch.inputs;
    let delta0 = sample_init(cfg.sigma, x.rows, x.cols, rng);
    adv_inner_from(params, batch, cfg, delta0)
}

pub(crate) fn adv_inner_from(
    params: &ModelParams,
    batch: &Batch,
    cfg: &AdvConfig,
    delta0: Perturbation,
) -> Result<Perturbation> {
    let x = &batch.inputs;
    let n = x.rows as f64;
    let mut delta = delta0.values;
    for _ in 0..cfg.k_steps {
        let g = grad_input(params, &x.plus(&delta)?, InputObjective::TaskLoss(&batch.targets))?;
        // grad_input differentiates the batch mean; each δ_i ascends its own loss
        let pre: Vec<f64> = delta
            .data
            .iter()
            .zip(&g.data)
            .map(|(d, gi)| d + cfg.eta * n * gi)
            .collect();
        delta = Matrix::new(x.rows, x.cols, project_rows(&pre, x.cols, cfg.epsilon, cfg.norm))?;
    }
    Ok(Perturbation {
        values: delta,
        constraint: if cfg.k_steps > 0 {
            Some((cfg.norm, cfg.epsilon))
        } else {
            delta0.constraint
        },
    })
}

/// One VAT step: inner maximization, leader gradient, optimizer update.
pub fn vat_training_step<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    cfg: &AdvConfig,
    kind: RegularizerKind,
    optimizer: &mut OptimizerState,
    rng: &mut R,
) -> Result<(ModelParams, StepStats)> {
    let t0 = Instant::now();
    let delta = vat_inner_maximize(params, &batch.inputs, cfg, kind, rng)?;
    let t1 = Instant::now();
    let (clean_loss, grad) = leader_gradient(params, batch, &delta.values, cfg, kind)?;
    let reg_loss = adv_reg_loss(params, &batch.inputs, &delta.values, kind)?;
    let t2 = Instant::now();
    let next = params.with_values(optimizer.step(&params.values, &grad))?;
    let t3 = Instant::now();
    Ok((
        next,
        StepStats {
            clean_loss,
            reg_loss,
            delta_norm: delta.max_row_norm(cfg.norm),
            interaction_ratio: 0.0,
            degenerate: false,
            timing: PhaseTiming {
                inner: (t1 - t0).as_secs_f64(),
                leader: (t2 - t1).as_secs_f64(),
                interaction: 0.0,
                update: (t3 - t2).as_secs_f64(),
            },
        },
    ))
}

/// One Adv step: the leader minimizes ℓ(f(x), y) + α ℓ(f(x+δᴷ), y).
pub fn adv_training_step<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    cfg: &AdvConfig,
    optimizer: &mut OptimizerState,
    rng: &mut R,
) -> Result<(ModelParams, StepStats)> {
    let t0 = Instant::now();
    let delta = adv_inner_maximize(params, batch, cfg, rng)?;
    let t1 = Instant::now();
    let (clean_loss, mut grad) = loss_and_grad_params(params, batch)?;
    let perturbed = Batch {
        inputs: batch.inputs.plus(&delta.values)?,
        targets: batch.targets.clone(),
    };
    let (adv_loss, adv_grad) = loss_and_grad_params(params, &perturbed)?;
    for (g, a) in grad.iter_mut().zip(&adv_grad) {
        *g += cfg.alpha * a;
    }
    let t2 = Instant::now();
    let next = params.with_values(optimizer.step(&params.values, &grad))?;
    let t3 = Instant::now();
    Ok((
        next,
        StepStats {
            clean_loss,
            reg_loss: adv_loss,
            delta_norm: delta.max_row_norm(cfg.norm),
            interaction_ratio: 0.0,
            degenerate: false,
            timing: PhaseTiming {
                inner: (t1 - t0).as_secs_f64(),
                leader: (t2 - t1).as_secs_f64(),
                interaction: 0.0,
                update: (t3 - t2).as_secs_f64(),
            },
        },
    ))
}

/// Task loss at x + δ, used by the Adv ascent checks.
pub fn perturbed_task_loss(params: &ModelParams, batch: &Batch, delta: &Matrix) -> Result<f64> {
    task_loss(&mlp_forward(params, &batch.inputs.plus(delta)?)?, &batch.targets)
}
