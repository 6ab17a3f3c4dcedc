//! Stackelberg gradient through an unrolled follower.
//!
//! The follower runs K projected-gradient-ascent steps
//! `δᵏ = Π(δᵏ⁻¹ + η ∇_δ g(δᵏ⁻¹, θ))` from a fixed δ⁰. The leader objective is
//! `F(θ) = ℓ(θ) + α s g(δᴷ(θ), θ)` where `s` is the objective's leader scale
//! (1/n for the batch-mean regularizer). Its gradient splits into
//!
//! - the leader part, `dℓ/dθ + α s ∂g/∂θ` at fixed δᴷ, and
//! - the interaction part, `α s (∂g/∂δᴷ) dδᴷ/dθ`.
//!
//! The interaction is computed by a reverse sweep over the recorded tape,
//! which needs one Hessian-vector product per step. Each product is a central
//! difference of the combined (∂g/∂δ, ∂g/∂θ) gradient, i.e. two gradient
//! evaluations. [`jacobian_forward_oracle`] materializes dδᴷ/dθ with the
//! forward recursion instead and exists to check the sweep on small problems.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use rand::Rng;

use crate::diffmodel::{Batch, Matrix, ModelParams};
use crate::error::{contract, Error, Result};
use crate::harness::optim::OptimizerState;
use crate::linalg::{norm2, norm_inf};
use crate::perturb::{ascent_step, project_jvp_rows, sample_init, AdvConfig, Perturbation};
use crate::regularizers::{adv_reg_loss, AdvRegObjective, RegularizerKind};
use crate::vat::{leader_gradient, PhaseTiming, StepStats};

/// Follower gradients below this norm mean δᴷ sits at a stationary point and
/// the interaction term is skipped.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-14;

/// Largest Jacobian (entries) the forward oracle will materialize.
pub const ORACLE_MAX_ENTRIES: usize = 1_000_000;

/// The follower's objective g(δ, θ) over a flattened perturbation of
/// `rows × cols` entries; projections act on each row.
pub trait InnerObjective {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;

    /// Weight applied to g in the leader objective.
    fn leader_scale(&self) -> f64 {
        1.0
    }

    fn eval(&self, params: &[f64], delta: &[f64]) -> Result<f64>;
    fn grad_delta(&self, params: &[f64], delta: &[f64]) -> Result<Vec<f64>>;
    fn grad_params(&self, params: &[f64], delta: &[f64]) -> Result<Vec<f64>>;

    /// `(∂g/∂δ, ∂g/∂θ)`; override when one pass can produce both.
    fn grad_both(&self, params: &[f64], delta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.grad_delta(params, delta)?, self.grad_params(params, delta)?))
    }

    fn has_exact_second_order(&self) -> bool {
        false
    }

    /// Exact directional derivative of `(∂g/∂δ, ∂g/∂θ)` along `(du, dw)`:
    /// `(H_δδ du + H_δθ dw, H_θδ du + H_θθ dw)`.
    fn grad_jvp_exact(
        &self,
        _params: &[f64],
        _delta: &[f64],
        _du: &[f64],
        _dw: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        Err(Error::Refused("objective has no exact second derivatives".into()))
    }
}

/// g(δ, θ) = ½ δᵀAδ + θᵀBδ with symmetric A (m × m) and B (P × m).
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    pub a: Matrix,
    pub b: Matrix,
    rows: usize,
    cols: usize,
}

impl QuadraticObjective {
    /// `rows × cols` must equal the size of A; projections act per row.
    pub fn new(a: Matrix, b: Matrix, rows: usize, cols: usize) -> Result<Self> {
        let m = a.rows;
        if a.cols != m || b.cols != m || rows * cols != m {
            return Err(contract("quadratic objective shapes disagree"));
        }
        for i in 0..m {
            for j in 0..i {
                if a.data[i * m + j] != a.data[j * m + i] {
                    return Err(contract("A must be symmetric"));
                }
            }
        }
        Ok(Self { a, b, rows, cols })
    }

    fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
        (0..m.rows).map(|i| crate::linalg::dot(m.row(i), v)).collect()
    }

    fn matvec_t(m: &Matrix, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m.cols];
        for i in 0..m.rows {
            crate::linalg::axpy(v[i], m.row(i), &mut out);
        }
        out
    }

    fn check(&self, params: &[f64], delta: &[f64]) -> Result<()> {
        if params.len() != self.b.rows || delta.len() != self.a.rows {
            return Err(contract("quadratic objective called with wrong sizes"));
        }
        Ok(())
    }
}

impl InnerObjective for QuadraticObjective {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn eval(&self, params: &[f64], delta: &[f64]) -> Result<f64> {
        self.check(params, delta)?;
        let ad = Self::matvec(&self.a, delta);
        let bd = Self::matvec(&self.b, delta);
        Ok(0.5 * crate::linalg::dot(delta, &ad) + crate::linalg::dot(params, &bd))
    }

    fn grad_delta(&self, params: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
        self.check(params, delta)?;
        let mut g = Self::matvec(&self.a, delta);
        let bt = Self::matvec_t(&self.b, params);
        crate::linalg::axpy(1.0, &bt, &mut g);
        Ok(g)
    }

    fn grad_params(&self, params: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
        self.check(params, delta)?;
        Ok(Self::matvec(&self.b, delta))
    }

    fn has_exact_second_order(&self) -> bool {
        true
    }

    fn grad_jvp_exact(
        &self,
        params: &[f64],
        delta: &[f64],
        du: &[f64],
        dw: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(params, delta)?;
        let mut hd = Self::matvec(&self.a, du);
        crate::linalg::axpy(1.0, &Self::matvec_t(&self.b, dw), &mut hd);
        Ok((hd, Self::matvec(&self.b, du)))
    }
}

/// Recorded follower trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollTape {
    /// δ⁰ … δᴷ, flattened row-major.
    pub deltas: Vec<Vec<f64>>,
    /// Pre-projection points δᵏ⁻¹ + η∇g for k = 1 … K.
    pub pre_projections: Vec<Vec<f64>>,
    pub cfg: AdvConfig,
    pub rows: usize,
    pub cols: usize,
    params_fingerprint: u64,
}

impl UnrollTape {
    pub fn last(&self) -> &[f64] {
        self.deltas.last().expect("tape always holds δ⁰")
    }

    pub fn final_perturbation(&self) -> Result<Perturbation> {
        Ok(Perturbation {
            values: Matrix::new(self.rows, self.cols, self.last().to_vec())?,
            constraint: (!self.pre_projections.is_empty()).then_some((self.cfg.norm, self.cfg.epsilon)),
        })
    }

    fn check(&self, params: &[f64], obj: &dyn InnerObjective, cfg: &AdvConfig) -> Result<()> {
        if self.rows != obj.rows() || self.cols != obj.cols() {
            return Err(contract("tape shape does not match the objective"));
        }
        if self.params_fingerprint != fingerprint(params) {
            return Err(contract("tape was recorded for different parameters"));
        }
        if self.cfg != *cfg {
            return Err(contract("tape was recorded under a different config"));
        }
        Ok(())
    }
}

fn fingerprint(values: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    values.len().hash(&mut h);
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Runs the follower from an explicit δ⁰ and records the trajectory.
pub fn unroll_from(
    params: &[f64],
    obj: &dyn InnerObjective,
    cfg: &AdvConfig,
    delta0: Vec<f64>,
) -> Result<UnrollTape> {
    if delta0.len() != obj.rows() * obj.cols() {
        return Err(contract("initial perturbation has the wrong size"));
    }
    let mut deltas = Vec::with_capacity(cfg.k_steps + 1);
    let mut pre_projections = Vec::with_capacity(cfg.k_steps);
    deltas.push(delta0);
    for _ in 0..cfg.k_steps {
        let (next, pre) = ascent_step(obj, params, deltas.last().unwrap(), cfg)?;
        pre_projections.push(pre);
        deltas.push(next);
    }
    Ok(UnrollTape {
        deltas,
        pre_projections,
        cfg: cfg.clone(),
        rows: obj.rows(),
        cols: obj.cols(),
        params_fingerprint: fingerprint(params),
    })
}

/// Samples δ⁰ ~ N(0, σ²) and unrolls K follower steps.
pub fn unroll_forward<R: Rng + ?Sized>(
    params: &[f64],
    obj: &dyn InnerObjective,
    cfg: &AdvConfig,
    rng: &mut R,
) -> Result<UnrollTape> {
    let d0 = sample_init(cfg.sigma, obj.rows(), obj.cols(), rng);
    unroll_from(params, obj, cfg, d0.values.data)
}

/// Central finite-difference Hessian-vector product of `grad_fn` at `point`
/// along `v`, with radius `r = fd_radius_scale · (1 + ‖point‖∞)` applied to
/// the unit direction. Exactly two gradient evaluations, none when `v = 0`.
pub fn hvp_fd<F>(mut grad_fn: F, point: &[f64], v: &[f64], fd_radius_scale: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let vn = norm2(v);
    if vn == 0.0 {
        return Ok(vec![0.0; point.len()]);
    }
    let r = fd_radius_scale * (1.0 + norm_inf(point));
    let step = r / vn;
    let plus: Vec<f64> = point.iter().zip(v).map(|(p, d)| p + step * d).collect();
    let minus: Vec<f64> = point.iter().zip(v).map(|(p, d)| p - step * d).collect();
    let gp = grad_fn(&plus)?;
    let gm = grad_fn(&minus)?;
    let s = vn / (2.0 * r);
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) * s).collect())
}

/// Where the second derivatives in the reverse sweep come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HvpSource {
    FiniteDifference,
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    /// α · vᵀ dδᴷ/dθ.
    pub grad: Vec<f64>,
    /// v = s ∂g/∂δᴷ vanished; `grad` is zero.
    pub degenerate: bool,
}

/// `(H_δδ u, H_θδ u)` at (δ, θ).
fn second_order(
    obj: &dyn InnerObjective,
    params: &[f64],
    delta: &[f64],
    u: &[f64],
    cfg: &AdvConfig,
    source: HvpSource,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = delta.len();
    match source {
        HvpSource::Exact => obj.grad_jvp_exact(params, delta, u, &vec![0.0; params.len()]),
        HvpSource::FiniteDifference => {
            if norm2(u) == 0.0 {
                return Ok((vec![0.0; m], vec![0.0; params.len()]));
            }
            let joint = hvp_fd(
                |d| {
                    let (gd, mut gp) = obj.grad_both(params, d)?;
                    let mut out = gd;
                    out.append(&mut gp);
                    Ok(out)
                },
                delta,
                u,
                cfg.fd_radius_scale,
            )?;
            let hp = joint[m..].to_vec();
            let mut hd = joint;
            hd.truncate(m);
            Ok((hd, hp))
        }
    }
}

/// Leader-follower interaction term α vᵀ dδᴷ/dθ using finite-difference HVPs.
pub fn interaction_adjoint(
    tape: &UnrollTape,
    params: &[f64],
    obj: &dyn InnerObjective,
    cfg: &AdvConfig,
) -> Result<Vec<f64>> {
    Ok(interaction_adjoint_with(tape, params, obj, cfg, HvpSource::FiniteDifference)?.grad)
}

/// Reverse sweep over the tape. With u ← v = s ∂g/∂δᴷ, for k = K … 1:
/// `w = Jᵀ_Π(zₖ) u`, `acc += η H_θδ(δᵏ⁻¹) w`, `u = w + η H_δδ(δᵏ⁻¹) w`.
/// Returns `α · acc`.
pub fn interaction_adjoint_with(
    tape: &UnrollTape,
    params: &[f64],
    obj: &dyn InnerObjective,
    cfg: &AdvConfig,
    source: HvpSource,
) -> Result<Interaction> {
    tape.check(params, obj, cfg)?;
    let scale = obj.leader_scale();
    let mut u: Vec<f64> = obj.grad_delta(params, tape.last())?.iter().map(|g| scale * g).collect();
    let mut acc = vec![0.0; params.len()];
    if norm2(&u) < DEGENERATE_GRAD_NORM {
        return Ok(Interaction {
            grad: acc,
            degenerate: true,
        });
    }
    for k in (1..=tape.pre_projections.len()).rev() {
        let w = project_jvp_rows(
            &tape.pre_projections[k - 1],
            &u,
            tape.cols,
            cfg.epsilon,
            cfg.norm,
            cfg.proj_mode,
        );
        let (hd, hp) = second_order(obj, params, &tape.deltas[k - 1], &w, cfg, source)?;
        crate::linalg::axpy(cfg.eta, &hp, &mut acc);
        u = w;
        crate::linalg::axpy(cfg.eta, &hd, &mut u);
    }
    Ok(Interaction {
        grad: acc.into_iter().map(|a| cfg.alpha * a).collect(),
        degenerate: false,
    })
}

/// Materializes dδᴷ/dθ (m × P) by the forward recursion
/// `Jᵏ = J_Π(zₖ) [Jᵏ⁻¹ + η (H_δδ Jᵏ⁻¹ + H_δθ)]`, one column at a time.
/// Uses exact second derivatives when the objective has them, otherwise
/// central differences of ∂g/∂δ along each joint (δ, θ) direction.
pub fn jacobian_forward_oracle(
    tape: &UnrollTape,
    params: &[f64],
    obj: &dyn InnerObjective,
    cfg: &AdvConfig,
) -> Result<Matrix> {
    tape.check(params, obj, cfg)?;
    let m = tape.rows * tape.cols;
    let p = params.len();
    if m.saturating_mul(p) > ORACLE_MAX_ENTRIES {
        return Err(Error::Refused(format!(
            "Jacobian would have {m} x {p} entries (limit {ORACLE_MAX_ENTRIES})"
        )));
    }
    // columns of dδ/dθ
    let mut cols = vec![vec![0.0; m]; p];
    let mut e = vec![0.0; p];
    for k in 1..=tape.pre_projections.len() {
        let delta = &tape.deltas[k - 1];
        for (j, col) in cols.iter_mut().enumerate() {
            e[j] = 1.0;
            let hd = if obj.has_exact_second_order() {
                obj.grad_jvp_exact(params, delta, col, &e)?.0
            } else {
                joint_grad_delta_fd(obj, params, delta, col, &e)?
            };
            e[j] = 0.0;
            let mut inner = col.clone();
            crate::linalg::axpy(cfg.eta, &hd, &mut inner);
            *col = project_jvp_rows(
                &tape.pre_projections[k - 1],
                &inner,
                tape.cols,
                cfg.epsilon,
                cfg.norm,
                cfg.proj_mode,
            );
        }
    }
    let mut data = vec![0.0; m * p];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..m {
            data[i * p + j] = col[i];
        }
    }
    Matrix::new(m, p, data)
}

fn joint_grad_delta_fd(
    obj: &dyn InnerObjective,
    params: &[f64],
    delta: &[f64],
    du: &[f64],
    dw: &[f64],
) -> Result<Vec<f64>> {
    let h = 1e-6;
    let shifted = |s: f64| -> Result<Vec<f64>> {
        let pp: Vec<f64> = params.iter().zip(dw).map(|(a, b)| a + s * b).collect();
        let dd: Vec<f64> = delta.iter().zip(du).map(|(a, b)| a + s * b).collect();
        obj.grad_delta(&pp, &dd)
    };
    let a = shifted(h)?;
    let b = shifted(-h)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackelbergGrad {
    pub total: Vec<f64>,
    pub leader_part: Vec<f64>,
    pub interaction_part: Vec<f64>,
    pub degenerate: bool,
}

/// Everything one SALT gradient evaluation produces.
#[derive(Clone, Debug)]
pub struct StackelbergEval {
    pub grad: StackelbergGrad,
    pub tape: UnrollTape,
    pub clean_loss: f64,
    pub timing: PhaseTiming,
}

/// Stackelberg gradient from an explicit δ⁰.
pub fn stackelberg_gradient_from(
    params: &ModelParams,
    batch: &Batch,
    cfg: &AdvConfig,
    kind: RegularizerKind,
    delta0: &Perturbation,
) -> Result<StackelbergEval> {
    stackelberg_eval(params, batch, cfg, kind, delta0, HvpSource::FiniteDifference)
}

pub(crate) fn stackelberg_eval(
    params: &ModelParams,
    batch: &Batch,
    cfg: &AdvConfig,
    kind: RegularizerKind,
    delta0: &Perturbation,
    source: HvpSource,
) -> Result<StackelbergEval> {
    if !batch.inputs.same_shape(&delta0.values) {
        return Err(contract("initial perturbation does not match the batch"));
    }
    let obj = AdvRegObjective::new(params, &batch.inputs, kind, cfg.detach_clean)?;
    let t0 = Instant::now();
    let tape = unroll_from(&params.values, &obj, cfg, delta0.values.data.clone())?;
    let t1 = Instant::now();
    let delta_k = Matrix::new(tape.rows, tape.cols, tape.last().to_vec())?;
    let (clean_loss, leader_part) = leader_gradient(params, batch, &delta_k, cfg, kind)?;
    let t2 = Instant::now();
    let interaction = interaction_adjoint_with(&tape, &params.values, &obj, cfg, source)?;
    let t3 = Instant::now();
    let total = leader_part
        .iter()
        .zip(&interaction.grad)
        .map(|(a, b)| a + b)
        .collect();
    Ok(StackelbergEval {
        grad: StackelbergGrad {
            total,
            leader_part,
            interaction_part: interaction.grad,
            degenerate: interaction.degenerate,
        },
        tape,
        clean_loss,
        timing: PhaseTiming {
            inner: (t1 - t0).as_secs_f64(),
            leader: (t2 - t1).as_secs_f64(),
            interaction: (t3 - t2).as_secs_f64(),
            update: 0.0,
        },
    })
}

/// Total derivative dF/dθ with δ⁰ drawn from `rng`.
pub fn stackelberg_gradient<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    cfg: &AdvConfig,
    kind: RegularizerKind,
    rng: &mut R,
) -> Result<StackelbergGrad> {
    let d0 = sample_init(cfg.sigma, batch.inputs.rows, batch.inputs.cols, rng);
    Ok(stackelberg_gradient_from(params, batch, cfg, kind, &d0)?.grad)
}

/// F(θ) = ℓ(f(x, θ), y) + α ℓ_v(x, δᴷ(θ), θ) for a fixed δ⁰.
pub fn leader_objective(
    params: &ModelParams,
    batch: &Batch,
    cfg: &AdvConfig,
    kind: RegularizerKind,
    delta0: &Perturbation,
) -> Result<f64> {
    let obj = AdvRegObjective::new(params, &batch.inputs, kind, cfg.detach_clean)?;
    let tape = unroll_from(&params.values, &obj, cfg, delta0.values.data.clone())?;
    let delta_k = Matrix::new(tape.rows, tape.cols, tape.last().to_vec())?;
    let clean = crate::diffmodel::task_loss(
        &crate::diffmodel::mlp_forward(params, &batch.inputs)?,
        &batch.targets,
    )?;
    Ok(clean + cfg.alpha * adv_reg_loss(params, &batch.inputs, &delta_k, kind)?)
}

/// One SALT step: unroll, Stackelberg gradient, leader optimizer update.
pub fn salt_training_step<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    cfg: &AdvConfig,
    kind: RegularizerKind,
    optimizer: &mut OptimizerState,
    rng: &mut R,
) -> Result<(ModelParams, StepStats)> {
    let d0 = sample_init(cfg.sigma, batch.inputs.rows, batch.inputs.cols, rng);
    let eval = stackelberg_gradient_from(params, batch, cfg, kind, &d0)?;
    let t0 = Instant::now();
    let next = params.with_values(optimizer.step(&params.values, &eval.grad.total))?;
    let update = t0.elapsed().as_secs_f64();
    let delta_k = eval.tape.final_perturbation()?;
    let reg_loss = adv_reg_loss(params, &batch.inputs, &delta_k.values, kind)?;
    let leader_norm = norm2(&eval.grad.leader_part);
    let ratio = if leader_norm > 0.0 {
        norm2(&eval.grad.interaction_part) / leader_norm
    } else {
        0.0
    };
    Ok((
        next,
        StepStats {
            clean_loss: eval.clean_loss,
            reg_loss,
            delta_norm: delta_k.max_row_norm(cfg.norm),
            interaction_ratio: ratio,
            degenerate: eval.grad.degenerate,
            timing: PhaseTiming { update, ..eval.timing },
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmodel::Targets;
    use crate::linalg::rel_err;
    use crate::perturb::{NormKind, ProjMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(r: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-s..s)).collect()
    }

    fn sym(r: &mut ChaCha8Rng, m: usize, s: f64) -> Matrix {
        let raw = rand_vec(r, m * m, s);
        let mut a = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                a[i * m + j] = 0.5 * (raw[i * m + j] + raw[j * m + i]);
            }
        }
        Matrix::new(m, m, a).unwrap()
    }

    fn quad(r: &mut ChaCha8Rng, m: usize, p: usize) -> QuadraticObjective {
        let a = sym(r, m, 1.0);
        let b = Matrix::new(p, m, rand_vec(r, p * m, 1.0)).unwrap();
        QuadraticObjective::new(a, b, 1, m).unwrap()
    }

    /// Large radius so the ball never binds.
    fn free_cfg(k: usize, eta: f64) -> AdvConfig {
        AdvConfig {
            alpha: 1.0,
            epsilon: 1e6,
            eta,
            sigma: 0.5,
            k_steps: k,
            ..AdvConfig::default()
        }
    }

    fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
        (0..m.rows).map(|i| crate::linalg::dot(m.row(i), v)).collect()
    }

    #[test]
    fn k_zero_tape_and_interaction() {
        let mut r = rng(1);
        let q = quad(&mut r, 3, 4);
        let th = rand_vec(&mut r, 4, 1.0);
        let c = free_cfg(0, 0.1);
        let tape = unroll_forward(&th, &q, &c, &mut r).unwrap();
        assert_eq!(tape.deltas.len(), 1);
        assert!(tape.pre_projections.is_empty());
        assert!(interaction_adjoint(&tape, &th, &q, &c).unwrap().iter().all(|&g| g == 0.0));
        let j = jacobian_forward_oracle(&tape, &th, &q, &c).unwrap();
        assert!(j.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_unroll_matches_linear_recursion() {
        // δᵏ = (I + ηA)ᵏ δ⁰ + η Σ_{j<k} (I + ηA)ʲ Bᵀθ
        let mut r = rng(2);
        let m = 3;
        let q = quad(&mut r, m, 5);
        let th = rand_vec(&mut r, 5, 1.0);
        let c = free_cfg(4, 0.1);
        let d0 = rand_vec(&mut r, m, 0.5);
        let tape = unroll_from(&th, &q, &c, d0.clone()).unwrap();
        let step = |v: &[f64]| -> Vec<f64> {
            let av = mat_vec(&q.a, v);
            v.iter().zip(&av).map(|(x, y)| x + c.eta * y).collect()
        };
        let mut bt = vec![0.0; m];
        for i in 0..5 {
            crate::linalg::axpy(th[i], q.b.row(i), &mut bt);
        }
        for k in 0..=4 {
            let mut pow = d0.clone();
            for _ in 0..k {
                pow = step(&pow);
            }
            let mut geo = vec![0.0; m];
            let mut term = bt.clone();
            for _ in 0..k {
                crate::linalg::axpy(c.eta, &term, &mut geo);
                term = step(&term);
            }
            let expect = crate::linalg::add(&pow, &geo);
            assert!(rel_err(&tape.deltas[k], &expect) < 1e-13, "k={k}");
        }
    }

    #[test]
    fn steep_quadratic_saturates_the_ball() {
        let m = 3;
        let a = Matrix::new(m, m, vec![5.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
        let b = Matrix::zeros(2, m);
        let q = QuadraticObjective::new(a, b, 1, m).unwrap();
        let c = AdvConfig {
            epsilon: 0.5,
            eta: 1.0,
            sigma: 0.1,
            k_steps: 5,
            ..AdvConfig::default()
        };
        let tape = unroll_from(&[0.0, 0.0], &q, &c, vec![0.1, -0.05, 0.2]).unwrap();
        for d in &tape.deltas[1..] {
            assert!((norm2(d) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn hvp_fd_properties() {
        let mut r = rng(3);
        let a = sym(&mut r, 5, 2.0);
        let calls = Cell::new(0);
        let grad = |x: &[f64]| {
            calls.set(calls.get() + 1);
            Ok(mat_vec(&a, x))
        };
        let p = rand_vec(&mut r, 5, 3.0);
        let v = rand_vec(&mut r, 5, 1.0);
        let h = hvp_fd(grad, &p, &v, 1e-4).unwrap();
        assert_eq!(calls.get(), 2);
        assert!(rel_err(&h, &mat_vec(&a, &v)) <= 1e-8);
        let h0 = hvp_fd(grad, &p, &[0.0; 5], 1e-4).unwrap();
        assert_eq!(h0, vec![0.0; 5]);
        assert_eq!(calls.get(), 2);
    }

    #[test]
    fn hvp_fd_on_cubic() {
        // f = x0² x1 + x1 x2³ + x0 x2
        let grad = |x: &[f64]| {
            Ok(vec![
                2.0 * x[0] * x[1] + x[2],
                x[0] * x[0] + x[2].powi(3),
                3.0 * x[1] * x[2] * x[2] + x[0],
            ])
        };
        let x = [0.7, -1.3, 0.4];
        let hess = [
            [2.0 * x[1], 2.0 * x[0], 1.0],
            [2.0 * x[0], 0.0, 3.0 * x[2] * x[2]],
            [1.0, 3.0 * x[2] * x[2], 6.0 * x[1] * x[2]],
        ];
        let v = [0.3, 0.9, -0.5];
        let exact: Vec<f64> = hess.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let h = hvp_fd(grad, &x, &v, 1e-4).unwrap();
        assert!(rel_err(&h, &exact) <= 1e-5);
    }

    #[test]
    fn theta_independent_objective_has_no_interaction() {
        let mut r = rng(4);
        let a = sym(&mut r, 3, 1.0);
        let q = QuadraticObjective::new(a, Matrix::zeros(4, 3), 1, 3).unwrap();
        let th = rand_vec(&mut r, 4, 1.0);
        let c = free_cfg(3, 0.2);
        let tape = unroll_forward(&th, &q, &c, &mut r).unwrap();
        let g = interaction_adjoint(&tape, &th, &q, &c).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_step_quadratic_closed_form() {
        // K = 1, no projection: δ¹ = δ⁰ + η(Aδ⁰ + Bᵀθ), dδ¹/dθ = η Bᵀ,
        // v = Aδ¹ + Bᵀθ, interaction = α η B v
        let mut r = rng(5);
        let q = quad(&mut r, 3, 4);
        let th = rand_vec(&mut r, 4, 1.0);
        let c = AdvConfig {
            alpha: 0.7,
            ..free_cfg(1, 0.3)
        };
        let tape = unroll_forward(&th, &q, &c, &mut r).unwrap();
        let v = q.grad_delta(&th, &tape.deltas[1]).unwrap();
        let expect: Vec<f64> = mat_vec(&q.b, &v).iter().map(|x| c.alpha * c.eta * x).collect();
        for src in [HvpSource::Exact, HvpSource::FiniteDifference] {
            let got = interaction_adjoint_with(&tape, &th, &q, &c, src).unwrap().grad;
            assert!(rel_err(&got, &expect) <= 1e-6, "{src:?}");
        }
        let j = jacobian_forward_oracle(&tape, &th, &q, &c).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                assert!((j.data[i * 4 + k] - c.eta * q.b.data[k * 3 + i]).abs() < 1e-15);
            }
        }
    }

    fn vjp(v: &[f64], j: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; j.cols];
        for i in 0..j.rows {
            crate::linalg::axpy(v[i], j.row(i), &mut out);
        }
        out
    }

    #[test]
    fn reverse_sweep_matches_forward_jacobian_on_quadratics_with_projection() {
        for seed in 0..20 {
            let mut r = rng(100 + seed);
            let (rows, cols) = (2, 3);
            let a = sym(&mut r, rows * cols, 1.0);
            let b = Matrix::new(5, rows * cols, rand_vec(&mut r, 5 * rows * cols, 1.0)).unwrap();
            let q = QuadraticObjective::new(a, b, rows, cols).unwrap();
            let th = rand_vec(&mut r, 5, 1.0);
            let norm = if seed % 2 == 0 { NormKind::L2 } else { NormKind::LInf };
            let c = AdvConfig {
                alpha: 1.3,
                epsilon: 0.6,
                eta: 0.4,
                sigma: 0.5,
                k_steps: 1 + (seed as usize % 3),
                norm,
                ..AdvConfig::default()
            };
            let tape = unroll_forward(&th, &q, &c, &mut r).unwrap();
            let j = jacobian_forward_oracle(&tape, &th, &q, &c).unwrap();
            let v = q.grad_delta(&th, tape.last()).unwrap();
            let fwd: Vec<f64> = vjp(&v, &j);
            let exact = interaction_adjoint_with(&tape, &th, &q, &c, HvpSource::Exact).unwrap();
            let rev: Vec<f64> = exact.grad.iter().map(|g| g / c.alpha).collect();
            assert!(rel_err(&rev, &fwd) <= 1e-8, "seed {seed}: {}", rel_err(&rev, &fwd));
            let fd = interaction_adjoint(&tape, &th, &q, &c).unwrap();
            let fdr: Vec<f64> = fd.iter().map(|g| g / c.alpha).collect();
            assert!(rel_err(&fdr, &fwd) <= 1e-8, "seed {seed}");
        }
    }

    #[test]
    fn tape_mismatch_is_rejected() {
        let mut r = rng(6);
        let q = quad(&mut r, 3, 4);
        let th = rand_vec(&mut r, 4, 1.0);
        let c = free_cfg(2, 0.1);
        let tape = unroll_forward(&th, &q, &c, &mut r).unwrap();
        let other = rand_vec(&mut r, 4, 1.0);
        assert!(matches!(interaction_adjoint(&tape, &other, &q, &c), Err(Error::Contract(_))));
        let c2 = free_cfg(2, 0.2);
        assert!(interaction_adjoint(&tape, &th, &q, &c2).is_err());
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let m = 1001;
        let q = QuadraticObjective::new(Matrix::zeros(m, m), Matrix::zeros(1000, m), 1, m).unwrap();
        let th = vec![0.0; 1000];
        let c = free_cfg(1, 0.1);
        let tape = unroll_from(&th, &q, &c, vec![0.0; m]).unwrap();
        assert!(matches!(
            jacobian_forward_oracle(&tape, &th, &q, &c),
            Err(Error::Refused(_))
        ));
    }

    fn mlp_case(seed: u64) -> (ModelParams, Batch) {
        let mut r = rng(seed);
        let p = ModelParams::init(&[3, 6, 3], &mut r).unwrap();
        let x = rand_vec(&mut r, 4 * 3, 1.5);
        let labels = (0..4).map(|_| r.gen_range(0..3)).collect();
        let b = Batch::new(Matrix::new(4, 3, x).unwrap(), Targets::Labels { classes: 3, labels }).unwrap();
        (p, b)
    }

    #[test]
    fn alpha_zero_gives_clean_gradient() {
        let (p, b) = mlp_case(7);
        let c = AdvConfig {
            alpha: 0.0,
            sigma: 0.3,
            eta: 0.5,
            ..AdvConfig::default()
        };
        let g = stackelberg_gradient(&p, &b, &c, RegularizerKind::KlDivergence, &mut rng(1)).unwrap();
        assert_eq!(g.total, crate::diffmodel::grad_params(&p, &b).unwrap());
        assert!(g.interaction_part.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn k_zero_equals_vat_gradient_at_initial_sample() {
        let (p, b) = mlp_case(8);
        let c = AdvConfig {
            k_steps: 0,
            sigma: 0.3,
            ..AdvConfig::default()
        };
        let k = RegularizerKind::KlDivergence;
        let g = stackelberg_gradient(&p, &b, &c, k, &mut rng(2)).unwrap();
        let d0 = sample_init(c.sigma, 4, 3, &mut rng(2));
        let v = crate::vat::vat_gradient(&p, &b, &d0, &c, k).unwrap();
        assert_eq!(g.total, v);
    }

    #[test]
    fn decomposition_is_exact() {
        let (p, b) = mlp_case(9);
        let c = AdvConfig {
            sigma: 0.3,
            eta: 0.5,
            ..AdvConfig::default()
        };
        let g = stackelberg_gradient(&p, &b, &c, RegularizerKind::KlDivergence, &mut rng(3)).unwrap();
        for i in 0..g.total.len() {
            assert_eq!(g.total[i], g.leader_part[i] + g.interaction_part[i]);
        }
    }

    #[test]
    fn unroll_matches_vat_trajectory() {
        let (p, b) = mlp_case(10);
        let c = AdvConfig {
            sigma: 0.3,
            eta: 0.5,
            epsilon: 0.5,
            k_steps: 3,
            ..AdvConfig::default()
        };
        let k = RegularizerKind::KlDivergence;
        let obj = AdvRegObjective::new(&p, &b.inputs, k, false).unwrap();
        let tape = unroll_forward(&p.values, &obj, &c, &mut rng(4)).unwrap();
        let vat = crate::vat::vat_inner_maximize(&p, &b.inputs, &c, k, &mut rng(4)).unwrap();
        assert_eq!(tape.last(), &vat.values.data[..]);
        // and step by step through the public pga_step
        let mut d = sample_init(c.sigma, 4, 3, &mut rng(4));
        for kk in 1..=3 {
            let (next, pre) = crate::perturb::pga_step(&p, &b.inputs, &d, &c, k).unwrap();
            assert_eq!(next.values.data, tape.deltas[kk]);
            assert_eq!(pre.data, tape.pre_projections[kk - 1]);
            d = next;
        }
    }

    #[test]
    fn stackelberg_gradient_matches_finite_differences_of_leader_objective() {
        let (p, b) = mlp_case(11);
        let k = RegularizerKind::KlDivergence;
        for norm in [NormKind::L2, NormKind::LInf] {
            let c = AdvConfig {
                alpha: 2.0,
                sigma: 0.4,
                eta: 0.8,
                epsilon: 5.0,
                k_steps: 2,
                norm,
                proj_mode: ProjMode::ExactJacobian,
                ..AdvConfig::default()
            };
            let d0 = sample_init(c.sigma, 4, 3, &mut rng(5));
            let g = stackelberg_gradient_from(&p, &b, &c, k, &d0).unwrap().grad;
            let h = 1e-5;
            let mut v = p.values.clone();
            let mut fd = vec![0.0; v.len()];
            for j in 0..v.len() {
                let o = v[j];
                v[j] = o + h;
                let fp = leader_objective(&p.with_values(v.clone()).unwrap(), &b, &c, k, &d0).unwrap();
                v[j] = o - h;
                let fm = leader_objective(&p.with_values(v.clone()).unwrap(), &b, &c, k, &d0).unwrap();
                v[j] = o;
                fd[j] = (fp - fm) / (2.0 * h);
            }
            assert!(rel_err(&g.total, &fd) <= 1e-4, "{norm:?}: {}", rel_err(&g.total, &fd));
            // the leader part alone is measurably wrong
            assert!(rel_err(&g.leader_part, &fd) > 1e-3);
        }
    }

    #[test]
    fn degenerate_origin_sets_flag() {
        let (p, b) = mlp_case(12);
        let c = AdvConfig {
            sigma: 0.0,
            eta: 0.5,
            ..AdvConfig::default()
        };
        let g = stackelberg_gradient(&p, &b, &c, RegularizerKind::KlDivergence, &mut rng(6)).unwrap();
        assert!(g.degenerate);
        assert!(g.interaction_part.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn salt_step_matches_vat_step_when_k_is_zero() {
        use crate::harness::optim::{OptimizerConfig, OptimizerState};
        let (p, b) = mlp_case(13);
        let c = AdvConfig {
            k_steps: 0,
            sigma: 0.2,
            ..AdvConfig::default()
        };
        let oc = OptimizerConfig::Adam {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        };
        let k = RegularizerKind::KlDivergence;
        let mut s1 = OptimizerState::new(&oc);
        let mut s2 = OptimizerState::new(&oc);
        let (a, _) = salt_training_step(&p, &b, &c, k, &mut s1, &mut rng(7)).unwrap();
        let (v, _) = crate::vat::vat_training_step(&p, &b, &c, k, &mut s2, &mut rng(7)).unwrap();
        assert_eq!(a, v);
        assert_eq!(s1, s2);
        let mut s3 = OptimizerState::new(&oc);
        let (again, _) = salt_training_step(&p, &b, &c, k, &mut s3, &mut rng(7)).unwrap();
        assert_eq!(a, again);
    }
}
