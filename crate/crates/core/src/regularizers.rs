//! Smoothness regularizer ℓ_v between clean and perturbed predictions.
//!
//! Classification heads use KL(f(x) ‖ f(x+δ)) over softmax outputs; scalar
//! heads use (f(x) − f(x+δ))². The public loss and gradients are batch means.
//! The follower ascends the per-example regularizer, which is the batch *sum*
//! seen by [`AdvRegObjective`].

use serde::{Deserialize, Serialize};

use crate::diffmodel::{log_softmax, Head, Layout, Matrix, ModelParams};
use crate::dual::{self, Dual, Scalar};
use crate::error::{contract, Result};
use crate::salt::InnerObjective;

/// KL terms whose clean-side probability falls below this count as 0·log 0.
const KL_ZERO: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    KlDivergence,
    SquaredDifference,
}

impl RegularizerKind {
    /// The natural regularizer for a head.
    pub fn for_head(head: Head) -> Self {
        match head {
            Head::Classification { .. } => RegularizerKind::KlDivergence,
            Head::Regression => RegularizerKind::SquaredDifference,
        }
    }

    fn check(self, params: &ModelParams) -> Result<()> {
        match (self, params.head()) {
            (RegularizerKind::KlDivergence, Head::Classification { .. })
            | (RegularizerKind::SquaredDifference, Head::Regression) => Ok(()),
            (k, h) => Err(contract(format!("{k:?} regularizer cannot be used with a {h:?} head"))),
        }
    }
}

/// KL(p ‖ q) = Σ p_k log(p_k / q_k).
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(contract(format!("KL over {} vs {} entries", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pk, _)| pk >= KL_ZERO)
        .map(|(&pk, &qk)| pk * (pk / qk).ln())
        .sum())
}

pub(crate) struct RegEval<T> {
    /// Σ over examples of ℓ_v.
    pub value: T,
    /// Gradient of the sum w.r.t. θ (empty unless requested).
    pub grad_params: Vec<T>,
    /// Gradient of the sum w.r.t. δ (empty unless requested).
    pub grad_delta: Vec<T>,
}

#[derive(Clone, Copy)]
pub(crate) struct Want {
    pub params: bool,
    pub delta: bool,
    pub detach_clean: bool,
}

/// Regularizer summed over the batch, with optional gradients. Generic so the
/// same kernel runs on dual numbers for exact second derivatives.
pub(crate) fn reg_sum<T: Scalar>(
    layout: &Layout,
    kind: RegularizerKind,
    params: &[T],
    x: &[T],
    delta: &[T],
    n: usize,
    want: Want,
) -> RegEval<T> {
    let xd: Vec<T> = x.iter().zip(delta).map(|(&a, &b)| a + b).collect();
    let clean = layout.forward(params, x, n);
    let pert = layout.forward(params, &xd, n);
    let fc = clean.last().unwrap();
    let fp = pert.last().unwrap();
    let c = layout.output_dim();

    let mut value = T::zero();
    let mut d_clean = vec![T::zero(); n * c];
    let mut d_pert = vec![T::zero(); n * c];
    match kind {
        RegularizerKind::KlDivergence => {
            for i in 0..n {
                let lp = log_softmax(&fc[i * c..(i + 1) * c]);
                let lq = log_softmax(&fp[i * c..(i + 1) * c]);
                let mut kl = T::zero();
                let mut probs = Vec::with_capacity(c);
                for k in 0..c {
                    let p = lp[k].exp();
                    probs.push(p);
                    if p.re() >= KL_ZERO {
                        kl += p * (lp[k] - lq[k]);
                    }
                }
                // rounding can leave a tiny negative sum near δ = 0
                value += if kl.re() < 0.0 { T::zero() } else { kl };
                for k in 0..c {
                    let p = probs[k];
                    d_pert[i * c + k] = lq[k].exp() - p;
                    if p.re() >= KL_ZERO {
                        d_clean[i * c + k] = p * (lp[k] - lq[k] - kl);
                    }
                }
            }
        }
        RegularizerKind::SquaredDifference => {
            for i in 0..n {
                let r = fc[i] - fp[i];
                value += r * r;
                d_pert[i] = T::cst(-2.0) * r;
                d_clean[i] = T::cst(2.0) * r;
            }
        }
    }

    let mut grad_params = Vec::new();
    let mut grad_delta = Vec::new();
    if want.params || want.delta {
        let (gp, gi) = layout.backward(params, &pert, &d_pert, n, want.params, want.delta);
        grad_params = gp;
        grad_delta = gi;
    }
    if want.params && !want.detach_clean {
        let (gc, _) = layout.backward(params, &clean, &d_clean, n, true, false);
        for (a, b) in grad_params.iter_mut().zip(gc) {
            *a += b;
        }
    }
    RegEval {
        value,
        grad_params,
        grad_delta,
    }
}

fn check_shapes(params: &ModelParams, x: &Matrix, delta: &Matrix, kind: RegularizerKind) -> Result<()> {
    kind.check(params)?;
    if x.cols != params.input_dim() {
        return Err(contract(format!(
            "input has {} columns, model expects {}",
            x.cols,
            params.input_dim()
        )));
    }
    if !x.same_shape(delta) {
        return Err(contract(format!(
            "perturbation {}x{} does not match input {}x{}",
            delta.rows, delta.cols, x.rows, x.cols
        )));
    }
    Ok(())
}

fn eval_f64(
    params: &ModelParams,
    x: &Matrix,
    delta: &Matrix,
    kind: RegularizerKind,
    want: Want,
) -> Result<RegEval<f64>> {
    check_shapes(params, x, delta, kind)?;
    Ok(reg_sum(
        &params.layout(),
        kind,
        &params.values,
        &x.data,
        &delta.data,
        x.rows,
        want,
    ))
}

const VALUE_ONLY: Want = Want {
    params: false,
    delta: false,
    detach_clean: false,
};

/// Batch-mean regularizer ℓ_v(x, δ, θ).
pub fn adv_reg_loss(params: &ModelParams, x: &Matrix, delta: &Matrix, kind: RegularizerKind) -> Result<f64> {
    let e = eval_f64(params, x, delta, kind, VALUE_ONLY)?;
    Ok(e.value / x.rows as f64)
}

/// ∂ℓ_v/∂δ of the batch mean. Only the perturbed branch depends on δ.
pub fn adv_reg_grad_delta(
    params: &ModelParams,
    x: &Matrix,
    delta: &Matrix,
    kind: RegularizerKind,
) -> Result<Matrix> {
    let e = eval_f64(
        params,
        x,
        delta,
        kind,
        Want {
            params: false,
            delta: true,
            detach_clean: false,
        },
    )?;
    let inv_n = 1.0 / x.rows as f64;
    Matrix::new(x.rows, x.cols, e.grad_delta.iter().map(|g| g * inv_n).collect())
}

/// ∂ℓ_v/∂θ of the batch mean with δ held fixed, through both KL arguments.
pub fn adv_reg_grad_params(
    params: &ModelParams,
    x: &Matrix,
    delta: &Matrix,
    kind: RegularizerKind,
) -> Result<Vec<f64>> {
    adv_reg_grad_params_with(params, x, delta, kind, false)
}

/// As [`adv_reg_grad_params`]; `detach_clean` drops the clean branch f(x, θ).
pub fn adv_reg_grad_params_with(
    params: &ModelParams,
    x: &Matrix,
    delta: &Matrix,
    kind: RegularizerKind,
    detach_clean: bool,
) -> Result<Vec<f64>> {
    let e = eval_f64(
        params,
        x,
        delta,
        kind,
        Want {
            params: true,
            delta: false,
            detach_clean,
        },
    )?;
    let inv_n = 1.0 / x.rows as f64;
    Ok(e.grad_params.iter().map(|g| g * inv_n).collect())
}

/// The regularizer as the follower's objective over a flattened δ: the sum of
/// per-example ℓ_v, so each δ_i ascends its own ℓ_v(x_i, δ_i, θ). The leader
/// sees the mean, hence `leader_scale() = 1/n`.
#[derive(Clone, Debug)]
pub struct AdvRegObjective<'a> {
    layout: Layout,
    shapes: Vec<(usize, usize)>,
    x: &'a Matrix,
    kind: RegularizerKind,
    detach_clean: bool,
}

impl<'a> AdvRegObjective<'a> {
    pub fn new(params: &ModelParams, x: &'a Matrix, kind: RegularizerKind, detach_clean: bool) -> Result<Self> {
        check_shapes(params, x, x, kind)?;
        Ok(Self {
            layout: params.layout(),
            shapes: params.shapes.clone(),
            x,
            kind,
            detach_clean,
        })
    }

    fn check(&self, params: &[f64], delta: &[f64]) -> Result<()> {
        let p: usize = self.shapes.iter().map(|(r, c)| r * c).sum();
        if params.len() != p || delta.len() != self.x.data.len() {
            return Err(contract(format!(
                "objective expects {p} params and {} perturbation entries, got {} and {}",
                self.x.data.len(),
                params.len(),
                delta.len()
            )));
        }
        Ok(())
    }

    fn run(&self, params: &[f64], delta: &[f64], want: Want) -> Result<RegEval<f64>> {
        self.check(params, delta)?;
        Ok(reg_sum(&self.layout, self.kind, params, &self.x.data, delta, self.x.rows, want))
    }
}

impl InnerObjective for AdvRegObjective<'_> {
    fn rows(&self) -> usize {
        self.x.rows
    }

    fn cols(&self) -> usize {
        self.x.cols
    }

    fn leader_scale(&self) -> f64 {
        1.0 / self.x.rows as f64
    }

    fn eval(&self, params: &[f64], delta: &[f64]) -> Result<f64> {
        Ok(self.run(params, delta, VALUE_ONLY)?.value)
    }

    fn grad_delta(&self, params: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .run(
                params,
                delta,
                Want {
                    params: false,
                    delta: true,
                    detach_clean: self.detach_clean,
                },
            )?
            .grad_delta)
    }

    fn grad_params(&self, params: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .run(
                params,
                delta,
                Want {
                    params: true,
                    delta: false,
                    detach_clean: self.detach_clean,
                },
            )?
            .grad_params)
    }

    fn grad_both(&self, params: &[f64], delta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let e = self.run(
            params,
            delta,
            Want {
                params: true,
                delta: true,
                detach_clean: self.detach_clean,
            },
        )?;
        Ok((e.grad_delta, e.grad_params))
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
        let p = dual::lift(params, Some(dw));
        let x = dual::lift(&self.x.data, None);
        let d = dual::lift(delta, Some(du));
        let e: RegEval<Dual> = reg_sum(
            &self.layout,
            self.kind,
            &p,
            &x,
            &d,
            self.x.rows,
            Want {
                params: true,
                delta: true,
                detach_clean: self.detach_clean,
            },
        );
        Ok((dual::tangents(&e.grad_delta), dual::tangents(&e.grad_params)))
    }
}
