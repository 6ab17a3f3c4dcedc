//! Perturbation lifecycle: Gaussian init, norm-ball projection and its
//! Jacobian-vector product, and one projected-gradient-ascent follower step.
//!
//! Constraints are per example: a perturbation is an `n × d` matrix and each
//! row is projected onto its own ball of radius ε.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmodel::{Matrix, ModelParams};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2};
use crate::regularizers::{AdvRegObjective, RegularizerKind};
use crate::salt::InnerObjective;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L2,
    LInf,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(NormKind::L2),
            "linf" | "l_inf" | "inf" => Ok(NormKind::LInf),
            other => Err(Error::Config(format!("unknown norm {other:?} (expected l2 or linf)"))),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::L2 => "l2",
            NormKind::LInf => "linf",
        })
    }
}

/// How the projection is differentiated when unrolling the follower.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjMode {
    ExactJacobian,
    StraightThrough,
}

/// Adversarial hyperparameters shared by the Adv, VAT and SALT methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    /// Regularization weight α.
    pub alpha: f64,
    /// Ball radius ε.
    pub epsilon: f64,
    /// Follower step size η.
    pub eta: f64,
    /// Std of the Gaussian initial perturbation.
    pub sigma: f64,
    /// Number of unrolled follower steps K.
    pub k_steps: usize,
    pub norm: NormKind,
    pub proj_mode: ProjMode,
    /// Finite-difference HVP radius is `fd_radius_scale * (1 + ‖point‖∞)`.
    pub fd_radius_scale: f64,
    /// Stop the θ-gradient through the clean branch f(x, θ) of the regularizer.
    pub detach_clean: bool,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 1.0,
            eta: 1e-3,
            sigma: 1e-4,
            k_steps: 2,
            norm: NormKind::L2,
            proj_mode: ProjMode::ExactJacobian,
            fd_radius_scale: 1e-4,
            detach_clean: false,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be non-negative");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if !(self.fd_radius_scale > 0.0 && self.fd_radius_scale.is_finite()) {
            return bad("fd_radius_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub values: Matrix,
    /// The ball this was last projected onto; `None` straight after sampling.
    pub constraint: Option<(NormKind, f64)>,
}

impl Perturbation {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            values: Matrix::zeros(rows, cols),
            constraint: None,
        }
    }

    /// Largest per-example norm under `norm`.
    pub fn max_row_norm(&self, norm: NormKind) -> f64 {
        (0..self.values.rows)
            .map(|i| row_norm(self.values.row(i), norm))
            .fold(0.0, f64::max)
    }
}

pub(crate) fn row_norm(v: &[f64], norm: NormKind) -> f64 {
    match norm {
        NormKind::L2 => norm2(v),
        NormKind::LInf => crate::linalg::norm_inf(v),
    }
}

/// i.i.d. N(0, σ²) entries, not projected.
pub fn sample_init<R: Rng + ?Sized>(sigma: f64, rows: usize, cols: usize, rng: &mut R) -> Perturbation {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            // + 0.0 folds -0.0 into 0.0 when sigma is zero
            sigma * z + 0.0
        })
        .collect();
    Perturbation {
        values: Matrix { rows, cols, data },
        constraint: None,
    }
}

/// Projection of one example onto the ε-ball. Points already inside (or
/// exactly on the boundary) are returned unchanged, which makes the map
/// idempotent bit for bit.
pub fn project(v: &[f64], epsilon: f64, norm: NormKind) -> Vec<f64> {
    match norm {
        NormKind::L2 => {
            let n = norm2(v);
            if n <= epsilon {
                return v.to_vec();
            }
            let s = epsilon / n;
            let mut w: Vec<f64> = v.iter().map(|x| x * s).collect();
            // rescaling may land an ulp outside the ball
            while norm2(&w) > epsilon {
                for x in &mut w {
                    *x *= 1.0 - f64::EPSILON;
                }
            }
            w
        }
        NormKind::LInf => v.iter().map(|x| x.clamp(-epsilon, epsilon)).collect(),
    }
}

/// Jacobian of [`project`] at `v` applied to `u`. The Jacobian is symmetric,
/// so this is also the transposed product used by the reverse sweep.
pub fn project_jvp(v: &[f64], u: &[f64], epsilon: f64, norm: NormKind, mode: ProjMode) -> Vec<f64> {
    if mode == ProjMode::StraightThrough {
        return u.to_vec();
    }
    match norm {
        NormKind::L2 => {
            let n = norm2(v);
            if n <= epsilon {
                return u.to_vec();
            }
            let c = dot(v, u) / (n * n);
            let s = epsilon / n;
            v.iter().zip(u).map(|(vi, ui)| s * (ui - vi * c)).collect()
        }
        NormKind::LInf => v
            .iter()
            .zip(u)
            .map(|(vi, ui)| if vi.abs() > epsilon { 0.0 } else { *ui })
            .collect(),
    }
}

/// [`project`] applied to each `cols`-wide row of a flattened matrix.
pub fn project_rows(values: &[f64], cols: usize, epsilon: f64, norm: NormKind) -> Vec<f64> {
    values
        .chunks(cols)
        .flat_map(|row| project(row, epsilon, norm))
        .collect()
}

/// [`project_jvp`] applied row by row.
pub fn project_jvp_rows(
    values: &[f64],
    u: &[f64],
    cols: usize,
    epsilon: f64,
    norm: NormKind,
    mode: ProjMode,
) -> Vec<f64> {
    values
        .chunks(cols)
        .zip(u.chunks(cols))
        .flat_map(|(v, t)| project_jvp(v, t, epsilon, norm, mode))
        .collect()
}

/// One follower update on a flattened perturbation: returns
/// `(Π(δ + η ∇_δ g), δ + η ∇_δ g)`.
pub(crate) fn ascent_step(
    obj: &dyn InnerObjective,
    params: &[f64],
    delta: &[f64],
    cfg: &AdvConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = obj.grad_delta(params, delta)?;
    let pre: Vec<f64> = delta.iter().zip(&g).map(|(d, gi)| d + cfg.eta * gi).collect();
    let next = project_rows(&pre, obj.cols(), cfg.epsilon, cfg.norm);
    Ok((next, pre))
}

/// One projected-gradient-ascent step of the follower on the regularizer.
/// Returns the new perturbation and the pre-projection point.
pub fn pga_step(
    params: &ModelParams,
    x: &Matrix,
    delta_prev: &Perturbation,
    cfg: &AdvConfig,
    kind: RegularizerKind,
) -> Result<(Perturbation, Matrix)> {
    if !x.same_shape(&delta_prev.values) {
        return Err(crate::error::contract("perturbation shape does not match inputs"));
    }
    let obj = AdvRegObjective::new(params, x, kind, cfg.detach_clean)?;
    let (next, pre) = ascent_step(&obj, &params.values, &delta_prev.values.data, cfg)?;
    Ok((
        Perturbation {
            values: Matrix::new(x.rows, x.cols, next)?,
            constraint: Some((cfg.norm, cfg.epsilon)),
        },
        Matrix::new(x.rows, x.cols, pre)?,
    ))
}
