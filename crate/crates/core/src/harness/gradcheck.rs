//! Random small instances for checking the Stackelberg gradient against
//! finite differences and the forward Jacobian oracle.
//!
//! Instances whose follower trajectory passes within 1e-3 (relative) of the
//! projection boundary are rejected and redrawn, since F is not
//! differentiable there. The number of redraws is reported.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffmodel::{Batch, Matrix, ModelParams, Targets};
use crate::error::{Error, Result};
use crate::linalg::rel_err;
use crate::perturb::{sample_init, AdvConfig, NormKind, Perturbation, ProjMode};
use crate::regularizers::{AdvRegObjective, RegularizerKind};
use crate::salt::{
    interaction_adjoint_with, jacobian_forward_oracle, leader_objective, stackelberg_gradient_from, unroll_from,
    HvpSource, InnerObjective, UnrollTape,
};

/// Relative distance to the projection boundary below which a trajectory
/// counts as touching the kink.
pub const KINK_MARGIN: f64 = 1e-3;

const MAX_REDRAWS: usize = 1000;

#[derive(Clone, Debug)]
pub struct Instance {
    pub params: ModelParams,
    pub batch: Batch,
    pub cfg: AdvConfig,
    pub kind: RegularizerKind,
    pub delta0: Perturbation,
    pub redraws: usize,
}

fn near_kink(tape: &UnrollTape, cfg: &AdvConfig) -> bool {
    let eps = cfg.epsilon;
    tape.pre_projections.iter().any(|z| {
        z.chunks(tape.cols).any(|row| match cfg.norm {
            NormKind::L2 => (crate::linalg::norm2(row) - eps).abs() <= KINK_MARGIN * eps,
            NormKind::LInf => row.iter().any(|v| (v.abs() - eps).abs() <= KINK_MARGIN * eps),
        })
    })
}

fn draw(rng: &mut ChaCha8Rng, k: usize) -> Result<Instance> {
    let d = rng.gen_range(2..=4);
    let hidden = rng.gen_range(3..=6);
    let regression = rng.gen_bool(0.25);
    let outputs = if regression { 1 } else { rng.gen_range(2..=3) };
    let n = rng.gen_range(3..=5);
    let params = ModelParams::init(&[d, hidden, outputs], rng)?;
    let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let targets = if regression {
        Targets::Values((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    } else {
        Targets::Labels {
            classes: outputs,
            labels: (0..n).map(|_| rng.gen_range(0..outputs)).collect(),
        }
    };
    let batch = Batch::new(Matrix::new(n, d, x)?, targets)?;
    let cfg = AdvConfig {
        alpha: rng.gen_range(0.5..2.0),
        epsilon: rng.gen_range(0.2..1.5),
        eta: rng.gen_range(0.2..1.0),
        sigma: rng.gen_range(0.1..0.5),
        k_steps: k,
        norm: if rng.gen_bool(0.5) { NormKind::L2 } else { NormKind::LInf },
        proj_mode: ProjMode::ExactJacobian,
        ..AdvConfig::default()
    };
    let kind = RegularizerKind::for_head(params.head());
    let delta0 = sample_init(cfg.sigma, n, d, rng);
    Ok(Instance {
        params,
        batch,
        cfg,
        kind,
        delta0,
        redraws: 0,
    })
}

/// Deterministic instance for `seed` with K = `k`: MLP of at most 51
/// parameters, 2 to 4 input features, 3 to 5 examples.
pub fn random_instance(seed: u64, k: usize) -> Result<Instance> {
    for attempt in 0..MAX_REDRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let mut inst = draw(&mut rng, k)?;
        let obj = AdvRegObjective::new(&inst.params, &inst.batch.inputs, inst.kind, false)?;
        let tape = unroll_from(&inst.params.values, &obj, &inst.cfg, inst.delta0.values.data.clone())?;
        if !near_kink(&tape, &inst.cfg) {
            inst.redraws = attempt;
            return Ok(inst);
        }
    }
    Err(Error::Refused(format!("seed {seed}: every draw touched the projection boundary")))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub seed: u64,
    pub k: usize,
    pub norm: String,
    pub params: usize,
    pub redraws: usize,
    /// Stackelberg total vs central differences of F.
    pub total_rel_err: f64,
    /// Leader part alone vs the same differences.
    pub leader_only_rel_err: f64,
    /// Reverse sweep with exact second derivatives vs vᵀJ from the oracle.
    pub adjoint_exact_rel_err: f64,
    /// Reverse sweep with finite-difference HVPs vs vᵀJ.
    pub adjoint_fd_rel_err: f64,
    /// Largest |stackelberg(K=0) − vat_gradient(δ⁰)| for this instance.
    pub k_zero_max_abs_diff: f64,
}

/// Central differences of F over θ with step `h`.
pub fn leader_objective_fd(inst: &Instance, h: f64) -> Result<Vec<f64>> {
    let mut v = inst.params.values.clone();
    let mut out = vec![0.0; v.len()];
    for j in 0..v.len() {
        let o = v[j];
        v[j] = o + h;
        let fp = leader_objective(&inst.params.with_values(v.clone())?, &inst.batch, &inst.cfg, inst.kind, &inst.delta0)?;
        v[j] = o - h;
        let fm = leader_objective(&inst.params.with_values(v.clone())?, &inst.batch, &inst.cfg, inst.kind, &inst.delta0)?;
        v[j] = o;
        out[j] = (fp - fm) / (2.0 * h);
    }
    Ok(out)
}

pub fn check_instance(seed: u64, inst: &Instance) -> Result<CheckReport> {
    let p = &inst.params;
    let g = stackelberg_gradient_from(p, &inst.batch, &inst.cfg, inst.kind, &inst.delta0)?.grad;
    let fd = leader_objective_fd(inst, 1e-5)?;

    let obj = AdvRegObjective::new(p, &inst.batch.inputs, inst.kind, inst.cfg.detach_clean)?;
    let tape = unroll_from(&p.values, &obj, &inst.cfg, inst.delta0.values.data.clone())?;
    let jac = jacobian_forward_oracle(&tape, &p.values, &obj, &inst.cfg)?;
    let s = obj.leader_scale();
    let v: Vec<f64> = obj.grad_delta(&p.values, tape.last())?.iter().map(|x| s * x).collect();
    let mut vj = vec![0.0; jac.cols];
    for (i, vi) in v.iter().enumerate() {
        crate::linalg::axpy(*vi, jac.row(i), &mut vj);
    }
    let per_alpha = |src| -> Result<Vec<f64>> {
        let r = interaction_adjoint_with(&tape, &p.values, &obj, &inst.cfg, src)?;
        Ok(r.grad.iter().map(|x| x / inst.cfg.alpha).collect())
    };
    let exact = per_alpha(HvpSource::Exact)?;
    let approx = per_alpha(HvpSource::FiniteDifference)?;

    let k0 = AdvConfig {
        k_steps: 0,
        ..inst.cfg.clone()
    };
    let s0 = stackelberg_gradient_from(p, &inst.batch, &k0, inst.kind, &inst.delta0)?.grad.total;
    let v0 = crate::vat::vat_gradient(p, &inst.batch, &inst.delta0, &k0, inst.kind)?;
    let k_zero_max_abs_diff = s0.iter().zip(&v0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    Ok(CheckReport {
        seed,
        k: inst.cfg.k_steps,
        norm: inst.cfg.norm.to_string(),
        params: p.len(),
        redraws: inst.redraws,
        total_rel_err: rel_err(&g.total, &fd),
        leader_only_rel_err: rel_err(&g.leader_part, &fd),
        adjoint_exact_rel_err: rel_err(&exact, &vj),
        adjoint_fd_rel_err: rel_err(&approx, &vj),
        k_zero_max_abs_diff,
    })
}

/// Runs `instances` checks starting at `seed`. With `k = None`, K cycles
/// through 1, 2, 3.
pub fn run_gradcheck(k: Option<usize>, seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    (0..instances)
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let kk = k.unwrap_or(1 + i % 3);
            check_instance(s, &random_instance(s, kk)?)
        })
        .collect()
}
