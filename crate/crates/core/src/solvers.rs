//! ISTA for the ℓ1 problem and Block-ISTA for the ℓ2,1 problem.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64};
use crate::ops::{self, ShrinkageKind};
use crate::training::nmse;
use crate::types::{BlockDictionary, BlockSignal, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Ista,
    BlockIsta,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Ista => "ista",
            SolverKind::BlockIsta => "block_ista",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ista" => Ok(SolverKind::Ista),
            "block_ista" | "blockista" => Ok(SolverKind::BlockIsta),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeConfig {
    /// Regularization weight λ.
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once `‖x^(t+1) − x^(t)‖2 ≤ tol`.
    pub tol: f64,
    pub record_trajectory: bool,
    /// Block-ISTA threshold; `λ/L` when unset.
    pub block_threshold: Option<f64>,
}

impl IterativeConfig {
    pub fn new(lambda: f64, max_iters: usize) -> Self {
        Self {
            lambda,
            max_iters,
            tol: 0.0,
            record_trajectory: false,
            block_threshold: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "regularization must be positive, got {}",
                self.lambda
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration record of a solve or an inference pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub iterates: Option<Vec<BlockSignal>>,
    /// NMSE after each iteration (empty without ground truth).
    pub per_iter_nmse: Vec<f64>,
    /// Regularized objective after each iteration (iterative solvers only).
    pub per_iter_objective: Vec<f64>,
    pub iterations_run: usize,
}

fn check_lipschitz(l: f64) -> Result<()> {
    if l > 0.0 && l.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveLipschitz(l))
    }
}

fn gradient_step(
    x: &BlockSignal,
    y: &Observation,
    dict: &BlockDictionary,
    lipschitz: f64,
) -> Result<BlockSignal> {
    let r = ops::residual(y, dict, x)?;
    let g = dict.apply_adjoint(&r)?;
    let step = 1.0 / lipschitz;
    let z: Vec<C64> = x
        .as_slice()
        .iter()
        .zip(&g)
        .map(|(xi, gi)| xi + gi * step)
        .collect();
    BlockSignal::from_vec(z, x.partition())
}

/// `η_{λ/L}(x + Φ^H(y − Φx)/L)`.
pub fn ista_step(
    x: &BlockSignal,
    y: &Observation,
    dict: &BlockDictionary,
    lipschitz: f64,
    lambda: f64,
) -> Result<BlockSignal> {
    check_lipschitz(lipschitz)?;
    let theta = lambda / lipschitz;
    if theta < 0.0 {
        return Err(Error::NegativeThreshold(theta));
    }
    let mut z = gradient_step(x, y, dict, lipschitz)?;
    ShrinkageKind::ElementSoft.apply_in_place(&mut z, theta);
    Ok(z)
}

/// Gradient step on every block from one shared residual, then block
/// shrinkage with threshold `θ`.
pub fn block_ista_step(
    x: &BlockSignal,
    y: &Observation,
    dict: &BlockDictionary,
    lipschitz: f64,
    theta: f64,
) -> Result<BlockSignal> {
    check_lipschitz(lipschitz)?;
    if theta < 0.0 || theta.is_nan() {
        return Err(Error::NegativeThreshold(theta));
    }
    let mut z = gradient_step(x, y, dict, lipschitz)?;
    ShrinkageKind::BlockSoft.apply_in_place(&mut z, theta);
    Ok(z)
}

/// `½‖y − Φx‖² + λ‖x‖_1`.
pub fn l1_objective(y: &Observation, dict: &BlockDictionary, x: &BlockSignal, lambda: f64) -> Result<f64> {
    let r = ops::residual(y, dict, x)?;
    let l1: f64 = x.as_slice().iter().map(|c| c.norm()).sum();
    Ok(0.5 * linalg::norm2_sqr(&r) + lambda * l1)
}

/// `½‖y − Φx‖² + λ‖x‖_{2,1}`.
pub fn l21_objective(y: &Observation, dict: &BlockDictionary, x: &BlockSignal, lambda: f64) -> Result<f64> {
    let r = ops::residual(y, dict, x)?;
    Ok(0.5 * linalg::norm2_sqr(&r) + lambda * x.mixed_norm_21())
}

/// Iterates from `x^(0) = 0` until the displacement drops to `cfg.tol` or
/// `cfg.max_iters` steps have run.
pub fn solve(
    kind: SolverKind,
    y: &Observation,
    dict: &BlockDictionary,
    cfg: &IterativeConfig,
    x_true: Option<&BlockSignal>,
) -> Result<(BlockSignal, SolveTrace)> {
    let lipschitz = ops::lipschitz_constant(dict)?;
    solve_with_lipschitz(kind, y, dict, cfg, lipschitz, x_true)
}

/// [`solve`] with a precomputed Lipschitz constant.
pub fn solve_with_lipschitz(
    kind: SolverKind,
    y: &Observation,
    dict: &BlockDictionary,
    cfg: &IterativeConfig,
    lipschitz: f64,
    x_true: Option<&BlockSignal>,
) -> Result<(BlockSignal, SolveTrace)> {
    cfg.validate()?;
    y.check_against(dict)?;
    check_lipschitz(lipschitz)?;
    let theta = cfg.block_threshold.unwrap_or(cfg.lambda / lipschitz);
    let mut x = BlockSignal::zeros(dict.partition());
    let mut trace = SolveTrace {
        iterates: cfg.record_trajectory.then(Vec::new),
        ..SolveTrace::default()
    };
    for _ in 0..cfg.max_iters {
        let next = match kind {
            SolverKind::Ista => ista_step(&x, y, dict, lipschitz, cfg.lambda)?,
            SolverKind::BlockIsta => block_ista_step(&x, y, dict, lipschitz, theta)?,
        };
        let displacement = linalg::norm2(&linalg::sub(next.as_slice(), x.as_slice()));
        x = next;
        trace.iterations_run += 1;
        let objective = match kind {
            SolverKind::Ista => l1_objective(y, dict, &x, cfg.lambda)?,
            SolverKind::BlockIsta => l21_objective(y, dict, &x, cfg.lambda)?,
        };
        trace.per_iter_objective.push(objective);
        if let Some(truth) = x_true {
            trace.per_iter_nmse.push(nmse(&x, truth)?);
        }
        if let Some(it) = trace.iterates.as_mut() {
            it.push(x.clone());
        }
        if displacement <= cfg.tol {
            break;
        }
    }
    Ok((x, trace))
}
