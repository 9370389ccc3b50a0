//! Recovery conditions, convergence constants and an empirical check of the
//! linear-convergence guarantee for Ada-BlockLISTA.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coherence::{self, GeneralizedCoherenceReport};
use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, C64};
use crate::networks::{self, NetworkParams, Weights};
use crate::types::{BlockDictionary, BlockPartition, BlockSignal, Observation};

/// `σ` with `P(‖w‖2 ≥ σ) ≤ δ` for standard complex normal `w ∈ C^N`.
///
/// `‖w‖²` is half a χ² variable with `2N` degrees of freedom; the
/// Laurent–Massart upper tail gives the closed form
/// `sqrt(N + sqrt(2N ln(1/δ)) + ln(1/δ))`.
pub fn noise_norm_bound(n: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidProbability(delta));
    }
    let l = (1.0 / delta).ln();
    let n = n as f64;
    Ok((n + (2.0 * n * l).sqrt() + l).sqrt())
}

/// Outcome of a sparsity condition. `margin` is the right-hand side minus
/// the left-hand side; it is infinite when the coherence in the denominator
/// vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub satisfied: bool,
    pub margin: f64,
}

fn condition(lhs: f64, mu: f64, nu: f64, p: f64, rhs_scale: f64) -> ConditionCheck {
    if mu == 0.0 {
        return ConditionCheck {
            satisfied: true,
            margin: f64::INFINITY,
        };
    }
    let rhs = rhs_scale * (1.0 / mu + p - (p - 1.0) * nu / mu);
    ConditionCheck {
        satisfied: lhs < rhs,
        margin: rhs - lhs,
    }
}

/// `sP < ½(μ_B^{-1} + P − (P−1)ν_I/μ_B)` on a column-normalized dictionary.
pub fn check_block_yonina(dict: &BlockDictionary, s: usize) -> Result<ConditionCheck> {
    dict.require_normalized()?;
    let p = dict.partition().block_len() as f64;
    let nu = coherence::sub_coherence(dict)?;
    let mu = if dict.partition().num_blocks() < 2 {
        0.0
    } else {
        coherence::block_coherence(dict)?
    };
    Ok(condition(s as f64 * p, mu, nu, p, 0.5))
}

/// `s < (μ̃_B^{-1} + P − (P−1)ν̃_I/μ̃_B) / (2P)`.
pub fn check_adablock_condition(
    report: &GeneralizedCoherenceReport,
    s: usize,
    block_len: usize,
) -> ConditionCheck {
    let p = block_len as f64;
    condition(s as f64, report.mu_tilde, report.nu_tilde, p, 0.5 / p)
}

/// `(P−1)ν̃_I + Pμ̃_B(2s−1)`, the per-layer contraction of the ℓ2,1 error.
pub fn contraction_factor(report: &GeneralizedCoherenceReport, s: usize, block_len: usize) -> f64 {
    let p = block_len as f64;
    (p - 1.0) * report.nu_tilde + p * report.mu_tilde * (2.0 * s as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConstants {
    /// Decay rate: errors shrink at least like `exp(−c1 t)`.
    pub c1: f64,
    /// Noise amplification of the error floor `c2 σ`.
    pub c2: f64,
    pub factor: f64,
}

/// `c1 = −ln(factor)`, `c2 = 2sC_W / (1 − factor)`. A zero factor gives an
/// infinite `c1`.
pub fn convergence_constants(
    report: &GeneralizedCoherenceReport,
    s: usize,
    block_len: usize,
) -> Result<ConvergenceConstants> {
    if s == 0 {
        return Err(Error::Config("convergence constants need s ≥ 1".into()));
    }
    let factor = contraction_factor(report, s, block_len);
    if !(factor < 1.0) {
        return Err(Error::NotContractive(factor));
    }
    let factor = factor.max(0.0);
    Ok(ConvergenceConstants {
        c1: -factor.ln(),
        c2: 2.0 * s as f64 * report.c_w / (1.0 - factor),
        factor,
    })
}

/// Thresholds `θ^(0..T)` and the error recursion `e^(0..=T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub thresholds: Vec<f64>,
    pub error_bounds: Vec<f64>,
}

/// Starts from the worst case `e^(0) = sζ` over the admissible set (with
/// `x^(0) = 0`) and unrolls
/// `θ^(t) = Pμ̃_B e^(t) + C_W σ`,
/// `e^(t+1) = factor · e^(t) + 2sC_W σ`.
pub fn theorem_threshold_schedule(
    report: &GeneralizedCoherenceReport,
    s: usize,
    block_len: usize,
    zeta: f64,
    sigma: f64,
    layers: usize,
) -> Result<ThresholdSchedule> {
    let check = check_adablock_condition(report, s, block_len);
    if !check.satisfied {
        return Err(Error::ConditionViolated {
            margin: check.margin,
        });
    }
    let p = block_len as f64;
    let sf = s as f64;
    let factor = contraction_factor(report, s, block_len).max(0.0);
    let mut e = sf * zeta;
    let mut thresholds = Vec::with_capacity(layers);
    let mut error_bounds = Vec::with_capacity(layers + 1);
    error_bounds.push(e);
    for _ in 0..layers {
        thresholds.push(p * report.mu_tilde * e + report.c_w * sigma);
        e = factor * e + 2.0 * sf * report.c_w * sigma;
        error_bounds.push(e);
    }
    Ok(ThresholdSchedule {
        thresholds,
        error_bounds,
    })
}

/// Everything the guarantee depends on for one dictionary and sparsity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryContext {
    pub zeta: f64,
    pub s: usize,
    pub delta: f64,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub report: GeneralizedCoherenceReport,
}

impl TheoryContext {
    /// `sigma_w` scales the standard-normal bound so `σ` bounds `‖σ_w w‖2`.
    pub fn new(
        report: GeneralizedCoherenceReport,
        s: usize,
        block_len: usize,
        zeta: f64,
        measurements: usize,
        sigma_w: f64,
        delta: f64,
    ) -> Result<Self> {
        let sigma = sigma_w * noise_norm_bound(measurements, delta)?;
        let check = check_adablock_condition(&report, s, block_len);
        if !check.satisfied {
            return Err(Error::ConditionViolated {
                margin: check.margin,
            });
        }
        let (c1, c2) = if s == 0 {
            (f64::INFINITY, 0.0)
        } else {
            let k = convergence_constants(&report, s, block_len)?;
            (k.c1, k.c2)
        };
        Ok(Self {
            zeta,
            s,
            delta,
            sigma,
            c1,
            c2,
            report,
        })
    }

    /// `sζ exp(−c1 t) + c2 σ`.
    pub fn error_bound(&self, t: usize) -> f64 {
        let decay = if t == 0 { 1.0 } else { (-self.c1 * t as f64).exp() };
        self.s as f64 * self.zeta * decay + self.c2 * self.sigma
    }
}

/// Dictionary with orthonormal columns inside each block and small
/// cross-block coherence: identity-like columns perturbed by
/// `perturbation`-scaled Gaussian noise, then Gram–Schmidt per block.
pub fn orthogonalized_block_dictionary(
    measurements: usize,
    num_blocks: usize,
    block_len: usize,
    perturbation: f64,
    seed: u64,
) -> Result<BlockDictionary> {
    let partition = BlockPartition::new(num_blocks, block_len)?;
    if measurements < block_len {
        return Err(Error::Config(format!(
            "need at least {block_len} measurements for orthonormal blocks"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = CMatrix::random_normal(measurements, partition.total_len(), &mut rng);
    let mut m = CMatrix::from_fn(measurements, partition.total_len(), |i, j| {
        let base = if i == j % measurements { 1.0 } else { 0.0 };
        C64::new(base, 0.0) + noise[(i, j)] * perturbation
    });
    for q in 0..num_blocks {
        let start = q * block_len;
        for k in 0..block_len {
            let mut col = m.column(start + k).to_vec();
            for prev in 0..k {
                let basis = m.column(start + prev).to_vec();
                let proj = linalg::dot_h(&basis, &col);
                col.iter_mut().zip(&basis).for_each(|(c, b)| *c -= b * proj);
            }
            let n = linalg::norm2(&col);
            if n == 0.0 {
                return Err(Error::Config("degenerate block during orthogonalization".into()));
            }
            m.column_mut(start + k)
                .iter_mut()
                .zip(col)
                .for_each(|(dst, c)| *dst = c / n);
        }
    }
    BlockDictionary::new(m, partition)?.normalize_columns()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub s: usize,
    pub zeta: f64,
    pub sigma_w: f64,
    pub delta: f64,
    pub layers: usize,
    pub trials: usize,
    pub seed: u64,
    /// Multiplies every scheduled threshold; 1 runs the schedule as derived.
    pub threshold_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            s: 2,
            zeta: 1.0,
            sigma_w: 0.0,
            delta: 0.01,
            layers: 20,
            trials: 100,
            seed: 0,
            threshold_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub s: usize,
    pub block_len: usize,
    pub zeta: f64,
    pub sigma_w: f64,
    pub delta: f64,
    /// Bound on `‖ε‖2` holding with probability `1 − δ`.
    pub sigma: f64,
    pub coherences: GeneralizedCoherenceReport,
    pub condition_margin: f64,
    pub c1: f64,
    pub c2: f64,
    pub thresholds: Vec<f64>,
    pub error_recursion: Vec<f64>,
    pub trials: usize,
    /// Fraction of trials with `Supp(x^(t)) ⊆ Supp(x*)` at every layer.
    pub containment_rate: f64,
    /// Max over trials and layers of `‖x^(t) − x*‖2,1 / (sζ e^{−c1 t} + c2 σ)`.
    pub max_bound_ratio: f64,
    /// Max over trials of `‖x^(t) − x*‖2,1`, for `t = 0..=T`.
    pub max_error_per_layer: Vec<f64>,
    /// Trials whose noise norm exceeded `σ`.
    pub noise_exceedances: usize,
    /// Least-squares slope and R² of `ln(max_error_per_layer)` against `t`,
    /// over the positive entries.
    pub log_error_slope: Option<f64>,
    pub log_error_r2: Option<f64>,
}

/// Slope and coefficient of determination of an ordinary least-squares fit.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, r2))
}

/// Draws a point of `X(ζ, s)`: `s` random blocks, each a random direction
/// with norm uniform in `(ζ/2, ζ]`.
fn admissible_signal(partition: BlockPartition, s: usize, zeta: f64, rng: &mut impl Rng) -> BlockSignal {
    let mut x = BlockSignal::zeros(partition);
    let picks = rand::seq::index::sample(rng, partition.num_blocks(), s).into_vec();
    for q in picks {
        let v = linalg::random_complex_normal(partition.block_len(), rng);
        let n = linalg::norm2(&v);
        let target = zeta * (0.5 + 0.5 * (1.0 - rng.random::<f64>()));
        let block = x.block_mut(q).expect("sampled block is in range");
        block
            .iter_mut()
            .zip(v)
            .for_each(|(b, vi)| *b = vi * (target / n));
    }
    x
}

/// Ada-BlockLISTA with `W_q = I`, `γ = 1` on a normalized dictionary (so
/// `diag(A_q^H Φ_q) = 1`) and the derived threshold schedule, run on random
/// admissible signals.
pub fn verify_theorem(dict: &BlockDictionary, cfg: &VerifyConfig) -> Result<TheoremReport> {
    dict.require_normalized()?;
    let part = dict.partition();
    if cfg.s > part.num_blocks() {
        return Err(Error::SparsityExceedsBlocks {
            s: cfg.s,
            num_blocks: part.num_blocks(),
        });
    }
    if cfg.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let n = dict.rows();
    let p = part.block_len();
    let identity = NetworkParams::new(
        part,
        n,
        vec![1.0],
        vec![1.0],
        Weights::AdaBlockLista {
            blocks: vec![CMatrix::identity(n); part.num_blocks()],
        },
    )?;
    let report = coherence::generalized_coherences(dict, &identity)?;
    let ctx = TheoryContext::new(report, cfg.s, p, cfg.zeta, n, cfg.sigma_w, cfg.delta)?;
    let margin = check_adablock_condition(&report, cfg.s, p).margin;
    let schedule = theorem_threshold_schedule(&report, cfg.s, p, cfg.zeta, ctx.sigma, cfg.layers)?;

    if cfg.s == 0 {
        return Ok(TheoremReport {
            s: 0,
            block_len: p,
            zeta: cfg.zeta,
            sigma_w: cfg.sigma_w,
            delta: cfg.delta,
            sigma: ctx.sigma,
            coherences: report,
            condition_margin: margin,
            c1: ctx.c1,
            c2: ctx.c2,
            thresholds: schedule.thresholds,
            error_recursion: schedule.error_bounds,
            trials: cfg.trials,
            containment_rate: 1.0,
            max_bound_ratio: 0.0,
            max_error_per_layer: vec![0.0; cfg.layers + 1],
            noise_exceedances: 0,
            log_error_slope: None,
            log_error_r2: None,
        });
    }

    let thetas: Vec<f64> = schedule
        .thresholds
        .iter()
        .map(|t| (t * cfg.threshold_scale).max(f64::MIN_POSITIVE))
        .collect();
    let params = NetworkParams::new(
        part,
        n,
        thetas,
        vec![1.0; cfg.layers],
        Weights::AdaBlockLista {
            blocks: vec![CMatrix::identity(n); part.num_blocks()],
        },
    )?;

    struct Trial {
        contained: bool,
        errors: Vec<f64>,
        ratio: f64,
        exceeded: bool,
    }
    let outcomes: Vec<Trial> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<Trial> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(trial as u64);
            let x_true = admissible_signal(part, cfg.s, cfg.zeta, &mut rng);
            let mut y = dict.apply(x_true.as_slice())?;
            let mut exceeded = false;
            if cfg.sigma_w > 0.0 {
                let w = linalg::random_complex_normal(n, &mut rng);
                exceeded = cfg.sigma_w * linalg::norm2(&w) > ctx.sigma;
                y.iter_mut().zip(w).for_each(|(yi, wi)| *yi += wi * cfg.sigma_w);
            }
            let obs = Observation::new(y, cfg.sigma_w);
            let support = x_true.block_support();
            let mut x = BlockSignal::zeros(part);
            let mut errors = vec![x_true.mixed_norm_21()];
            let mut ratio = errors[0] / ctx.error_bound(0);
            let mut contained = true;
            for t in 0..cfg.layers {
                x = networks::ada_blocklista_layer(&x, &obs, dict, &params, t)?;
                contained &= x.block_support().is_subset(&support);
                let diff = BlockSignal::from_vec(linalg::sub(x.as_slice(), x_true.as_slice()), part)?;
                let e = diff.mixed_norm_21();
                let bound = ctx.error_bound(t + 1);
                ratio = ratio.max(if bound > 0.0 { e / bound } else if e == 0.0 { 0.0 } else { f64::INFINITY });
                errors.push(e);
            }
            Ok(Trial {
                contained,
                errors,
                ratio,
                exceeded,
            })
        })
        .collect::<Result<_>>()?;

    let mut max_error = vec![0.0f64; cfg.layers + 1];
    for o in &outcomes {
        for (m, e) in max_error.iter_mut().zip(&o.errors) {
            *m = m.max(*e);
        }
    }
    let (ts, logs): (Vec<f64>, Vec<f64>) = max_error
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > 0.0)
        .map(|(t, e)| (t as f64, e.ln()))
        .unzip();
    let fit = linear_fit(&ts, &logs);
    Ok(TheoremReport {
        s: cfg.s,
        block_len: p,
        zeta: cfg.zeta,
        sigma_w: cfg.sigma_w,
        delta: cfg.delta,
        sigma: ctx.sigma,
        coherences: report,
        condition_margin: margin,
        c1: ctx.c1,
        c2: ctx.c2,
        thresholds: schedule.thresholds,
        error_recursion: schedule.error_bounds,
        trials: cfg.trials,
        containment_rate: outcomes.iter().filter(|o| o.contained).count() as f64 / cfg.trials as f64,
        max_bound_ratio: outcomes.iter().map(|o| o.ratio).fold(0.0, f64::max),
        max_error_per_layer: max_error,
        noise_exceedances: outcomes.iter().filter(|o| o.exceeded).count(),
        log_error_slope: fit.map(|f| f.0),
        log_error_r2: fit.map(|f| f.1),
    })
}
