//! Shrinkage operators, residuals and the Lipschitz constant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64, ZERO};
use crate::types::{BlockDictionary, BlockSignal, Observation};

pub const LIPSCHITZ_SEED: u64 = 0x11_95c4;
pub const LIPSCHITZ_TOL: f64 = 1e-10;
pub const LIPSCHITZ_MAX_ITERS: usize = 10_000;

/// Which proximal map a solver applies after its gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShrinkageKind {
    /// `u / |u| * (|u| - θ)_+` per entry.
    ElementSoft,
    /// `z_q * (1 - θ / ‖z_q‖)_+` per block.
    BlockSoft,
}

impl ShrinkageKind {
    pub fn apply_in_place(self, x: &mut BlockSignal, theta: f64) {
        match self {
            ShrinkageKind::ElementSoft => x
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| shrink_scalar(v, theta)),
            ShrinkageKind::BlockSoft => x.blocks_mut().for_each(|b| {
                shrink_block_in_place(b, theta);
            }),
        }
    }
}

fn check_threshold(theta: f64) -> Result<()> {
    if theta < 0.0 || theta.is_nan() {
        Err(Error::NegativeThreshold(theta))
    } else {
        Ok(())
    }
}

#[inline]
pub(crate) fn shrink_scalar(v: &mut C64, theta: f64) {
    let mag = v.norm();
    if mag <= theta {
        *v = ZERO;
    } else {
        *v *= 1.0 - theta / mag;
    }
}

/// Scales `block` by `(1 - θ/‖block‖)_+` and returns the pre-shrink norm.
/// A block whose norm does not exceed `θ` becomes exactly zero.
#[inline]
pub(crate) fn shrink_block_in_place(block: &mut [C64], theta: f64) -> f64 {
    let n = linalg::norm2(block);
    if n <= theta || n == 0.0 {
        block.iter_mut().for_each(|v| *v = ZERO);
    } else {
        let f = 1.0 - theta / n;
        block.iter_mut().for_each(|v| *v *= f);
    }
    n
}

/// Complex soft threshold: magnitudes shrink by `θ`, phases are kept, and
/// anything with `|u_i| ≤ θ` becomes exactly 0.
pub fn soft_threshold_complex(u: &[C64], theta: f64) -> Result<Vec<C64>> {
    check_threshold(theta)?;
    Ok(u
        .iter()
        .map(|&v| {
            let mut v = v;
            shrink_scalar(&mut v, theta);
            v
        })
        .collect())
}

/// Proximal map of `θ‖·‖_{2,1}`.
pub fn block_soft_threshold(z: &BlockSignal, theta: f64) -> Result<BlockSignal> {
    check_threshold(theta)?;
    let mut out = z.clone();
    out.blocks_mut().for_each(|b| {
        shrink_block_in_place(b, theta);
    });
    Ok(out)
}

/// `r = y - Φ x`.
pub fn residual(y: &Observation, dict: &BlockDictionary, x: &BlockSignal) -> Result<Vec<C64>> {
    y.check_against(dict)?;
    let phi_x = dict.apply(x.as_slice())?;
    Ok(linalg::sub(&y.y, &phi_x))
}

/// `λ_max(Φ^H Φ)` by power iteration with the default seed.
pub fn lipschitz_constant(dict: &BlockDictionary) -> Result<f64> {
    lipschitz_constant_seeded(dict, LIPSCHITZ_SEED)
}

/// Power iteration runs on whichever of `Φ Φ^H` and `Φ^H Φ` is smaller; both
/// share their nonzero spectrum. When that Gram matrix is small, the seeded
/// start vector is first multiplied by a high power `G^(2^k)` (by repeated
/// squaring), which removes the dependence on the eigenvalue gap that stalls
/// plain iteration on nearly flat spectra.
pub fn lipschitz_constant_seeded(dict: &BlockDictionary, seed: u64) -> Result<f64> {
    let m = dict.matrix();
    let small_side = m.rows() <= m.cols();
    let dim = m.rows().min(m.cols());
    let apply = |v: &[C64]| {
        if small_side {
            m.mul_vec(&m.adjoint_mul_vec(v))
        } else {
            m.adjoint_mul_vec(&m.mul_vec(v))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = linalg::random_complex_normal(dim, &mut rng);
    if dim <= SQUARING_MAX_DIM {
        let gram = if small_side {
            m.matmul(&m.adjoint())
        } else {
            m.adjoint_matmul(m)
        };
        let mut power = gram;
        for _ in 0..SQUARINGS {
            let f = power.frobenius_norm();
            if f == 0.0 {
                break;
            }
            power = power.scale(C64::new(1.0 / f, 0.0));
            power = power.matmul(&power);
        }
        let filtered = power.mul_vec(&start);
        if linalg::norm2(&filtered) > 0.0 {
            start = filtered;
        }
    }
    match linalg::hermitian_top_eigenvalue_from(apply, start, LIPSCHITZ_TOL, LIPSCHITZ_MAX_ITERS) {
        Ok(l) if l > 0.0 => Ok(l),
        Ok(l) => Err(Error::NonPositiveLipschitz(l)),
        Err((0, _)) => Err(Error::NonPositiveLipschitz(0.0)),
        Err((iterations, _)) => Err(Error::NotConverged { iterations }),
    }
}

const SQUARING_MAX_DIM: usize = 256;
const SQUARINGS: usize = 24;
