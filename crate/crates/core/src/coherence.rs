//! Mutual, sub- and block-coherence of a dictionary, and their learned-weight
//! generalizations used by the convergence analysis.
//!
//! The generalized quantities are evaluated on the operator each layer
//! actually applies, `A_q = γ W_q Φ_q` with `z_q = x_q + A_q^H r`. So the
//! cross-Gram blocks are `γ Φ_q^H W_q^H Φ_j`. With `W_q = I` and `γ = 1`
//! they reduce to the plain dictionary coherences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix};
use crate::networks::{NetworkParams, Weights};
use crate::types::BlockDictionary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    /// μ(Φ, Φ)
    pub mutual: f64,
    /// ν_I, 0 when blocks have a single column.
    pub sub_coherence: f64,
    /// μ_B
    pub block_coherence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedCoherenceReport {
    pub nu_tilde: f64,
    pub mu_tilde: f64,
    pub c_w: f64,
    pub layers_considered: usize,
}

/// How the matrix ℓ2,1 norm inside `C_W` sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixL21 {
    /// Sum of column ℓ2 norms.
    #[default]
    Columns,
    /// Sum of row ℓ2 norms.
    Rows,
}

/// `max_{i≠j} |a_i^H b_j|` for matrices with `a_i^H b_i = 1`.
pub fn mutual_coherence(a: &CMatrix, b: &CMatrix) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            what: "coherence operand shape",
            expected: a.rows() * a.cols(),
            found: b.rows() * b.cols(),
        });
    }
    for i in 0..a.cols() {
        let d = linalg::dot_h(a.column(i), b.column(i));
        if (d - linalg::ONE).norm() > 1e-8 {
            return Err(Error::NormalizationViolated {
                column: i,
                value: d.norm(),
            });
        }
    }
    let m = a.cols();
    Ok((0..m)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .filter(|&j| j != i)
                .map(|j| linalg::dot_h(a.column(i), b.column(j)).norm())
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max))
}

/// Largest off-diagonal magnitude inside the diagonal blocks of `Φ^H Φ`.
pub fn sub_coherence(dict: &BlockDictionary) -> Result<f64> {
    dict.require_normalized()?;
    let part = dict.partition();
    Ok((0..part.num_blocks())
        .into_par_iter()
        .map(|q| {
            let mut best = 0.0f64;
            for i in part.range(q) {
                for j in part.range(q) {
                    if i != j {
                        best = best.max(linalg::dot_h(dict.column(i), dict.column(j)).norm());
                    }
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max))
}

/// `max_{q≠q'} ‖Φ_q^H Φ_q'‖_s / P`.
pub fn block_coherence(dict: &BlockDictionary) -> Result<f64> {
    dict.require_normalized()?;
    let part = dict.partition();
    if part.num_blocks() < 2 {
        return Err(Error::TooFewBlocks {
            required: 2,
            found: part.num_blocks(),
        });
    }
    let blocks: Vec<CMatrix> = (0..part.num_blocks())
        .map(|q| dict.block(q))
        .collect::<Result<_>>()?;
    let p = part.block_len() as f64;
    Ok(max_cross_block_norm(&blocks, &blocks) / p)
}

/// `max_{i≠j} ‖left_i^H right_j‖_s`. The norm of `X^H Y` equals that of
/// `Y^H X`, so only one of each unordered pair is evaluated when `left` and
/// `right` coincide.
fn max_cross_block_norm(left: &[CMatrix], right: &[CMatrix]) -> f64 {
    let same = std::ptr::eq(left, right);
    let q = left.len();
    (0..q)
        .into_par_iter()
        .map(|i| {
            let start = if same { i + 1 } else { 0 };
            (start..q)
                .filter(|&j| j != i)
                .map(|j| left[i].adjoint_matmul(&right[j]).spectral_norm())
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

pub fn coherence_report(dict: &BlockDictionary) -> Result<CoherenceReport> {
    let m = dict.matrix();
    Ok(CoherenceReport {
        mutual: mutual_coherence(m, m)?,
        sub_coherence: sub_coherence(dict)?,
        block_coherence: block_coherence(dict)?,
    })
}

/// Per-block weight matrices implied by a network: `W_q` for Ada-BlockLISTA,
/// the shared `W_2` for the AdaLISTA variants.
fn block_weights(params: &NetworkParams) -> Result<Vec<&CMatrix>> {
    let q = params.partition.num_blocks();
    match &params.weights {
        Weights::AdaBlockLista { blocks } => Ok(blocks.iter().collect()),
        Weights::AdaLista { w2, .. } | Weights::AdaListaSingle { w2 } => Ok(vec![w2; q]),
        Weights::Lista { .. } => Err(Error::InvalidNetwork(
            "generalized coherences need dictionary-embedded weights".into(),
        )),
    }
}

/// ν̃_I, μ̃_B and C_W over the network's layers, with column-sum ℓ2,1.
pub fn generalized_coherences(
    dict: &BlockDictionary,
    params: &NetworkParams,
) -> Result<GeneralizedCoherenceReport> {
    generalized_coherences_with(dict, params, MatrixL21::Columns)
}

pub fn generalized_coherences_with(
    dict: &BlockDictionary,
    params: &NetworkParams,
    l21: MatrixL21,
) -> Result<GeneralizedCoherenceReport> {
    if params.gammas.is_empty() {
        return Err(Error::EmptyLayerSet);
    }
    if dict.partition() != params.partition || dict.rows() != params.measurements {
        return Err(Error::DimensionMismatch {
            what: "dictionary columns",
            expected: params.partition.total_len(),
            found: dict.cols(),
        });
    }
    let part = dict.partition();
    let weights = block_weights(params)?;
    // γ enters every quantity as a common scalar factor.
    let gamma = params.gammas.iter().fold(0.0f64, |a, g| a.max(g.abs()));

    let phis: Vec<CMatrix> = (0..part.num_blocks())
        .map(|q| dict.block(q))
        .collect::<Result<_>>()?;
    // A_q = W_q Φ_q (N×P)
    let effective: Vec<CMatrix> = weights
        .par_iter()
        .zip(phis.par_iter())
        .map(|(w, phi)| w.matmul(phi))
        .collect();

    let nu = effective
        .par_iter()
        .zip(phis.par_iter())
        .map(|(a, phi)| {
            let g = a.adjoint_matmul(phi);
            let mut best = 0.0f64;
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    if i != j {
                        best = best.max(g[(i, j)].norm());
                    }
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max);

    let mu = if part.num_blocks() < 2 {
        0.0
    } else {
        max_cross_block_norm(&effective, &phis) / part.block_len() as f64
    };

    // ‖Φ_q^H W_q^H‖_{2,1} = ‖A_q^H‖_{2,1}: the columns of A_q^H are the
    // conjugated rows of A_q, and its rows are the columns of A_q.
    let c_w = effective
        .par_iter()
        .map(|a| match l21 {
            MatrixL21::Columns => (0..a.rows())
                .map(|i| (0..a.cols()).map(|j| a[(i, j)].norm_sqr()).sum::<f64>().sqrt())
                .sum::<f64>(),
            MatrixL21::Rows => (0..a.cols()).map(|j| linalg::norm2(a.column(j))).sum::<f64>(),
        })
        .reduce(|| 0.0, f64::max);

    Ok(GeneralizedCoherenceReport {
        nu_tilde: gamma * nu,
        mu_tilde: gamma * mu,
        c_w: gamma * c_w,
        layers_considered: params.gammas.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;
    use crate::types::BlockPartition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_dict(seed: u64, n: usize, q: usize, p: usize) -> BlockDictionary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BlockDictionary::new(
            CMatrix::random_normal(n, q * p, &mut rng),
            BlockPartition::new(q, p).unwrap(),
        )
        .unwrap()
        .normalize_columns()
        .unwrap()
    }

    fn dense_spectral_norm(m: &CMatrix) -> f64 {
        let d = nalgebra::DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)]);
        d.svd(false, false).singular_values.max()
    }

    #[test]
    fn identity_has_zero_coherence() {
        let i = CMatrix::identity(4);
        assert_eq!(mutual_coherence(&i, &i).unwrap(), 0.0);
        let padded = CMatrix::from_fn(3, 2, |r, c| if r == c { linalg::ONE } else { linalg::ZERO });
        assert_eq!(mutual_coherence(&padded, &padded).unwrap(), 0.0);
        let d = BlockDictionary::new(i, BlockPartition::new(2, 2).unwrap())
            .unwrap()
            .normalize_columns()
            .unwrap();
        assert_eq!(sub_coherence(&d).unwrap(), 0.0);
        assert_eq!(block_coherence(&d).unwrap(), 0.0);
    }

    #[test]
    fn mutual_coherence_matches_double_loop() {
        let d = random_dict(1, 6, 4, 2);
        let m = d.matrix();
        let mut best = 0.0f64;
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    let mut s = C64::new(0.0, 0.0);
                    for r in 0..6 {
                        s += m[(r, i)].conj() * m[(r, j)];
                    }
                    best = best.max(s.norm());
                }
            }
        }
        assert_eq!(mutual_coherence(m, m).unwrap(), best);
    }

    #[test]
    fn mutual_coherence_checks_normalization() {
        let m = CMatrix::identity(3).scale(C64::new(2.0, 0.0));
        assert!(matches!(
            mutual_coherence(&m, &m),
            Err(Error::NormalizationViolated { .. })
        ));
    }

    #[test]
    fn sub_coherence_matches_pair_scan() {
        let d = random_dict(2, 8, 4, 3);
        let m = d.matrix();
        let mut best = 0.0f64;
        for q in 0..4 {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        let s = linalg::dot_h(m.column(3 * q + i), m.column(3 * q + j));
                        best = best.max(s.norm());
                    }
                }
            }
        }
        assert!((sub_coherence(&d).unwrap() - best).abs() < 1e-15);
        assert_eq!(sub_coherence(&random_dict(3, 8, 6, 1)).unwrap(), 0.0);
    }

    #[test]
    fn block_coherence_matches_dense_svd() {
        let d = random_dict(4, 8, 4, 3);
        let mut best = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let g = d.block(i).unwrap().adjoint_matmul(&d.block(j).unwrap());
                    best = best.max(dense_spectral_norm(&g) / 3.0);
                }
            }
        }
        let got = block_coherence(&d).unwrap();
        assert!((got - best).abs() <= 1e-8 * best, "{got} vs {best}");
    }

    #[test]
    fn block_coherence_with_unit_blocks_is_mutual_coherence() {
        let d = random_dict(5, 6, 9, 1);
        let mu = mutual_coherence(d.matrix(), d.matrix()).unwrap();
        assert!((block_coherence(&d).unwrap() - mu).abs() < 1e-12);
    }

    #[test]
    fn block_coherence_needs_two_blocks() {
        let d = random_dict(6, 6, 1, 3);
        assert!(matches!(block_coherence(&d), Err(Error::TooFewBlocks { .. })));
    }

    #[test]
    fn coherence_requires_normalized_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = BlockDictionary::new(
            CMatrix::random_normal(4, 4, &mut rng),
            BlockPartition::new(2, 2).unwrap(),
        )
        .unwrap();
        assert!(sub_coherence(&d).is_err());
        assert!(block_coherence(&d).is_err());
    }

    #[test]
    fn coherence_orderings() {
        for seed in 0..10 {
            let d = random_dict(100 + seed, 8, 4, 3);
            let r = coherence_report(&d).unwrap();
            assert!(r.sub_coherence <= r.mutual + 1e-15);
            // P·μ_B bounds every off-diagonal-block Gram entry
            let g = d.gram();
            let mut off = 0.0f64;
            for i in 0..12 {
                for j in 0..12 {
                    if i / 3 != j / 3 {
                        off = off.max(g[(i, j)].norm());
                    }
                }
            }
            assert!(3.0 * r.block_coherence >= off - 1e-12);
        }
    }

    fn block_params(dict: &BlockDictionary, weights: Vec<CMatrix>, gammas: Vec<f64>) -> NetworkParams {
        let t = gammas.len();
        NetworkParams::new(
            dict.partition(),
            dict.rows(),
            vec![0.1; t],
            gammas,
            Weights::AdaBlockLista { blocks: weights },
        )
        .unwrap()
    }

    #[test]
    fn identity_weights_reduce_to_classic_coherences() {
        let d = random_dict(31, 8, 4, 2);
        let params = block_params(&d, vec![CMatrix::identity(8); 4], vec![1.0, 1.0]);
        let g = generalized_coherences(&d, &params).unwrap();
        let c = coherence_report(&d).unwrap();
        assert!((g.nu_tilde - c.sub_coherence).abs() < 1e-12);
        assert!((g.mu_tilde - c.block_coherence).abs() < 1e-9 * c.block_coherence);
        assert_eq!(g.layers_considered, 2);
    }

    #[test]
    fn generalized_coherences_match_brute_force() {
        let d = random_dict(32, 6, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let ws: Vec<CMatrix> = (0..3).map(|_| CMatrix::random_normal(6, 6, &mut rng)).collect();
        let params = block_params(&d, ws.clone(), vec![0.5, -0.8]);
        let g = generalized_coherences(&d, &params).unwrap();
        let gamma = 0.8;
        let (mut nu, mut mu, mut cw) = (0.0f64, 0.0f64, 0.0f64);
        for q in 0..3 {
            let a = ws[q].matmul(&d.block(q).unwrap()).scale(C64::new(gamma, 0.0));
            for i in 0..2 {
                for j in 0..2 {
                    if i != j {
                        let v: C64 = (0..6).map(|k| a[(k, i)].conj() * d.matrix()[(k, q * 2 + j)]).sum();
                        nu = nu.max(v.norm());
                    }
                }
            }
            for r in 0..3 {
                if r != q {
                    let cross = a.adjoint_matmul(&d.block(r).unwrap());
                    mu = mu.max(dense_spectral_norm(&cross) / 2.0);
                }
            }
            let rows: f64 = (0..6)
                .map(|k| (a[(k, 0)].norm_sqr() + a[(k, 1)].norm_sqr()).sqrt())
                .sum();
            cw = cw.max(rows);
        }
        assert!((g.nu_tilde - nu).abs() < 1e-12);
        assert!((g.mu_tilde - mu).abs() < 1e-8 * mu);
        assert!((g.c_w - cw).abs() < 1e-12 * cw);
        let rows = generalized_coherences_with(&d, &params, MatrixL21::Rows).unwrap();
        assert_eq!(rows.nu_tilde, g.nu_tilde);
    }

    #[test]
    fn zero_step_gives_zero_quantities() {
        let d = random_dict(33, 6, 3, 2);
        let params = block_params(&d, vec![CMatrix::identity(6); 3], vec![0.0]);
        let g = generalized_coherences(&d, &params).unwrap();
        assert_eq!((g.nu_tilde, g.mu_tilde, g.c_w), (0.0, 0.0, 0.0));
    }

    #[test]
    fn generalized_coherences_scale_with_step() {
        let d = random_dict(34, 6, 3, 2);
        let one = generalized_coherences(&d, &block_params(&d, vec![CMatrix::identity(6); 3], vec![1.0])).unwrap();
        let three = generalized_coherences(&d, &block_params(&d, vec![CMatrix::identity(6); 3], vec![3.0])).unwrap();
        assert!((three.c_w - 3.0 * one.c_w).abs() < 1e-12);
        assert!((three.nu_tilde - 3.0 * one.nu_tilde).abs() < 1e-12);
    }

    #[test]
    fn lista_and_empty_networks_are_rejected() {
        let d = random_dict(35, 6, 3, 2);
        let lista = NetworkParams::init_from_dictionary(crate::networks::NetworkKind::Lista, &d, 2, 0.1).unwrap();
        assert!(generalized_coherences(&d, &lista).is_err());
        let empty = block_params(&d, vec![CMatrix::identity(6); 3], vec![]);
        assert!(matches!(generalized_coherences(&d, &empty), Err(Error::EmptyLayerSet)));
    }
}
