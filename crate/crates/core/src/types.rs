//! Block-partitioned signals and dictionaries.
//!
//! A signal of length `M = Q * P` is split into `Q` contiguous blocks of
//! length `P`; the dictionary shares the same column partition. Block indices
//! are 0-based in the API and 1-based in anything printed for a user.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, C64, ZERO};

/// `Q` blocks of `P` elements each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockPartition {
    num_blocks: usize,
    block_len: usize,
}

impl BlockPartition {
    pub fn new(num_blocks: usize, block_len: usize) -> Result<Self> {
        if num_blocks == 0 || block_len == 0 {
            return Err(Error::InvalidPartition {
                num_blocks,
                block_len,
            });
        }
        Ok(Self {
            num_blocks,
            block_len,
        })
    }

    /// Q
    #[inline]
    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    /// P
    #[inline]
    pub fn block_len(&self) -> usize {
        self.block_len
    }

    /// M = Q * P
    #[inline]
    pub fn total_len(&self) -> usize {
        self.num_blocks * self.block_len
    }

    #[inline]
    pub fn range(&self, q: usize) -> Range<usize> {
        q * self.block_len..(q + 1) * self.block_len
    }

    pub fn check_block(&self, q: usize) -> Result<()> {
        if q < self.num_blocks {
            Ok(())
        } else {
            Err(Error::BlockOutOfRange {
                index: q + 1,
                num_blocks: self.num_blocks,
            })
        }
    }
}

/// Complex signal with a block partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSignal {
    data: Vec<C64>,
    partition: BlockPartition,
}

impl BlockSignal {
    pub fn zeros(partition: BlockPartition) -> Self {
        Self {
            data: vec![ZERO; partition.total_len()],
            partition,
        }
    }

    pub fn from_vec(data: Vec<C64>, partition: BlockPartition) -> Result<Self> {
        if data.len() != partition.total_len() {
            return Err(Error::DimensionMismatch {
                what: "block signal length",
                expected: partition.total_len(),
                found: data.len(),
            });
        }
        Ok(Self { data, partition })
    }

    pub fn partition(&self) -> BlockPartition {
        self.partition
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The `q`-th block (0-based).
    pub fn block(&self, q: usize) -> Result<&[C64]> {
        self.partition.check_block(q)?;
        Ok(&self.data[self.partition.range(q)])
    }

    /// Mutable view of the `q`-th block; writes land in the flat storage.
    pub fn block_mut(&mut self, q: usize) -> Result<&mut [C64]> {
        self.partition.check_block(q)?;
        let r = self.partition.range(q);
        Ok(&mut self.data[r])
    }

    pub fn blocks(&self) -> std::slice::Chunks<'_, C64> {
        self.data.chunks(self.partition.block_len)
    }

    pub fn blocks_mut(&mut self) -> std::slice::ChunksMut<'_, C64> {
        self.data.chunks_mut(self.partition.block_len)
    }

    pub fn block_norm(&self, q: usize) -> Result<f64> {
        Ok(linalg::norm2(self.block(q)?))
    }

    pub fn block_norms(&self) -> Vec<f64> {
        self.blocks().map(linalg::norm2).collect()
    }

    pub fn norm2(&self) -> f64 {
        linalg::norm2(&self.data)
    }

    /// Sum of block ℓ2 norms.
    pub fn mixed_norm_21(&self) -> f64 {
        self.blocks().map(linalg::norm2).sum()
    }

    /// Number of blocks that are not exactly zero.
    pub fn mixed_norm_20(&self) -> usize {
        self.block_support().len()
    }

    /// Indices of blocks with nonzero ℓ2 norm (exact test).
    pub fn block_support(&self) -> BTreeSet<usize> {
        self.blocks()
            .enumerate()
            .filter(|(_, b)| b.iter().any(|c| *c != ZERO))
            .map(|(q, _)| q)
            .collect()
    }

    /// Blocks whose ℓ2 norm exceeds `tol`, for outputs that are not produced
    /// by a shrinkage operator.
    pub fn block_support_above(&self, tol: f64) -> BTreeSet<usize> {
        self.blocks()
            .enumerate()
            .filter(|(_, b)| linalg::norm2(b) > tol)
            .map(|(q, _)| q)
            .collect()
    }

    /// Indices of the `k` blocks with the largest ℓ2 norm. Ties go to the
    /// lower index.
    pub fn top_k_blocks(&self, k: usize) -> BTreeSet<usize> {
        let norms = self.block_norms();
        let mut idx: Vec<usize> = (0..norms.len()).collect();
        idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
        idx.into_iter().take(k).collect()
    }
}

thread_local! {
    static MATVECS: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward products `Φ x` evaluated on this thread since the last
/// [`reset_matvec_count`].
pub fn matvec_count() -> u64 {
    MATVECS.with(|c| c.get())
}

pub fn reset_matvec_count() {
    MATVECS.with(|c| c.set(0));
}

/// Complex `N × M` dictionary with the signal's block partition on its columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDictionary {
    matrix: CMatrix,
    partition: BlockPartition,
    normalized: bool,
    /// Original column norms; entry `j` maps a coefficient on the normalized
    /// column back to the raw one (`x_raw = x_normalized / scale`).
    column_scales: Vec<f64>,
}

impl BlockDictionary {
    pub fn new(matrix: CMatrix, partition: BlockPartition) -> Result<Self> {
        if matrix.cols() != partition.total_len() {
            return Err(Error::DimensionMismatch {
                what: "dictionary columns",
                expected: partition.total_len(),
                found: matrix.cols(),
            });
        }
        let cols = matrix.cols();
        Ok(Self {
            matrix,
            partition,
            normalized: false,
            column_scales: vec![1.0; cols],
        })
    }

    /// Divides every column by its ℓ2 norm and records the norms.
    pub fn normalize_columns(mut self) -> Result<Self> {
        for j in 0..self.matrix.cols() {
            let n = linalg::norm2(self.matrix.column(j));
            if n == 0.0 {
                return Err(Error::NotNormalized {
                    column: j,
                    norm: 0.0,
                });
            }
            self.matrix.column_mut(j).iter_mut().for_each(|c| *c /= n);
            self.column_scales[j] *= n;
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn partition(&self) -> BlockPartition {
        self.partition
    }

    /// N
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    /// M
    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn column_scales(&self) -> &[f64] {
        &self.column_scales
    }

    /// Errors unless every column has unit norm within `1e-12`.
    pub fn require_normalized(&self) -> Result<()> {
        for j in 0..self.cols() {
            let n = linalg::norm2(self.matrix.column(j));
            if (n - 1.0).abs() > 1e-12 {
                return Err(Error::NotNormalized { column: j, norm: n });
            }
        }
        Ok(())
    }

    /// Sub-matrix `Φ_q`.
    pub fn block(&self, q: usize) -> Result<CMatrix> {
        self.partition.check_block(q)?;
        let p = self.partition.block_len();
        Ok(self.matrix.columns(q * p, p))
    }

    pub fn column(&self, j: usize) -> &[C64] {
        self.matrix.column(j)
    }

    /// `Φ x`. Counted by [`matvec_count`].
    pub fn apply(&self, x: &[C64]) -> Result<Vec<C64>> {
        if x.len() != self.cols() {
            return Err(Error::DimensionMismatch {
                what: "signal length",
                expected: self.cols(),
                found: x.len(),
            });
        }
        MATVECS.with(|c| c.set(c.get() + 1));
        Ok(self.matrix.mul_vec(x))
    }

    /// `Φ^H r`.
    pub fn apply_adjoint(&self, r: &[C64]) -> Result<Vec<C64>> {
        if r.len() != self.rows() {
            return Err(Error::DimensionMismatch {
                what: "observation length",
                expected: self.rows(),
                found: r.len(),
            });
        }
        Ok(self.matrix.adjoint_mul_vec(r))
    }

    /// `Φ_q^H r` without materializing the sub-matrix.
    pub fn block_adjoint(&self, q: usize, r: &[C64]) -> Vec<C64> {
        self.partition
            .range(q)
            .map(|j| linalg::dot_h(self.matrix.column(j), r))
            .collect()
    }

    /// `Φ_q v` for a length-P vector.
    pub fn block_apply(&self, q: usize, v: &[C64]) -> Vec<C64> {
        let mut out = vec![ZERO; self.rows()];
        for (j, vj) in self.partition.range(q).zip(v) {
            for (o, a) in out.iter_mut().zip(self.matrix.column(j)) {
                *o += a * vj;
            }
        }
        out
    }

    /// Gram matrix `Φ^H Φ`.
    pub fn gram(&self) -> CMatrix {
        self.matrix.adjoint_matmul(&self.matrix)
    }

    /// Permutes whole blocks: block `q` of the result is block `perm[q]` here.
    pub fn permute_blocks(&self, perm: &[usize]) -> Result<Self> {
        let p = self.partition.block_len();
        if perm.len() != self.partition.num_blocks() {
            return Err(Error::DimensionMismatch {
                what: "block permutation",
                expected: self.partition.num_blocks(),
                found: perm.len(),
            });
        }
        let matrix = CMatrix::from_fn(self.rows(), self.cols(), |i, j| {
            self.matrix[(i, perm[j / p] * p + j % p)]
        });
        let column_scales = (0..self.cols())
            .map(|j| self.column_scales[perm[j / p] * p + j % p])
            .collect();
        Ok(Self {
            matrix,
            partition: self.partition,
            normalized: self.normalized,
            column_scales,
        })
    }
}

/// Noisy measurements `y = Φ x* + ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: Vec<C64>,
    pub noise_sigma_w: f64,
}

impl Observation {
    pub fn new(y: Vec<C64>, noise_sigma_w: f64) -> Self {
        Self { y, noise_sigma_w }
    }

    pub fn noiseless(y: Vec<C64>) -> Self {
        Self::new(y, 0.0)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn check_against(&self, dict: &BlockDictionary) -> Result<()> {
        if self.y.len() != dict.rows() {
            return Err(Error::DimensionMismatch {
                what: "observation length",
                expected: dict.rows(),
                found: self.y.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn sig(v: &[f64], p: usize) -> BlockSignal {
        let part = BlockPartition::new(v.len() / p, p).unwrap();
        BlockSignal::from_vec(v.iter().map(|&x| c(x)).collect(), part).unwrap()
    }

    #[test]
    fn partition_rejects_zero() {
        assert!(BlockPartition::new(0, 2).is_err());
        assert!(BlockPartition::new(2, 0).is_err());
        let p = BlockPartition::new(3, 4).unwrap();
        assert_eq!(p.total_len(), 12);
        assert_eq!(p.range(2), 8..12);
    }

    #[test]
    fn block_view_layout() {
        let x = sig(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(x.block(0).unwrap(), &[c(1.0), c(2.0)]);
        assert_eq!(x.block(1).unwrap(), &[c(3.0), c(4.0)]);
        let z = sig(&[0.0; 6], 3);
        assert_eq!(z.block(1).unwrap(), &[ZERO; 3]);
    }

    #[test]
    fn block_view_out_of_range() {
        let x = sig(&[1.0, 2.0, 3.0, 4.0], 2);
        match x.block(2) {
            Err(Error::BlockOutOfRange { index, num_blocks }) => {
                assert_eq!((index, num_blocks), (3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn block_view_aliases_flat_storage() {
        let mut x = sig(&[1.0, 2.0, 3.0, 4.0], 2);
        x.block_mut(1).unwrap()[0] = c(9.0);
        assert_eq!(x.as_slice()[2], c(9.0));
        x.as_mut_slice()[1] = c(-1.0);
        assert_eq!(x.block(0).unwrap()[1], c(-1.0));
    }

    #[test]
    fn mixed_norm_examples() {
        assert_eq!(sig(&[3.0, 4.0, 0.0, 0.0], 2).mixed_norm_21(), 5.0);
        assert_eq!(sig(&[0.0; 4], 2).mixed_norm_21(), 0.0);
        assert_eq!(sig(&[1.0, 0.0, 0.0, 1.0], 2).mixed_norm_21(), 2.0);
    }

    #[test]
    fn support_examples() {
        assert_eq!(
            sig(&[0.0, 0.0, 1.0, 1.0], 2).block_support(),
            BTreeSet::from([1])
        );
        assert!(sig(&[0.0; 4], 2).block_support().is_empty());
        assert_eq!(
            sig(&[1e-300, 0.0, 0.0, 0.0], 2).block_support(),
            BTreeSet::from([0])
        );
        assert!(sig(&[1e-300, 0.0, 0.0, 0.0], 2)
            .block_support_above(1e-12)
            .is_empty());
    }

    #[test]
    fn top_k_breaks_ties_low() {
        let x = sig(&[1.0, 0.0, 0.0, 1.0, 2.0, 0.0], 2);
        assert_eq!(x.top_k_blocks(2), BTreeSet::from([0, 2]));
    }

    #[test]
    fn dictionary_normalization_records_scales() {
        let m = CMatrix::from_fn(2, 2, |i, j| c((i + 2 * j + 1) as f64));
        let d = BlockDictionary::new(m, BlockPartition::new(1, 2).unwrap())
            .unwrap()
            .normalize_columns()
            .unwrap();
        d.require_normalized().unwrap();
        assert!((d.column_scales()[0] - 5f64.sqrt()).abs() < 1e-15);
        assert!((d.column_scales()[1] - 25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn matvec_counter_counts_forward_products() {
        let d = BlockDictionary::new(CMatrix::identity(2), BlockPartition::new(2, 1).unwrap())
            .unwrap();
        reset_matvec_count();
        d.apply(&[ZERO, ZERO]).unwrap();
        d.apply_adjoint(&[ZERO, ZERO]).unwrap();
        assert_eq!(matvec_count(), 1);
    }

    proptest! {
        #[test]
        fn norm_equivalence(
            q in 1usize..6, p in 1usize..5,
            vals in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 30)
        ) {
            let part = BlockPartition::new(q, p).unwrap();
            let data: Vec<C64> = vals.iter().cycle().take(q * p).map(|&(a, b)| C64::new(a, b)).collect();
            let x = BlockSignal::from_vec(data, part).unwrap();
            let l2 = x.norm2();
            let l21 = x.mixed_norm_21();
            prop_assert!(l2 <= l21 + 1e-12);
            prop_assert!(l21 <= (q as f64).sqrt() * l2 + 1e-12);
            prop_assert_eq!(x.mixed_norm_20(), x.block_support().len());
        }
    }
}
