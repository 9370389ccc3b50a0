//! Unfolded networks: LISTA, AdaLISTA (dual and single weight) and
//! Ada-BlockLISTA.
//!
//! Every layer is a linear pre-activation `z = f(x, y)` followed by a
//! shrinkage. The forward pass can record a [`LayerTape`] per layer so the
//! adjoint pass in [`crate::training`] reuses exactly the same arithmetic.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, C64};
use crate::ops::{self, ShrinkageKind};
use crate::solvers::SolveTrace;
use crate::training::nmse;
use crate::types::{BlockDictionary, BlockPartition, BlockSignal, Observation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Lista,
    AdaLista,
    AdaListaSingle,
    AdaBlockLista,
}

impl NetworkKind {
    pub fn shrinkage(self) -> ShrinkageKind {
        match self {
            NetworkKind::AdaBlockLista => ShrinkageKind::BlockSoft,
            _ => ShrinkageKind::ElementSoft,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::Lista => "lista",
            NetworkKind::AdaLista => "adalista",
            NetworkKind::AdaListaSingle => "adalista_single",
            NetworkKind::AdaBlockLista => "ada_blocklista",
        }
    }

    fn tag(self) -> u8 {
        match self {
            NetworkKind::Lista => 0,
            NetworkKind::AdaLista => 1,
            NetworkKind::AdaListaSingle => 2,
            NetworkKind::AdaBlockLista => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => NetworkKind::Lista,
            1 => NetworkKind::AdaLista,
            2 => NetworkKind::AdaListaSingle,
            3 => NetworkKind::AdaBlockLista,
            other => return Err(Error::Format(format!("unknown network kind tag {other}"))),
        })
    }
}

impl std::str::FromStr for NetworkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lista" => Ok(NetworkKind::Lista),
            "adalista" => Ok(NetworkKind::AdaLista),
            "adalista_single" => Ok(NetworkKind::AdaListaSingle),
            "ada_blocklista" | "adablocklista" => Ok(NetworkKind::AdaBlockLista),
            other => Err(Error::Config(format!("unknown network kind `{other}`"))),
        }
    }
}

/// Layer-shared weight matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    /// Filter matrix `W_e` (M×N) and mutual inhibition matrix `W_g` (M×M).
    Lista { w_e: CMatrix, w_g: CMatrix },
    /// `W_1`, `W_2`, both N×N.
    AdaLista { w1: CMatrix, w2: CMatrix },
    /// `W_2` (N×N).
    AdaListaSingle { w2: CMatrix },
    /// One N×N matrix per block.
    AdaBlockLista { blocks: Vec<CMatrix> },
}

impl Weights {
    pub fn kind(&self) -> NetworkKind {
        match self {
            Weights::Lista { .. } => NetworkKind::Lista,
            Weights::AdaLista { .. } => NetworkKind::AdaLista,
            Weights::AdaListaSingle { .. } => NetworkKind::AdaListaSingle,
            Weights::AdaBlockLista { .. } => NetworkKind::AdaBlockLista,
        }
    }

    pub fn matrices(&self) -> Vec<&CMatrix> {
        match self {
            Weights::Lista { w_e, w_g } => vec![w_e, w_g],
            Weights::AdaLista { w1, w2 } => vec![w1, w2],
            Weights::AdaListaSingle { w2 } => vec![w2],
            Weights::AdaBlockLista { blocks } => blocks.iter().collect(),
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut CMatrix> {
        match self {
            Weights::Lista { w_e, w_g } => vec![w_e, w_g],
            Weights::AdaLista { w1, w2 } => vec![w1, w2],
            Weights::AdaListaSingle { w2 } => vec![w2],
            Weights::AdaBlockLista { blocks } => blocks.iter_mut().collect(),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Weights {
        let z = |m: &CMatrix| CMatrix::zeros(m.rows(), m.cols());
        match self {
            Weights::Lista { w_e, w_g } => Weights::Lista {
                w_e: z(w_e),
                w_g: z(w_g),
            },
            Weights::AdaLista { w1, w2 } => Weights::AdaLista {
                w1: z(w1),
                w2: z(w2),
            },
            Weights::AdaListaSingle { w2 } => Weights::AdaListaSingle { w2: z(w2) },
            Weights::AdaBlockLista { blocks } => Weights::AdaBlockLista {
                blocks: blocks.iter().map(z).collect(),
            },
        }
    }
}

/// Learned parameters of a `T`-layer network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub partition: BlockPartition,
    /// N, the observation length.
    pub measurements: usize,
    /// Per-layer thresholds θ^(t).
    pub thetas: Vec<f64>,
    /// Per-layer step sizes γ^(t); empty for LISTA.
    pub gammas: Vec<f64>,
    pub weights: Weights,
}

impl NetworkParams {
    pub fn new(
        partition: BlockPartition,
        measurements: usize,
        thetas: Vec<f64>,
        gammas: Vec<f64>,
        weights: Weights,
    ) -> Result<Self> {
        let p = Self {
            partition,
            measurements,
            thetas,
            gammas,
            weights,
        };
        p.validate()?;
        Ok(p)
    }

    /// Identity weights, `γ^(t) = 1/L` and a constant threshold, which makes
    /// every kind reproduce its classic iteration at initialization. LISTA
    /// starts at `W_e = Φ^H/L`, `W_g = I − Φ^HΦ/L`.
    pub fn init_from_dictionary(
        kind: NetworkKind,
        dict: &BlockDictionary,
        layers: usize,
        theta: f64,
    ) -> Result<Self> {
        let lip = ops::lipschitz_constant(dict)?;
        let n = dict.rows();
        let m = dict.cols();
        let inv_l = C64::new(1.0 / lip, 0.0);
        let weights = match kind {
            NetworkKind::Lista => {
                let w_e = dict.matrix().adjoint().scale(inv_l);
                let w_g = CMatrix::identity(m).sub(&dict.gram().scale(inv_l));
                Weights::Lista { w_e, w_g }
            }
            NetworkKind::AdaLista => Weights::AdaLista {
                w1: CMatrix::identity(n),
                w2: CMatrix::identity(n),
            },
            NetworkKind::AdaListaSingle => Weights::AdaListaSingle {
                w2: CMatrix::identity(n),
            },
            NetworkKind::AdaBlockLista => Weights::AdaBlockLista {
                blocks: vec![CMatrix::identity(n); dict.partition().num_blocks()],
            },
        };
        let gammas = if kind == NetworkKind::Lista {
            Vec::new()
        } else {
            vec![1.0 / lip; layers]
        };
        Self::new(dict.partition(), n, vec![theta; layers], gammas, weights)
    }

    pub fn kind(&self) -> NetworkKind {
        self.weights.kind()
    }

    /// T
    pub fn layers(&self) -> usize {
        self.thetas.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.thetas.len();
        if let Some(bad) = self.thetas.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidNetwork(format!(
                "thresholds must be positive, found {bad}"
            )));
        }
        let expect_gammas = if self.kind() == NetworkKind::Lista { 0 } else { t };
        if self.gammas.len() != expect_gammas {
            return Err(Error::InvalidNetwork(format!(
                "expected {expect_gammas} step sizes, found {}",
                self.gammas.len()
            )));
        }
        if self.gammas.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidNetwork("non-finite step size".into()));
        }
        let n = self.measurements;
        let m = self.partition.total_len();
        let check = |w: &CMatrix, rows: usize, cols: usize, name: &str| -> Result<()> {
            if w.rows() != rows || w.cols() != cols {
                return Err(Error::InvalidNetwork(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    w.rows(),
                    w.cols()
                )));
            }
            Ok(())
        };
        match &self.weights {
            Weights::Lista { w_e, w_g } => {
                check(w_e, m, n, "W_e")?;
                check(w_g, m, m, "W_g")?;
            }
            Weights::AdaLista { w1, w2 } => {
                check(w1, n, n, "W_1")?;
                check(w2, n, n, "W_2")?;
            }
            Weights::AdaListaSingle { w2 } => check(w2, n, n, "W_2")?,
            Weights::AdaBlockLista { blocks } => {
                if blocks.len() != self.partition.num_blocks() {
                    return Err(Error::InvalidNetwork(format!(
                        "expected {} block weights, found {}",
                        self.partition.num_blocks(),
                        blocks.len()
                    )));
                }
                for w in blocks {
                    check(w, n, n, "W_q")?;
                }
            }
        }
        Ok(())
    }

    fn check_layer(&self, t: usize) -> Result<()> {
        if t < self.layers() {
            Ok(())
        } else {
            Err(Error::LayerOutOfRange {
                layer: t,
                layers: self.layers(),
            })
        }
    }

    fn check_inputs(
        &self,
        x: &BlockSignal,
        y: &Observation,
        dict: Option<&BlockDictionary>,
    ) -> Result<()> {
        if x.partition() != self.partition {
            return Err(Error::DimensionMismatch {
                what: "signal length",
                expected: self.partition.total_len(),
                found: x.len(),
            });
        }
        if y.len() != self.measurements {
            return Err(Error::DimensionMismatch {
                what: "observation length",
                expected: self.measurements,
                found: y.len(),
            });
        }
        if let Some(d) = dict {
            if d.partition() != self.partition || d.rows() != self.measurements {
                return Err(Error::DimensionMismatch {
                    what: "dictionary columns",
                    expected: self.partition.total_len(),
                    found: d.cols(),
                });
            }
        }
        Ok(())
    }
}

/// Intermediate values of one layer, kept for the adjoint pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape {
    pub x_in: Vec<C64>,
    /// Pre-shrinkage values.
    pub z: Vec<C64>,
    /// LISTA: unused. AdaLISTA (dual): `Φx`. Single / block: residual `y − Φx`.
    pub v1: Vec<C64>,
    /// AdaLISTA (dual): `W_1 Φ x`. Single: `W_2^H r`. Others: unused.
    pub v2: Vec<C64>,
    /// Ada-BlockLISTA: `W_q^H r` per block, concatenated (Q·N).
    pub per_block: Vec<C64>,
}

/// Pre-activation of layer `t`, optionally forcing the single-weight AdaLISTA
/// form (which uses `W_2` of either AdaLISTA variant).
pub(crate) fn pre_activation(
    params: &NetworkParams,
    t: usize,
    x: &BlockSignal,
    y: &Observation,
    dict: Option<&BlockDictionary>,
    force_single: bool,
) -> Result<LayerTape> {
    params.check_layer(t)?;
    params.check_inputs(x, y, dict)?;
    let need_dict = || {
        dict.ok_or_else(|| Error::InvalidNetwork("this network kind needs the dictionary".into()))
    };
    let xs = x.as_slice();
    let mut tape = LayerTape {
        x_in: xs.to_vec(),
        z: Vec::new(),
        v1: Vec::new(),
        v2: Vec::new(),
        per_block: Vec::new(),
    };
    match &params.weights {
        Weights::Lista { w_e, w_g } => {
            let a = w_e.mul_vec(&y.y);
            let b = w_g.mul_vec(xs);
            tape.z = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        }
        Weights::AdaLista { w2, .. } | Weights::AdaListaSingle { w2 } if force_single || params.kind() == NetworkKind::AdaListaSingle => {
            let dict = need_dict()?;
            let gamma = params.gammas[t];
            let r = linalg::sub(&y.y, &dict.apply(xs)?);
            let b = w2.adjoint_mul_vec(&r);
            let g = dict.apply_adjoint(&b)?;
            tape.z = xs.iter().zip(&g).map(|(xi, gi)| xi + gi * gamma).collect();
            tape.v1 = r;
            tape.v2 = b;
        }
        Weights::AdaLista { w1, w2 } => {
            let dict = need_dict()?;
            let gamma = params.gammas[t];
            let phi_x = dict.apply(xs)?;
            let w1_phi_x = w1.mul_vec(&phi_x);
            // γ Φ^H (W_2^H y − W_1^H W_1 Φ x) + x
            let inner: Vec<C64> = w2
                .adjoint_mul_vec(&y.y)
                .iter()
                .zip(w1.adjoint_mul_vec(&w1_phi_x))
                .map(|(a, b)| a - b)
                .collect();
            let g = dict.apply_adjoint(&inner)?;
            tape.z = xs.iter().zip(&g).map(|(xi, gi)| xi + gi * gamma).collect();
            tape.v1 = phi_x;
            tape.v2 = w1_phi_x;
        }
        Weights::AdaListaSingle { .. } => unreachable!("single weights always take the single form"),
        Weights::AdaBlockLista { blocks } => {
            let dict = need_dict()?;
            let gamma = params.gammas[t];
            let part = params.partition;
            let n = params.measurements;
            // One forward product per layer; all blocks share this residual.
            let r = linalg::sub(&y.y, &dict.apply(xs)?);
            let mut z = xs.to_vec();
            let mut per_block = Vec::with_capacity(part.num_blocks() * n);
            for (q, w) in blocks.iter().enumerate() {
                let b = w.adjoint_mul_vec(&r);
                let g = dict.block_adjoint(q, &b);
                for (zi, gi) in z[part.range(q)].iter_mut().zip(&g) {
                    *zi += gi * gamma;
                }
                per_block.extend_from_slice(&b);
            }
            tape.z = z;
            tape.v1 = r;
            tape.per_block = per_block;
        }
    }
    Ok(tape)
}

fn shrink(params: &NetworkParams, t: usize, z: &[C64]) -> BlockSignal {
    let mut out = BlockSignal::from_vec(z.to_vec(), params.partition)
        .expect("pre-activation has the partition length");
    params.kind().shrinkage().apply_in_place(&mut out, params.thetas[t]);
    out
}

/// `η_{θ^(t)}(W_e y + W_g x)`.
pub fn lista_layer(
    x: &BlockSignal,
    y: &Observation,
    params: &NetworkParams,
    t: usize,
) -> Result<BlockSignal> {
    if params.kind() != NetworkKind::Lista {
        return Err(Error::InvalidNetwork("lista_layer needs LISTA weights".into()));
    }
    let tape = pre_activation(params, t, x, y, None, false)?;
    Ok(shrink(params, t, &tape.z))
}

/// Dual form `η(γΦ^H W_2^H y + (I − γΦ^H W_1^H W_1 Φ) x)` or, with
/// `single_weight`, `η(x + γΦ^H W_2^H (y − Φx))`. The single form accepts
/// either AdaLISTA weight set and uses its `W_2`.
pub fn adalista_layer(
    x: &BlockSignal,
    y: &Observation,
    dict: &BlockDictionary,
    params: &NetworkParams,
    t: usize,
    single_weight: bool,
) -> Result<BlockSignal> {
    match (params.kind(), single_weight) {
        (NetworkKind::AdaLista, _) | (NetworkKind::AdaListaSingle, true) => {}
        (NetworkKind::AdaListaSingle, false) => {
            return Err(Error::InvalidNetwork(
                "dual-weight AdaLISTA layer needs W_1".into(),
            ))
        }
        _ => {
            return Err(Error::InvalidNetwork(
                "adalista_layer needs AdaLISTA weights".into(),
            ))
        }
    }
    let tape = pre_activation(params, t, x, y, Some(dict), single_weight)?;
    let mut out = BlockSignal::from_vec(tape.z, params.partition)?;
    ShrinkageKind::ElementSoft.apply_in_place(&mut out, params.thetas[t]);
    Ok(out)
}

/// `r = y − Φx` once, then per block `z_q = x_q + γΦ_q^H W_q^H r` and
/// `x_q ← z_q (1 − θ/‖z_q‖)_+`.
pub fn ada_blocklista_layer(
    x: &BlockSignal,
    y: &Observation,
    dict: &BlockDictionary,
    params: &NetworkParams,
    t: usize,
) -> Result<BlockSignal> {
    if params.kind() != NetworkKind::AdaBlockLista {
        return Err(Error::InvalidNetwork(
            "ada_blocklista_layer needs per-block weights".into(),
        ));
    }
    let tape = pre_activation(params, t, x, y, Some(dict), false)?;
    Ok(shrink(params, t, &tape.z))
}

/// Applies layer `t` of whatever kind `params` holds.
pub fn apply_layer(
    x: &BlockSignal,
    y: &Observation,
    dict: &BlockDictionary,
    params: &NetworkParams,
    t: usize,
) -> Result<BlockSignal> {
    let tape = pre_activation(params, t, x, y, Some(dict), false)?;
    Ok(shrink(params, t, &tape.z))
}

/// Forward pass that keeps every layer's tape, returning `x^(1..=T)`.
pub(crate) fn forward_with_tapes(
    params: &NetworkParams,
    y: &Observation,
    dict: &BlockDictionary,
) -> Result<(Vec<BlockSignal>, Vec<LayerTape>)> {
    let mut x = BlockSignal::zeros(params.partition);
    let mut outs = Vec::with_capacity(params.layers());
    let mut tapes = Vec::with_capacity(params.layers());
    for t in 0..params.layers() {
        let tape = pre_activation(params, t, &x, y, Some(dict), false)?;
        x = shrink(params, t, &tape.z);
        tapes.push(tape);
        outs.push(x.clone());
    }
    Ok((outs, tapes))
}

/// Pre-shrinkage vectors `z^(t)` of every layer on the path from `x^(0) = 0`.
pub fn pre_activations(
    params: &NetworkParams,
    y: &Observation,
    dict: &BlockDictionary,
) -> Result<Vec<Vec<C64>>> {
    params.validate()?;
    let (_, tapes) = forward_with_tapes(params, y, dict)?;
    Ok(tapes.into_iter().map(|t| t.z).collect())
}

/// Runs all `T` layers from `x^(0) = 0`. When `x_true` is supplied the trace
/// holds the NMSE after every layer.
pub fn infer(
    params: &NetworkParams,
    y: &Observation,
    dict: &BlockDictionary,
    x_true: Option<&BlockSignal>,
) -> Result<(BlockSignal, SolveTrace)> {
    params.validate()?;
    let mut x = BlockSignal::zeros(params.partition);
    let mut trace = SolveTrace::default();
    for t in 0..params.layers() {
        x = apply_layer(&x, y, dict, params, t)?;
        if let Some(truth) = x_true {
            trace.per_iter_nmse.push(nmse(&x, truth)?);
        }
        trace.iterations_run += 1;
    }
    Ok((x, trace))
}

const MAGIC: &[u8; 4] = b"ABLN";
const FORMAT_VERSION: u32 = 1;

impl NetworkParams {
    /// Binary checkpoint, all integers and floats little-endian:
    ///
    /// ```text
    /// magic "ABLN" | version u32 | kind u8 | T u32 | P u32 | Q u32 | N u32
    /// weight matrices, each row-major as interleaved (re f64, im f64):
    ///   LISTA: W_e (M×N), W_g (M×M)   AdaLISTA: W_1, W_2   single: W_2
    ///   Ada-BlockLISTA: W_1 .. W_Q
    /// θ^(0..T) f64 | γ^(0..T) f64 (absent for LISTA)
    /// ```
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.kind().tag()])?;
        for v in [
            self.layers(),
            self.partition.block_len(),
            self.partition.num_blocks(),
            self.measurements,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for m in self.weights.matrices() {
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    let c = m[(i, j)];
                    w.write_all(&c.re.to_le_bytes())?;
                    w.write_all(&c.im.to_le_bytes())?;
                }
            }
        }
        for v in self.thetas.iter().chain(&self.gammas) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let kind = NetworkKind::from_tag(tag[0])?;
        let t = read_u32(&mut r)? as usize;
        let p = read_u32(&mut r)? as usize;
        let q = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let partition = BlockPartition::new(q, p)?;
        let m = partition.total_len();
        let mut read_matrix = |rows: usize, cols: usize| -> Result<CMatrix> {
            let mut mat = CMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let re = read_f64(&mut r)?;
                    let im = read_f64(&mut r)?;
                    mat[(i, j)] = C64::new(re, im);
                }
            }
            Ok(mat)
        };
        let weights = match kind {
            NetworkKind::Lista => {
                let w_e = read_matrix(m, n)?;
                let w_g = read_matrix(m, m)?;
                Weights::Lista { w_e, w_g }
            }
            NetworkKind::AdaLista => {
                let w1 = read_matrix(n, n)?;
                let w2 = read_matrix(n, n)?;
                Weights::AdaLista { w1, w2 }
            }
            NetworkKind::AdaListaSingle => Weights::AdaListaSingle {
                w2: read_matrix(n, n)?,
            },
            NetworkKind::AdaBlockLista => Weights::AdaBlockLista {
                blocks: (0..q).map(|_| read_matrix(n, n)).collect::<Result<_>>()?,
            },
        };
        let thetas = (0..t).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let n_gammas = if kind == NetworkKind::Lista { 0 } else { t };
        let gammas = (0..n_gammas)
            .map(|_| read_f64(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        NetworkParams::new(partition, n, thetas, gammas, weights)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: NetworkParams = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
