//! Supervised training of the unfolded networks.
//!
//! Gradients are computed by a hand-written adjoint pass that walks the
//! layer tapes recorded by [`crate::networks`] in reverse. Complex weights get
//! the real-loss gradient `∂L/∂Re W + i ∂L/∂Im W` (twice the Wirtinger
//! derivative with respect to the conjugate). For a linear map `z = W x` this
//! makes the weight gradient `g_z x^H` and the input gradient `W^H g_z`.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64, ZERO};
use crate::networks::{self, LayerTape, NetworkKind, NetworkParams, Weights};
use crate::ops::ShrinkageKind;
use crate::types::{BlockDictionary, BlockSignal, Observation};

/// `‖x* − x̂‖2 / ‖x*‖2`.
pub fn nmse(x_hat: &BlockSignal, x_true: &BlockSignal) -> Result<f64> {
    if x_hat.len() != x_true.len() {
        return Err(Error::DimensionMismatch {
            what: "signal length",
            expected: x_true.len(),
            found: x_hat.len(),
        });
    }
    let denom = x_true.norm2();
    if denom == 0.0 {
        return Err(Error::ZeroGroundTruth);
    }
    Ok(linalg::norm2(&linalg::sub(x_true.as_slice(), x_hat.as_slice())) / denom)
}

/// Mean NMSE over paired estimates and ground truths.
pub fn batch_nmse<'a>(
    pairs: impl IntoIterator<Item = (&'a BlockSignal, &'a BlockSignal)>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x_hat, x_true) in pairs {
        sum += nmse(x_hat, x_true)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    Ok(sum / n as f64)
}

/// How nonzero blocks of a synthetic ground truth are filled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientDist {
    /// Every entry of an active block is standard complex normal.
    ComplexNormal,
    /// An active block holds between `min` and `max` standard complex normal
    /// entries at distinct positions, like an extended radar target.
    Scatterers { min: usize, max: usize },
}

impl Default for CoefficientDist {
    fn default() -> Self {
        CoefficientDist::ComplexNormal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Nonzero blocks per sample.
    pub sparsity: usize,
    pub coef_dist: CoefficientDist,
    /// Per-block ℓ2 bound ζ; blocks above it are rescaled onto it.
    pub zeta: Option<f64>,
    pub noise_sigma_w: f64,
    /// Epochs without validation improvement before the learning rate halves.
    pub lr_patience: usize,
    /// Learning-rate multiplier for the weight matrices; 0 freezes them.
    pub weight_lr_scale: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 200,
            n_test: 500,
            lr0: 5e-4,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            sparsity: 1,
            coef_dist: CoefficientDist::ComplexNormal,
            zeta: None,
            noise_sigma_w: 0.0,
            lr_patience: 5,
            weight_lr_scale: 1.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("sample counts must be at least 1".into()));
        }
        if !(self.lr0 >= 0.0) {
            return Err(Error::Config(format!("lr0 must be nonnegative, got {}", self.lr0)));
        }
        if !(self.weight_lr_scale >= 0.0) {
            return Err(Error::Config("weight_lr_scale must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.noise_sigma_w < 0.0 {
            return Err(Error::Config("noise_sigma_w must be nonnegative".into()));
        }
        if let CoefficientDist::Scatterers { min, max } = self.coef_dist {
            if min == 0 || min > max {
                return Err(Error::Config(format!("bad scatterer range {min}..={max}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x_true: BlockSignal,
    pub y: Observation,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub dictionary: BlockDictionary,
    pub config: TrainingConfig,
}

/// One block-sparse ground truth and its observation.
pub fn draw_sample(
    dict: &BlockDictionary,
    sparsity: usize,
    dist: CoefficientDist,
    zeta: Option<f64>,
    sigma_w: f64,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let part = dict.partition();
    if sparsity > part.num_blocks() {
        return Err(Error::SparsityExceedsBlocks {
            s: sparsity,
            num_blocks: part.num_blocks(),
        });
    }
    let p = part.block_len();
    let mut x = BlockSignal::zeros(part);
    let mut blocks = index::sample(rng, part.num_blocks(), sparsity).into_vec();
    blocks.sort_unstable();
    for q in blocks {
        let block = x.block_mut(q)?;
        match dist {
            CoefficientDist::ComplexNormal => {
                block.copy_from_slice(&linalg::random_complex_normal(p, rng));
            }
            CoefficientDist::Scatterers { min, max } => {
                let count = rng.random_range(min.min(p)..=max.min(p));
                let mut cells = index::sample(rng, p, count).into_vec();
                cells.sort_unstable();
                let coefs = linalg::random_complex_normal(count, rng);
                for (c, v) in cells.into_iter().zip(coefs) {
                    block[c] = v;
                }
            }
        }
        if let Some(z) = zeta {
            let n = linalg::norm2(block);
            if n > z {
                block.iter_mut().for_each(|v| *v *= z / n);
            }
        }
    }
    let mut y = dict.apply(x.as_slice())?;
    if sigma_w > 0.0 {
        let w = linalg::random_complex_normal(y.len(), rng);
        y.iter_mut().zip(w).for_each(|(yi, wi)| *yi += wi * sigma_w);
    }
    Ok(Sample {
        x_true: x,
        y: Observation::new(y, sigma_w),
    })
}

/// Draws train, validation and test splits in that order from one seeded
/// stream.
pub fn generate_dataset(dict: &BlockDictionary, cfg: &TrainingConfig) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.sparsity > dict.partition().num_blocks() {
        return Err(Error::SparsityExceedsBlocks {
            s: cfg.sparsity,
            num_blocks: dict.partition().num_blocks(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |n: usize| -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| {
                draw_sample(
                    dict,
                    cfg.sparsity,
                    cfg.coef_dist,
                    cfg.zeta,
                    cfg.noise_sigma_w,
                    &mut rng,
                )
            })
            .collect()
    };
    let train = draw(cfg.n_train)?;
    let val = draw(cfg.n_val)?;
    let test = draw(cfg.n_test)?;
    Ok(Dataset {
        train,
        val,
        test,
        dictionary: dict.clone(),
        config: cfg.clone(),
    })
}

/// Loss gradient in the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// ∂L/∂θ^(t)
    pub thetas: Vec<f64>,
    /// ∂L/∂γ^(t)
    pub gammas: Vec<f64>,
    pub weights: Weights,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            thetas: vec![0.0; params.thetas.len()],
            gammas: vec![0.0; params.gammas.len()],
            weights: params.weights.zeros_like(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        self.thetas.iter_mut().zip(&other.thetas).for_each(|(a, b)| *a += b);
        self.gammas.iter_mut().zip(&other.gammas).for_each(|(a, b)| *a += b);
        for (a, b) in self.weights.matrices_mut().into_iter().zip(other.weights.matrices()) {
            a.as_mut_slice()
                .iter_mut()
                .zip(b.as_slice())
                .for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        self.thetas.iter_mut().for_each(|v| *v *= s);
        self.gammas.iter_mut().for_each(|v| *v *= s);
        for m in self.weights.matrices_mut() {
            m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.thetas.iter().chain(&self.gammas).all(|v| v.is_finite())
            && self
                .weights
                .matrices()
                .iter()
                .all(|m| m.as_slice().iter().all(|c| c.re.is_finite() && c.im.is_finite()))
    }
}

/// Adjoint of `x = z (1 − θ/‖z‖)_+` for one block (or one entry when the
/// block has length one). Returns `∂L/∂θ`; writes the gradient for `z` into
/// `g` in place. Culled blocks take the zero branch.
fn shrink_adjoint(z: &[C64], g: &mut [C64], theta: f64) -> f64 {
    let n = linalg::norm2(z);
    if n <= theta || n == 0.0 {
        g.iter_mut().for_each(|v| *v = ZERO);
        return 0.0;
    }
    let gz = linalg::dot_h(g, z).re;
    let a = 1.0 - theta / n;
    let b = theta * gz / (n * n * n);
    g.iter_mut().zip(z).for_each(|(gi, zi)| *gi = *gi * a + zi * b);
    -gz / n
}

/// Back-propagates `g_out = ∂L/∂x^(t+1)` through layer `t`, accumulating
/// parameter gradients into `grads` and returning `∂L/∂x^(t)`.
pub(crate) fn layer_adjoint(
    params: &NetworkParams,
    dict: &BlockDictionary,
    y: &Observation,
    t: usize,
    tape: &LayerTape,
    g_out: &[C64],
    grads: &mut Gradients,
) -> Result<Vec<C64>> {
    let theta = params.thetas[t];
    let mut g_z = g_out.to_vec();
    match params.kind().shrinkage() {
        ShrinkageKind::ElementSoft => {
            for (zi, gi) in tape.z.iter().zip(g_z.iter_mut()) {
                grads.thetas[t] += shrink_adjoint(std::slice::from_ref(zi), std::slice::from_mut(gi), theta);
            }
        }
        ShrinkageKind::BlockSoft => {
            let p = params.partition.block_len();
            for (zb, gb) in tape.z.chunks(p).zip(g_z.chunks_mut(p)) {
                grads.thetas[t] += shrink_adjoint(zb, gb, theta);
            }
        }
    }

    let g_x = match (&params.weights, &mut grads.weights) {
        (Weights::Lista { w_g, .. }, Weights::Lista { w_e: ge, w_g: gg }) => {
            ge.add_outer(linalg::ONE, &g_z, &y.y);
            gg.add_outer(linalg::ONE, &g_z, &tape.x_in);
            w_g.adjoint_mul_vec(&g_z)
        }
        (Weights::AdaListaSingle { w2 }, Weights::AdaListaSingle { w2: g2 }) => {
            let gamma = params.gammas[t];
            let h = dict.matrix().mul_vec(&g_z);
            grads.gammas[t] += linalg::dot_h(&h, &tape.v2).re;
            let g_b: Vec<C64> = h.iter().map(|v| v * gamma).collect();
            g2.add_outer(linalg::ONE, &tape.v1, &g_b);
            let g_r = w2.mul_vec(&g_b);
            let back = dict.apply_adjoint(&g_r)?;
            g_z.iter().zip(&back).map(|(a, b)| a - b).collect()
        }
        (Weights::AdaLista { w1, w2 }, Weights::AdaLista { w1: g1, w2: g2 }) => {
            let gamma = params.gammas[t];
            let h = dict.matrix().mul_vec(&g_z);
            let inner: Vec<C64> = w2
                .adjoint_mul_vec(&y.y)
                .iter()
                .zip(w1.adjoint_mul_vec(&tape.v2))
                .map(|(a, b)| a - b)
                .collect();
            grads.gammas[t] += linalg::dot_h(&h, &inner).re;
            let g_b: Vec<C64> = h.iter().map(|v| v * gamma).collect();
            // + γ Φ^H W_2^H y
            g2.add_outer(linalg::ONE, &y.y, &g_b);
            // − γ Φ^H W_1^H (W_1 Φ x)
            let g_s: Vec<C64> = g_b.iter().map(|v| -v).collect();
            g1.add_outer(linalg::ONE, &tape.v2, &g_s);
            let g_q = w1.mul_vec(&g_s);
            g1.add_outer(linalg::ONE, &g_q, &tape.v1);
            let g_p = w1.adjoint_mul_vec(&g_q);
            let back = dict.apply_adjoint(&g_p)?;
            g_z.iter().zip(&back).map(|(a, b)| a + b).collect()
        }
        (Weights::AdaBlockLista { blocks }, Weights::AdaBlockLista { blocks: gblocks }) => {
            let gamma = params.gammas[t];
            let part = params.partition;
            let n = params.measurements;
            let mut g_r = vec![ZERO; n];
            for (q, (w, gw)) in blocks.iter().zip(gblocks.iter_mut()).enumerate() {
                let gq = &g_z[part.range(q)];
                if gq.iter().all(|v| *v == ZERO) {
                    continue;
                }
                let h = dict.block_apply(q, gq);
                let b = &tape.per_block[q * n..(q + 1) * n];
                grads.gammas[t] += linalg::dot_h(&h, b).re;
                let g_b: Vec<C64> = h.iter().map(|v| v * gamma).collect();
                gw.add_outer(linalg::ONE, &tape.v1, &g_b);
                for (acc, v) in g_r.iter_mut().zip(w.mul_vec(&g_b)) {
                    *acc += v;
                }
            }
            let back = dict.apply_adjoint(&g_r)?;
            g_z.iter().zip(&back).map(|(a, b)| a - b).collect()
        }
        _ => unreachable!("gradient layout follows the parameters"),
    };
    Ok(g_x)
}

/// Loss and gradient for a single sample.
fn sample_gradient(
    params: &NetworkParams,
    dict: &BlockDictionary,
    sample: &Sample,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(params);
    let t_layers = params.layers();
    let (outs, tapes) = networks::forward_with_tapes(params, &sample.y, dict)?;
    let x_hat = outs
        .last()
        .cloned()
        .unwrap_or_else(|| BlockSignal::zeros(params.partition));
    let loss = nmse(&x_hat, &sample.x_true)?;
    if t_layers == 0 {
        return Ok((loss, grads));
    }
    let err = linalg::sub(x_hat.as_slice(), sample.x_true.as_slice());
    let en = linalg::norm2(&err);
    let denom = sample.x_true.norm2();
    let mut g: Vec<C64> = if en == 0.0 {
        vec![ZERO; err.len()]
    } else {
        err.iter().map(|e| e / (en * denom)).collect()
    };
    for t in (0..t_layers).rev() {
        g = layer_adjoint(params, dict, &sample.y, t, &tapes[t], &g, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Mean batch NMSE and its gradient with respect to every parameter.
pub fn backward(
    params: &NetworkParams,
    batch: &[Sample],
    dict: &BlockDictionary,
) -> Result<(f64, Gradients)> {
    params.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let per_sample: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|s| sample_gradient(params, dict, s))
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        total.add_assign(g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Chains the single-layer adjoint of layer `t` onto an upstream gradient;
/// exposed for splicing checks.
pub fn backward_through_layer(
    params: &NetworkParams,
    dict: &BlockDictionary,
    y: &Observation,
    t: usize,
    x_in: &BlockSignal,
    g_out: &[C64],
) -> Result<(Vec<C64>, Gradients)> {
    let tape = networks::pre_activation(params, t, x_in, y, Some(dict), false)?;
    let mut grads = Gradients::zeros_like(params);
    let g_in = layer_adjoint(params, dict, y, t, &tape, g_out, &mut grads)?;
    Ok((g_in, grads))
}

/// Real coordinates of the parameters: θ, then γ, then every weight entry as
/// (re, im) in storage order. Matches [`flatten_gradients`].
pub fn flatten_params(params: &NetworkParams) -> Vec<f64> {
    let mut out: Vec<f64> = params.thetas.iter().chain(&params.gammas).copied().collect();
    for m in params.weights.matrices() {
        for c in m.as_slice() {
            out.extend([c.re, c.im]);
        }
    }
    out
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params(params: &mut NetworkParams, coords: &[f64]) -> Result<()> {
    let n = param_count(params);
    if coords.len() != n {
        return Err(Error::DimensionMismatch {
            what: "parameter vector",
            expected: n,
            found: coords.len(),
        });
    }
    let mut it = coords.iter().copied();
    for v in params.thetas.iter_mut().chain(params.gammas.iter_mut()) {
        *v = it.next().unwrap_or_default();
    }
    for m in params.weights.matrices_mut() {
        for c in m.as_mut_slice() {
            c.re = it.next().unwrap_or_default();
            c.im = it.next().unwrap_or_default();
        }
    }
    Ok(())
}

pub fn flatten_gradients(grads: &Gradients) -> Vec<f64> {
    let mut out: Vec<f64> = grads.thetas.iter().chain(&grads.gammas).copied().collect();
    for m in grads.weights.matrices() {
        for c in m.as_slice() {
            out.extend([c.re, c.im]);
        }
    }
    out
}

/// Adam over the real coordinates of the parameters. Thresholds are
/// optimized in log space so they stay positive.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(params: &NetworkParams) -> Self {
        let n = param_count(params);
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One step at rate `lr` for θ and γ and `weight_lr` for the matrices;
    /// a zero `weight_lr` leaves the matrices and their moments untouched.
    pub fn update(&mut self, params: &mut NetworkParams, grads: &Gradients, lr: f64, weight_lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut k = 0usize;
        let mut delta = |g: f64, rate: f64, m: &mut [f64], v: &mut [f64]| -> f64 {
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let d = -rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            k += 1;
            d
        };
        let (m, v) = (&mut self.m, &mut self.v);
        for (theta, g) in params.thetas.iter_mut().zip(&grads.thetas) {
            // ρ = ln θ, ∂L/∂ρ = θ ∂L/∂θ
            let d = delta(g * *theta, lr, m, v);
            *theta *= d.exp();
        }
        for (gamma, g) in params.gammas.iter_mut().zip(&grads.gammas) {
            *gamma += delta(*g, lr, m, v);
        }
        if weight_lr == 0.0 {
            return;
        }
        for (w, gw) in params.weights.matrices_mut().into_iter().zip(grads.weights.matrices()) {
            for (c, g) in w.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                c.re += delta(g.re, weight_lr, m, v);
                c.im += delta(g.im, weight_lr, m, v);
            }
        }
    }
}

fn param_count(params: &NetworkParams) -> usize {
    params.thetas.len()
        + params.gammas.len()
        + params
            .weights
            .matrices()
            .iter()
            .map(|m| 2 * m.rows() * m.cols())
            .sum::<usize>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nmse: f64,
    pub val_nmse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub initial_val_nmse: f64,
    pub best_val_nmse: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    /// `epoch,train_nmse,val_nmse,lr` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_nmse,val_nmse,lr\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{:e},{:e},{:e}\n", r.epoch, r.train_nmse, r.val_nmse, r.lr));
        }
        s
    }
}

/// Mean final-layer NMSE of `params` over `samples`.
pub fn evaluate(params: &NetworkParams, dict: &BlockDictionary, samples: &[Sample]) -> Result<f64> {
    let vals: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let (x, _) = networks::infer(params, &s.y, dict, None)?;
            nmse(&x, &s.x_true)
        })
        .collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Threshold at which half of the true nonzero units (blocks for the block
/// network, entries otherwise) survive the first layer's shrinkage at
/// identity weights and `γ = 1/L`.
pub fn calibrate_initial_threshold(
    kind: NetworkKind,
    dict: &BlockDictionary,
    samples: &[Sample],
    gamma: f64,
) -> Result<f64> {
    let mut mags = Vec::new();
    for s in samples {
        let z = dict.apply_adjoint(&s.y.y)?;
        let support = s.x_true.block_support();
        let part = dict.partition();
        for q in support {
            let r = part.range(q);
            match kind {
                NetworkKind::AdaBlockLista => mags.push(gamma * linalg::norm2(&z[r])),
                _ => {
                    for j in r {
                        if s.x_true.as_slice()[j] != ZERO {
                            mags.push(gamma * z[j].norm());
                        }
                    }
                }
            }
        }
    }
    if mags.is_empty() {
        return Err(Error::Config("no nonzero ground truth to calibrate on".into()));
    }
    mags.sort_by(f64::total_cmp);
    Ok(mags[mags.len() / 2].max(f64::MIN_POSITIVE))
}

/// Adam on the mean batch NMSE, halving the learning rate after
/// `lr_patience` epochs without a validation improvement. Returns the
/// parameters with the best validation NMSE seen (the initial ones included).
pub fn train(
    network: NetworkParams,
    data: &Dataset,
    cfg: &TrainingConfig,
) -> Result<(NetworkParams, TrainingLog)> {
    cfg.validate()?;
    network.validate()?;
    let dict = &data.dictionary;
    let mut params = network;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
    let initial_val = evaluate(&params, dict, &data.val)?;
    let mut best_val = initial_val;
    let mut best = params.clone();
    let mut lr = cfg.lr0;
    let mut stale = 0usize;
    let mut log = TrainingLog {
        initial_val_nmse: initial_val,
        best_val_nmse: initial_val,
        epochs: Vec::new(),
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let (loss, grads) = backward(&params, &batch, dict)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch loss {loss} after {batches} batches"),
                });
            }
            adam.update(&mut params, &grads, lr, lr * cfg.weight_lr_scale);
            loss_sum += loss;
            batches += 1;
        }
        let val = evaluate(&params, dict, &data.val)?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation NMSE {val}"),
            });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_nmse: loss_sum / batches.max(1) as f64,
            val_nmse: val,
            lr,
        });
        if val < best_val {
            best_val = val;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.lr_patience {
                lr *= 0.5;
                stale = 0;
            }
        }
    }
    log.best_val_nmse = best_val;
    Ok((best, log))
}
