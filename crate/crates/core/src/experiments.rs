//! Manifest-driven experiments on the radar model: NMSE per iteration/layer,
//! recovered range-velocity maps, hit-rate sweeps and theory/coherence
//! reports.
//!
//! Manifests are TOML with unknown keys rejected. Every output starts with
//! a `# spec_sha256=<hex> seed=<n>` line (CSV) or carries `spec_sha256` and
//! `seed` fields (JSON); nothing time-dependent is written, so re-running a
//! manifest reproduces its outputs byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coherence::{self, CoherenceReport};
use crate::error::{Error, Result};
use crate::linalg;
use crate::networks::{self, NetworkKind, NetworkParams};
use crate::ops;
use crate::radar::{self, CodeScheme, RadarConfig};
use crate::solvers::{self, IterativeConfig, SolverKind};
use crate::theory::{self, ConditionCheck, TheoremReport, VerifyConfig};
use crate::training::{self, Dataset, Sample, TrainingConfig, TrainingLog};
use crate::types::{BlockDictionary, BlockSignal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    NmseCurve,
    RecoveryPanel,
    HitrateGrid,
    TheoryReport,
    CoherenceReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ista,
    BlockIsta,
    Lista,
    Adalista,
    AdalistaSingle,
    AdaBlocklista,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ista => "ista",
            Method::BlockIsta => "block_ista",
            Method::Lista => "lista",
            Method::Adalista => "adalista",
            Method::AdalistaSingle => "adalista_single",
            Method::AdaBlocklista => "ada_blocklista",
        }
    }

    pub fn network_kind(self) -> Option<NetworkKind> {
        match self {
            Method::Ista | Method::BlockIsta => None,
            Method::Lista => Some(NetworkKind::Lista),
            Method::Adalista => Some(NetworkKind::AdaLista),
            Method::AdalistaSingle => Some(NetworkKind::AdaListaSingle),
            Method::AdaBlocklista => Some(NetworkKind::AdaBlockLista),
        }
    }

    pub fn solver_kind(self) -> Option<SolverKind> {
        match self {
            Method::Ista => Some(SolverKind::Ista),
            Method::BlockIsta => Some(SolverKind::BlockIsta),
            _ => None,
        }
    }
}

/// When a trial counts as a hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitRule {
    /// The K blocks of largest recovered ℓ2 norm are exactly the true blocks.
    TopKBlocks,
    /// The largest-magnitude entries, as many as the truth has nonzeros,
    /// are exactly the true nonzero entries.
    TopEntries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarSpec {
    /// N; defaults to Q.
    pub pulses: Option<usize>,
    pub range_cells: usize,
    pub velocity_cells: usize,
    pub carrier_hz: f64,
    pub freq_step_hz: f64,
    pub pri_s: f64,
    pub velocity_span: f64,
    pub code_scheme: CodeScheme,
    /// Seed for the frequency codes.
    pub code_seed: u64,
}

impl Default for RadarSpec {
    fn default() -> Self {
        Self {
            pulses: None,
            range_cells: 16,
            velocity_cells: 64,
            carrier_hz: 10e9,
            freq_step_hz: 1e6,
            pri_s: 1e-4,
            velocity_span: 0.5,
            code_scheme: CodeScheme::Balanced,
            code_seed: 0,
        }
    }
}

impl RadarSpec {
    pub fn config(&self, noise_sigma_w: f64) -> Result<RadarConfig> {
        let pulses = self.pulses.unwrap_or(self.velocity_cells);
        let mut cfg = RadarConfig::with_code_scheme(
            pulses,
            self.range_cells,
            self.velocity_cells,
            self.code_scheme,
            self.code_seed,
        )?;
        cfg.carrier_hz = self.carrier_hz;
        cfg.freq_step_hz = self.freq_step_hz;
        cfg.pri_s = self.pri_s;
        cfg.velocity_span = self.velocity_span;
        cfg.noise_sigma_w = noise_sigma_w;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterativeSpec {
    pub iterations: usize,
    /// λ as a fraction of `max_j |Φ^H y|_j` (ISTA) or `max_q ‖Φ_q^H y‖` (Block-ISTA).
    pub lambda_fraction: f64,
}

impl Default for IterativeSpec {
    fn default() -> Self {
        Self {
            iterations: 200,
            lambda_fraction: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_patience: usize,
    /// Learning-rate multiplier for the weight matrices; 0 trains only the
    /// per-layer steps and thresholds.
    pub weight_lr_scale: f64,
    /// Pick the initial step, threshold scale and decay by a grid search on
    /// the validation set instead of using the three fields below.
    pub init_search: bool,
    /// Initial step size; `None` means `1/L`.
    pub gamma_init: Option<f64>,
    /// First-layer threshold as a multiple of the median true-block (or
    /// true-entry) magnitude of `γ Φ^H y`.
    pub theta_scale: f64,
    /// Initial thresholds decay geometrically by this factor per layer.
    pub theta_decay: f64,
    /// Directory searched for (and receiving) checkpoints; defaults to
    /// `<out_dir>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            layers: 10,
            n_train: 2000,
            n_val: 200,
            epochs: 10,
            batch_size: 32,
            lr0: 5e-4,
            lr_patience: 5,
            weight_lr_scale: 1.0,
            init_search: true,
            gamma_init: Some(0.25),
            theta_scale: 1.0,
            theta_decay: 0.85,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySpec {
    pub measurements: usize,
    pub num_blocks: usize,
    pub block_len: usize,
    pub perturbation: f64,
    pub s: usize,
    pub zeta: f64,
    pub sigma_w: f64,
    pub delta: f64,
    pub layers: usize,
}

impl Default for TheorySpec {
    fn default() -> Self {
        Self {
            measurements: 24,
            num_blocks: 12,
            block_len: 2,
            perturbation: 0.05,
            s: 2,
            zeta: 1.0,
            sigma_w: 0.0,
            delta: 0.01,
            layers: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub trials: usize,
    pub radar: RadarSpec,
    /// Inclusive scatterer-count range per target.
    pub scatterers: [usize; 2],
    /// Block sparsities K. Curves use the first; panels and grids sweep all.
    pub sparsity: Vec<usize>,
    /// SNR levels in dB; empty means noiseless.
    pub snr_db: Vec<f64>,
    pub iterative: IterativeSpec,
    pub network: NetworkSpec,
    pub theory: TheorySpec,
    pub hit_rule: HitRule,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: String::new(),
            kind: ExperimentKind::CoherenceReport,
            methods: vec![Method::Ista, Method::BlockIsta, Method::Adalista, Method::AdaBlocklista],
            seed: 0,
            trials: 50,
            radar: RadarSpec::default(),
            scatterers: [12, 16],
            sparsity: vec![1],
            snr_db: Vec::new(),
            iterative: IterativeSpec::default(),
            network: NetworkSpec::default(),
            theory: TheorySpec::default(),
            hit_rule: HitRule::TopKBlocks,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("experiment '{}': {m}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name must be a non-empty file-name-safe string".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        let scenes = !matches!(self.kind, ExperimentKind::TheoryReport | ExperimentKind::CoherenceReport);
        if !scenes {
            return Ok(());
        }
        if self.sparsity.is_empty() {
            return bad("sparsity list is empty".into());
        }
        if let Some(k) = self.sparsity.iter().find(|k| **k > self.radar.velocity_cells) {
            return Err(Error::SparsityExceedsBlocks {
                s: *k,
                num_blocks: self.radar.velocity_cells,
            });
        }
        let [lo, hi] = self.scatterers;
        if lo == 0 || lo > hi || hi > self.radar.range_cells {
            return bad(format!("scatterers {lo}..={hi} invalid"));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("non-finite SNR".into());
        }
        if self.network.layers == 0 && self.methods.iter().any(|m| m.network_kind().is_some()) {
            return bad("network methods need at least one layer".into());
        }
        let net = &self.network;
        if !(net.theta_decay > 0.0 && net.theta_scale > 0.0 && net.gamma_init.is_none_or(|g| g > 0.0)) {
            return bad("theta_decay, theta_scale and gamma_init must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the spec's canonical JSON.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub out_dir: Option<PathBuf>,
    #[serde(rename = "experiment")]
    pub experiments: Vec<ExperimentSpec>,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Independent 64-bit seed for a labelled sub-stream of `seed`.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update(l.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn trial_rng(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

/// Shared state across the experiments of one run.
#[derive(Default)]
pub struct RunContext {
    pub out_dir: Option<PathBuf>,
    networks: HashMap<String, NetworkParams>,
    /// Training logs keyed by `<method>_<key prefix>`, written alongside
    /// checkpoints.
    pub training_logs: BTreeMap<String, TrainingLog>,
    /// Progress messages go here (the CLI prints them to stderr).
    pub progress: Option<Box<dyn Fn(&str) + Send + Sync>>,
}

impl RunContext {
    pub fn new(out_dir: Option<PathBuf>) -> Self {
        Self {
            out_dir,
            ..Self::default()
        }
    }

    fn note(&self, msg: &str) {
        if let Some(p) = &self.progress {
            p(msg);
        }
    }
}

#[derive(Serialize)]
struct TrainingKey<'a> {
    method: Method,
    radar: &'a RadarSpec,
    network: &'a NetworkSpec,
    scatterers: [usize; 2],
    sparsity: &'a [usize],
    snr_db: &'a [f64],
    seed: u64,
}

/// Samples whose sparsity and noise level are drawn uniformly from the
/// spec's lists.
fn mixed_samples(
    spec: &ExperimentSpec,
    dict: &BlockDictionary,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    (0..count)
        .map(|_| {
            let k = spec.sparsity[rng.random_range(0..spec.sparsity.len())];
            let sigma = if spec.snr_db.is_empty() {
                0.0
            } else {
                radar::sigma_from_snr_db(spec.snr_db[rng.random_range(0..spec.snr_db.len())])
            };
            let cfg = spec.radar.config(sigma)?;
            radar::scene_sample(&cfg, dict, k.max(1), (spec.scatterers[0], spec.scatterers[1]), rng)
        })
        .collect()
}

/// Returns a trained network for `method`, from the in-run cache, a
/// checkpoint on disk, or by training on radar scenes drawn as the spec
/// describes.
pub fn trained_network(
    spec: &ExperimentSpec,
    method: Method,
    dict: &BlockDictionary,
    ctx: &mut RunContext,
) -> Result<NetworkParams> {
    let kind = method
        .network_kind()
        .ok_or_else(|| Error::Config(format!("{} is not a network", method.name())))?;
    let key = TrainingKey {
        method,
        radar: &spec.radar,
        network: &NetworkSpec {
            checkpoint_dir: None,
            ..spec.network.clone()
        },
        scatterers: spec.scatterers,
        sparsity: &spec.sparsity,
        snr_db: &spec.snr_db,
        seed: spec.seed,
    };
    let key_hash = sha256_hex(serde_json::to_string(&key)?.as_bytes());
    if let Some(p) = ctx.networks.get(&key_hash) {
        return Ok(p.clone());
    }
    let tag = format!("{}_{}", method.name(), &key_hash[..12]);
    let ckpt_dir = spec
        .network
        .checkpoint_dir
        .clone()
        .or_else(|| ctx.out_dir.as_ref().map(|d| d.join("checkpoints")));
    if let Some(dir) = &ckpt_dir {
        let path = dir.join(format!("{tag}.abln"));
        if path.exists() {
            let params = NetworkParams::read_binary(std::io::BufReader::new(std::fs::File::open(&path)?))?;
            ctx.note(&format!("loaded {}", path.display()));
            ctx.networks.insert(key_hash, params.clone());
            return Ok(params);
        }
    }

    let net = &spec.network;
    let mut rng = trial_rng(spec.seed, &[0x7ea1, method as u64]);
    let train = mixed_samples(spec, dict, net.n_train, &mut rng)?;
    let val = mixed_samples(spec, dict, net.n_val, &mut rng)?;
    let cfg = TrainingConfig {
        n_train: net.n_train,
        n_val: net.n_val,
        n_test: 1,
        lr0: net.lr0,
        epochs: net.epochs,
        batch_size: net.batch_size,
        seed: derive_seed(spec.seed, &[0x5eed, method as u64]),
        sparsity: spec.sparsity[0],
        lr_patience: net.lr_patience,
        weight_lr_scale: net.weight_lr_scale,
        ..TrainingConfig::default()
    };
    let lip = ops::lipschitz_constant(dict)?;
    let init = if net.init_search {
        let probe = &val[..val.len().min(INIT_SEARCH_SAMPLES)];
        let mut best: Option<(f64, NetworkParams)> = None;
        for &gamma in &INIT_GAMMAS {
            for &scale in &INIT_SCALES {
                for &decay in &INIT_DECAYS {
                    let cand = schedule_init(kind, dict, net.layers, probe, gamma, scale, decay)?;
                    let score = training::evaluate(&cand, dict, probe)?;
                    if score.is_finite() && best.as_ref().is_none_or(|(b, _)| score < *b) {
                        best = Some((score, cand));
                    }
                }
            }
        }
        best.map(|b| b.1)
            .ok_or_else(|| Error::Config("no finite initialization found".into()))?
    } else {
        let gamma = net.gamma_init.unwrap_or(1.0 / lip);
        schedule_init(kind, dict, net.layers, &val, gamma, net.theta_scale, net.theta_decay)?
    };
    let data = Dataset {
        train,
        test: val[..1].to_vec(),
        val,
        dictionary: dict.clone(),
        config: cfg.clone(),
    };
    ctx.note(&format!("training {} ({} samples, {} epochs)", method.name(), net.n_train, net.epochs));
    let (params, log) = training::train(init, &data, &cfg)?;
    ctx.note(&format!(
        "trained {}: validation NMSE {:.4} -> {:.4}",
        method.name(),
        log.initial_val_nmse,
        log.best_val_nmse
    ));
    if let Some(dir) = &ckpt_dir {
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        params.write_binary(&mut buf)?;
        std::fs::write(dir.join(format!("{tag}.abln")), buf)?;
        std::fs::write(dir.join(format!("{tag}_log.csv")), log.to_csv())?;
    }
    ctx.training_logs.insert(tag, log);
    ctx.networks.insert(key_hash, params.clone());
    Ok(params)
}

const INIT_SEARCH_SAMPLES: usize = 200;
const INIT_GAMMAS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
const INIT_SCALES: [f64; 4] = [0.8, 1.0, 1.2, 1.5];
const INIT_DECAYS: [f64; 4] = [0.7, 0.8, 0.85, 0.9];

/// Identity weights, constant step `gamma`, and thresholds
/// `scale · m · decay^t` with `m` the calibrated median magnitude.
fn schedule_init(
    kind: NetworkKind,
    dict: &BlockDictionary,
    layers: usize,
    samples: &[Sample],
    gamma: f64,
    scale: f64,
    decay: f64,
) -> Result<NetworkParams> {
    let theta0 = scale * training::calibrate_initial_threshold(kind, dict, samples, gamma)?;
    let mut p = NetworkParams::init_from_dictionary(kind, dict, layers, theta0)?;
    for (t, th) in p.thetas.iter_mut().enumerate() {
        *th = theta0 * decay.powi(t as i32);
    }
    if !p.gammas.is_empty() {
        p.gammas = vec![gamma; layers];
    }
    Ok(p)
}

/// A prepared method: iterative solvers carry their budget, networks their
/// trained parameters.
enum Prepared {
    Solver(SolverKind, IterativeSpec, f64),
    Network(NetworkParams),
}

fn prepare(
    spec: &ExperimentSpec,
    method: Method,
    dict: &BlockDictionary,
    lipschitz: f64,
    ctx: &mut RunContext,
) -> Result<Prepared> {
    match method.solver_kind() {
        Some(kind) => Ok(Prepared::Solver(kind, spec.iterative.clone(), lipschitz)),
        None => Ok(Prepared::Network(trained_network(spec, method, dict, ctx)?)),
    }
}

/// Recovered signal and, when `truth` is given, NMSE after every
/// iteration/layer.
fn run_method(
    prepared: &Prepared,
    sample: &Sample,
    dict: &BlockDictionary,
    with_trace: bool,
) -> Result<(BlockSignal, Vec<f64>)> {
    let truth = with_trace.then_some(&sample.x_true);
    match prepared {
        Prepared::Solver(kind, it, lip) => {
            let z = dict.apply_adjoint(&sample.y.y)?;
            let peak = match kind {
                SolverKind::Ista => z.iter().map(|v| v.norm()).fold(0.0, f64::max),
                SolverKind::BlockIsta => z
                    .chunks(dict.partition().block_len())
                    .map(linalg::norm2)
                    .fold(0.0, f64::max),
            };
            if peak == 0.0 {
                // y = 0: zero is the minimizer for every λ.
                let x = BlockSignal::zeros(dict.partition());
                let trace = match truth {
                    Some(t) => vec![training::nmse(&x, t)?; it.iterations],
                    None => Vec::new(),
                };
                return Ok((x, trace));
            }
            let cfg = IterativeConfig::new(it.lambda_fraction * peak, it.iterations);
            let (x, trace) = solvers::solve_with_lipschitz(*kind, &sample.y, dict, &cfg, *lip, truth)?;
            Ok((x, trace.per_iter_nmse))
        }
        Prepared::Network(p) => {
            let (x, trace) = networks::infer(p, &sample.y, dict, truth)?;
            Ok((x, trace.per_iter_nmse))
        }
    }
}

pub fn is_hit(rule: HitRule, x_hat: &BlockSignal, x_true: &BlockSignal) -> bool {
    match rule {
        HitRule::TopKBlocks => {
            let support = x_true.block_support();
            x_hat.top_k_blocks(support.len()) == support
        }
        HitRule::TopEntries => {
            let truth: std::collections::BTreeSet<usize> = x_true
                .as_slice()
                .iter()
                .enumerate()
                .filter(|(_, v)| v.norm() > 0.0)
                .map(|(i, _)| i)
                .collect();
            let mut order: Vec<usize> = (0..x_hat.len()).collect();
            let mags: Vec<f64> = x_hat.as_slice().iter().map(|v| v.norm()).collect();
            order.sort_by(|a, b| mags[*b].total_cmp(&mags[*a]).then(a.cmp(b)));
            order.truncate(truth.len());
            order.into_iter().collect::<std::collections::BTreeSet<_>>() == truth
        }
    }
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn build_dictionary(spec: &ExperimentSpec) -> Result<(RadarConfig, BlockDictionary, f64)> {
    let cfg = spec.radar.config(0.0)?;
    let dict = radar::dictionary(&cfg)?;
    let lip = ops::lipschitz_constant(&dict)?;
    Ok((cfg, dict, lip))
}

fn test_samples(
    spec: &ExperimentSpec,
    cfg: &RadarConfig,
    dict: &BlockDictionary,
    k: usize,
    sigma_w: f64,
    labels: &[u64],
) -> Result<Vec<Sample>> {
    let mut c = cfg.clone();
    c.noise_sigma_w = sigma_w;
    (0..spec.trials)
        .map(|trial| {
            let mut l = labels.to_vec();
            l.push(trial as u64);
            let mut rng = trial_rng(spec.seed, &l);
            radar::scene_sample(&c, dict, k, (spec.scatterers[0], spec.scatterers[1]), &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: Method,
    /// 1-based iteration or layer.
    pub step: usize,
    pub nmse: f64,
    pub stderr: f64,
}

/// Mean NMSE after every iteration (solvers) or layer (networks) on
/// `trials` scenes with the first listed sparsity.
pub fn run_nmse_curve(spec: &ExperimentSpec, ctx: &mut RunContext) -> Result<Vec<CurveRow>> {
    spec.validate()?;
    let (cfg, dict, lip) = build_dictionary(spec)?;
    let k = spec.sparsity[0];
    if k == 0 {
        return Err(Error::ZeroGroundTruth);
    }
    let sigma = spec.snr_db.first().map_or(0.0, |s| radar::sigma_from_snr_db(*s));
    let samples = test_samples(spec, &cfg, &dict, k, sigma, &[0xc0, k as u64])?;
    let mut rows = Vec::new();
    for &method in &spec.methods {
        let prepared = prepare(spec, method, &dict, lip, ctx)?;
        let traces: Vec<Vec<f64>> = samples
            .par_iter()
            .map(|s| run_method(&prepared, s, &dict, true).map(|r| r.1))
            .collect::<Result<_>>()?;
        let steps = traces.iter().map(Vec::len).max().unwrap_or(0);
        for t in 0..steps {
            // Solvers that stopped early keep their final value.
            let vals: Vec<f64> = traces
                .iter()
                .map(|tr| tr.get(t).or(tr.last()).copied().unwrap_or(1.0))
                .collect();
            let (nmse, stderr) = mean_and_stderr(&vals);
            rows.push(CurveRow {
                method,
                step: t + 1,
                nmse,
                stderr,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRow {
    pub method: Method,
    pub snr_db: Option<f64>,
    pub sparsity: usize,
    pub trials: usize,
    pub hits: usize,
    pub hit_rate: f64,
    pub stderr: f64,
}

fn hit_row(method: Method, snr_db: Option<f64>, sparsity: usize, hits: usize, trials: usize) -> HitRow {
    let p = hits as f64 / trials as f64;
    HitRow {
        method,
        snr_db,
        sparsity,
        trials,
        hits,
        hit_rate: p,
        stderr: (p * (1.0 - p) / trials as f64).sqrt(),
    }
}

/// `|x̂|` on the (range, velocity) grid for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelGrid {
    pub sparsity: usize,
    /// `truth[p][q] = |β|` at range cell p, velocity cell q.
    pub truth: Vec<Vec<f64>>,
    pub methods: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelResult {
    pub grids: Vec<PanelGrid>,
    pub hits: Vec<HitRow>,
}

fn magnitude_grid(x: &BlockSignal, dict: &BlockDictionary) -> Result<Vec<Vec<f64>>> {
    let phys = radar::to_physical(x, dict)?;
    let part = phys.partition();
    Ok((0..part.block_len())
        .map(|p| {
            (0..part.num_blocks())
                .map(|q| phys.as_slice()[q * part.block_len() + p].norm())
                .collect()
        })
        .collect())
}

/// For each listed sparsity: recovered magnitude maps of the first scene and
/// hit rates over all `trials` scenes.
pub fn run_recovery_panel(spec: &ExperimentSpec, ctx: &mut RunContext) -> Result<PanelResult> {
    spec.validate()?;
    let (cfg, dict, lip) = build_dictionary(spec)?;
    let sigma = spec.snr_db.first().map_or(0.0, |s| radar::sigma_from_snr_db(*s));
    let mut grids = Vec::new();
    let mut hits = Vec::new();
    for &k in &spec.sparsity {
        let samples = test_samples(spec, &cfg, &dict, k, sigma, &[0xa1, k as u64])?;
        let mut grid = PanelGrid {
            sparsity: k,
            truth: magnitude_grid(&samples[0].x_true, &dict)?,
            methods: BTreeMap::new(),
        };
        for &method in &spec.methods {
            let single_k = ExperimentSpec {
                sparsity: vec![k],
                ..spec.clone()
            };
            let prepared = prepare(&single_k, method, &dict, lip, ctx)?;
            let outs: Vec<BlockSignal> = samples
                .par_iter()
                .map(|s| run_method(&prepared, s, &dict, false).map(|r| r.0))
                .collect::<Result<_>>()?;
            grid.methods
                .insert(method.name().to_string(), magnitude_grid(&outs[0], &dict)?);
            let h = if k == 0 {
                outs.iter().filter(|x| x.block_support().is_empty()).count()
            } else {
                outs.iter()
                    .zip(&samples)
                    .filter(|(x, s)| is_hit(spec.hit_rule, x, &s.x_true))
                    .count()
            };
            hits.push(hit_row(method, spec.snr_db.first().copied(), k, h, spec.trials));
        }
        grids.push(grid);
    }
    Ok(PanelResult { grids, hits })
}

/// Hit rate per (method, SNR, K). Networks are trained once per method on
/// scenes mixing every listed SNR and sparsity.
pub fn run_hitrate_grid(spec: &ExperimentSpec, ctx: &mut RunContext) -> Result<Vec<HitRow>> {
    spec.validate()?;
    if spec.sparsity.contains(&0) {
        return Err(Error::Config("hit rates need K ≥ 1".into()));
    }
    let (cfg, dict, lip) = build_dictionary(spec)?;
    let snrs: Vec<Option<f64>> = if spec.snr_db.is_empty() {
        vec![None]
    } else {
        spec.snr_db.iter().copied().map(Some).collect()
    };
    let mut rows = Vec::new();
    for &method in &spec.methods {
        let prepared = prepare(spec, method, &dict, lip, ctx)?;
        for (si, snr) in snrs.iter().enumerate() {
            let sigma = snr.map_or(0.0, radar::sigma_from_snr_db);
            for &k in &spec.sparsity {
                let samples = test_samples(spec, &cfg, &dict, k, sigma, &[0x41, si as u64, k as u64])?;
                let h = samples
                    .par_iter()
                    .map(|s| {
                        run_method(&prepared, s, &dict, false).map(|(x, _)| is_hit(spec.hit_rule, &x, &s.x_true))
                    })
                    .collect::<Result<Vec<bool>>>()?
                    .into_iter()
                    .filter(|h| *h)
                    .count();
                rows.push(hit_row(method, *snr, k, h, spec.trials));
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryResult {
    pub block_condition: ConditionCheck,
    pub verification: TheoremReport,
}

pub fn run_theory_report(spec: &ExperimentSpec) -> Result<TheoryResult> {
    let t = &spec.theory;
    let dict = theory::orthogonalized_block_dictionary(t.measurements, t.num_blocks, t.block_len, t.perturbation, spec.seed)?;
    let cfg = VerifyConfig {
        s: t.s,
        zeta: t.zeta,
        sigma_w: t.sigma_w,
        delta: t.delta,
        layers: t.layers,
        trials: spec.trials,
        seed: spec.seed,
        threshold_scale: 1.0,
    };
    Ok(TheoryResult {
        block_condition: theory::check_block_yonina(&dict, t.s)?,
        verification: theory::verify_theorem(&dict, &cfg)?,
    })
}

pub fn run_coherence_report(spec: &ExperimentSpec) -> Result<CoherenceReport> {
    let (_, dict, _) = build_dictionary(spec)?;
    coherence::coherence_report(&dict)
}

fn csv_header(spec: &ExperimentSpec) -> String {
    format!("# spec_sha256={} seed={}\n", spec.hash(), spec.seed)
}

fn curve_csv(spec: &ExperimentSpec, rows: &[CurveRow]) -> String {
    let mut s = csv_header(spec);
    s.push_str("method,step,nmse,stderr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.method.name(), r.step, r.nmse, r.stderr);
    }
    s
}

fn hits_csv(spec: &ExperimentSpec, rows: &[HitRow]) -> String {
    let mut s = csv_header(spec);
    s.push_str("method,snr_db,k,trials,hits,hit_rate,stderr\n");
    for r in rows {
        let snr = r.snr_db.map_or("inf".to_string(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method.name(),
            snr,
            r.sparsity,
            r.trials,
            r.hits,
            r.hit_rate,
            r.stderr
        );
    }
    s
}

fn panel_csv(spec: &ExperimentSpec, grids: &[PanelGrid]) -> String {
    let mut s = csv_header(spec);
    s.push_str("source,k,range_index,velocity_index,magnitude\n");
    for g in grids {
        let all = std::iter::once(("truth", &g.truth)).chain(g.methods.iter().map(|(k, v)| (k.as_str(), v)));
        for (name, grid) in all {
            for (p, row) in grid.iter().enumerate() {
                for (q, m) in row.iter().enumerate() {
                    let _ = writeln!(s, "{name},{},{p},{q},{m}", g.sparsity);
                }
            }
        }
    }
    s
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    spec_sha256: String,
    seed: u64,
    name: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn stamped_json<T: Serialize>(spec: &ExperimentSpec, body: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Stamped {
        spec_sha256: spec.hash(),
        seed: spec.seed,
        name: &spec.name,
        body,
    })?;
    s.push('\n');
    Ok(s)
}

/// Runs one experiment and returns `(file name, contents)` pairs.
pub fn run_experiment(spec: &ExperimentSpec, ctx: &mut RunContext) -> Result<Vec<(String, String)>> {
    spec.validate()?;
    Ok(match spec.kind {
        ExperimentKind::NmseCurve => {
            let rows = run_nmse_curve(spec, ctx)?;
            vec![("nmse.csv".into(), curve_csv(spec, &rows))]
        }
        ExperimentKind::RecoveryPanel => {
            let r = run_recovery_panel(spec, ctx)?;
            vec![
                ("panel.json".into(), stamped_json(spec, &r)?),
                ("panel.csv".into(), panel_csv(spec, &r.grids)),
                ("panel_hits.csv".into(), hits_csv(spec, &r.hits)),
            ]
        }
        ExperimentKind::HitrateGrid => {
            let rows = run_hitrate_grid(spec, ctx)?;
            vec![("hitrate.csv".into(), hits_csv(spec, &rows))]
        }
        ExperimentKind::TheoryReport => vec![("theory.json".into(), stamped_json(spec, &run_theory_report(spec)?)?)],
        ExperimentKind::CoherenceReport => {
            vec![("coherence.json".into(), stamped_json(spec, &run_coherence_report(spec)?)?)]
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub name: String,
    pub kind: ExperimentKind,
    pub spec_sha256: String,
    pub ok: bool,
    pub error: Option<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub manifest_sha256: String,
    pub experiments: Vec<ExperimentOutcome>,
}

impl RunSummary {
    pub fn all_ok(&self) -> bool {
        self.experiments.iter().all(|e| e.ok)
    }
}

/// Runs every experiment of the manifest at `path` in order, writing outputs
/// under `<out_dir>/<name>/` and a `summary.json`. A failing experiment is
/// recorded and the run continues. `out_dir` overrides the manifest's.
pub fn run_all(path: &Path, out_dir: Option<&Path>, ctx: &mut RunContext) -> Result<RunSummary> {
    let text = std::fs::read(path)?;
    let manifest = Manifest::from_toml(
        std::str::from_utf8(&text).map_err(|e| Error::Config(format!("manifest is not UTF-8: {e}")))?,
    )?;
    let out = out_dir
        .map(Path::to_path_buf)
        .or_else(|| manifest.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    std::fs::create_dir_all(&out)?;
    ctx.out_dir = Some(out.clone());
    let mut summary = RunSummary {
        manifest_sha256: sha256_hex(&text),
        experiments: Vec::new(),
    };
    let mut names = std::collections::BTreeSet::new();
    for spec in &manifest.experiments {
        ctx.note(&format!("running {}", spec.name));
        let result = if names.insert(spec.name.clone()) {
            run_experiment(spec, ctx)
        } else {
            Err(Error::Config(format!("duplicate experiment name '{}'", spec.name)))
        };
        let outcome = match result {
            Ok(files) => {
                let dir = out.join(&spec.name);
                std::fs::create_dir_all(&dir)?;
                let mut outputs = Vec::new();
                for (name, body) in files {
                    std::fs::write(dir.join(&name), body)?;
                    outputs.push(format!("{}/{}", spec.name, name));
                }
                ExperimentOutcome {
                    name: spec.name.clone(),
                    kind: spec.kind,
                    spec_sha256: spec.hash(),
                    ok: true,
                    error: None,
                    outputs,
                }
            }
            Err(e) => {
                ctx.note(&format!("{} failed: {e}", spec.name));
                ExperimentOutcome {
                    name: spec.name.clone(),
                    kind: spec.kind,
                    spec_sha256: spec.hash(),
                    ok: false,
                    error: Some(e.to_string()),
                    outputs: Vec::new(),
                }
            }
        };
        summary.experiments.push(outcome);
    }
    let mut s = serde_json::to_string_pretty(&summary)?;
    s.push('\n');
    std::fs::write(out.join("summary.json"), s)?;
    Ok(summary)
}
