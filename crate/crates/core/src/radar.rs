//! Frequency-agile radar: range/velocity grids, the block dictionary whose
//! block `q` holds every range cell at velocity `v_q`, extended-target scenes
//! and their echoes.

use std::io::{Read, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix, C64};
use crate::training::{Dataset, Sample, TrainingConfig};
use crate::types::{BlockDictionary, BlockPartition, BlockSignal, Observation};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// How frequency codes are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeScheme {
    /// Independent uniform draws from {0..P−1}.
    #[default]
    Uniform,
    /// A random ordering in which every code value is used `⌊N/P⌋` or
    /// `⌈N/P⌉` times. With `P | N` every block Gram matrix is the identity.
    Balanced,
}

pub fn draw_codes<R: Rng + ?Sized>(pulses: usize, range_cells: usize, scheme: CodeScheme, rng: &mut R) -> Vec<usize> {
    match scheme {
        CodeScheme::Uniform => (0..pulses).map(|_| rng.random_range(0..range_cells)).collect(),
        CodeScheme::Balanced => {
            // Values beyond a whole number of cycles are a random subset.
            let mut extra: Vec<usize> = (0..range_cells).collect();
            extra.shuffle(rng);
            let mut codes: Vec<usize> = (0..pulses - pulses % range_cells)
                .map(|n| n % range_cells)
                .chain(extra.into_iter().take(pulses % range_cells))
                .collect();
            codes.shuffle(rng);
            codes
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarConfig {
    /// Initial carrier frequency f0 in Hz.
    pub carrier_hz: f64,
    /// Frequency step Δf in Hz.
    pub freq_step_hz: f64,
    /// Pulse repetition interval T_r in seconds.
    pub pri_s: f64,
    /// N
    pub pulses: usize,
    /// P
    pub range_cells: usize,
    /// Q
    pub velocity_cells: usize,
    /// Velocity grid extent as a multiple of `c/(f0 T_r)`: `v_q = span ·
    /// c/(f0 T_r) · q/Q`. 0.5 is the unambiguous interval.
    pub velocity_span: f64,
    /// Frequency codes C_n ∈ {0..P−1}, one per pulse.
    pub codes: Vec<usize>,
    pub noise_sigma_w: f64,
    pub seed: u64,
}

impl RadarConfig {
    /// Random codes drawn from `seed`; `N = Q` pulses.
    pub fn new(range_cells: usize, velocity_cells: usize, seed: u64) -> Result<Self> {
        Self::with_pulses(velocity_cells, range_cells, velocity_cells, seed)
    }

    pub fn with_pulses(pulses: usize, range_cells: usize, velocity_cells: usize, seed: u64) -> Result<Self> {
        Self::with_code_scheme(pulses, range_cells, velocity_cells, CodeScheme::Uniform, seed)
    }

    pub fn with_code_scheme(
        pulses: usize,
        range_cells: usize,
        velocity_cells: usize,
        scheme: CodeScheme,
        seed: u64,
    ) -> Result<Self> {
        if range_cells == 0 {
            return Err(Error::InvalidRadarConfig("range_cells must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = draw_codes(pulses, range_cells, scheme, &mut rng);
        let cfg = Self {
            carrier_hz: 10e9,
            freq_step_hz: 1e6,
            pri_s: 1e-4,
            pulses,
            range_cells,
            velocity_cells,
            velocity_span: 0.5,
            codes,
            noise_sigma_w: 0.0,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRadarConfig(m));
        for (name, v) in [
            ("carrier_hz", self.carrier_hz),
            ("freq_step_hz", self.freq_step_hz),
            ("pri_s", self.pri_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.pulses == 0 || self.range_cells == 0 || self.velocity_cells == 0 {
            return bad("pulses, range_cells and velocity_cells must be positive".into());
        }
        if self.codes.len() != self.pulses {
            return bad(format!("{} codes for {} pulses", self.codes.len(), self.pulses));
        }
        if let Some(c) = self.codes.iter().find(|c| **c >= self.range_cells) {
            return bad(format!("code {c} outside 0..{}", self.range_cells));
        }
        if !(self.velocity_span >= 0.0 && self.velocity_span.is_finite()) {
            return bad("velocity_span must be nonnegative".into());
        }
        if !(self.noise_sigma_w >= 0.0) {
            return bad("noise_sigma_w must be nonnegative".into());
        }
        Ok(())
    }

    pub fn partition(&self) -> Result<BlockPartition> {
        BlockPartition::new(self.velocity_cells, self.range_cells)
    }

    /// f_n = f0 + C_n Δf
    pub fn carrier(&self, n: usize) -> f64 {
        self.carrier_hz + self.codes[n] as f64 * self.freq_step_hz
    }

    /// Phase of atom `(n, p, q)` in turns, i.e.
    /// `2 f_n (R_p + v_q n T_r) / c` with the grid values substituted so the
    /// large range term stays exact: `(f0/Δf + C_n) p/P` and
    /// `2 span (f_n/f0) n q/Q`.
    fn phase_turns(&self, n: usize, p: usize, q: usize) -> f64 {
        let range = (self.carrier_hz / self.freq_step_hz + self.codes[n] as f64) * p as f64
            / self.range_cells as f64;
        let velocity = 2.0 * self.velocity_span * (self.carrier(n) / self.carrier_hz) * n as f64 * q as f64
            / self.velocity_cells as f64;
        range.rem_euclid(1.0) + velocity.rem_euclid(1.0)
    }

    /// `exp(−j 4π/c f_n (R_p + v_q n T_r))`
    pub fn atom(&self, n: usize, p: usize, q: usize) -> C64 {
        C64::from_polar(1.0, -2.0 * std::f64::consts::PI * self.phase_turns(n, p, q))
    }

    /// `10 log10(1/σ_w²)`
    pub fn snr_db(&self) -> f64 {
        snr_db(self.noise_sigma_w)
    }
}

pub fn snr_db(sigma_w: f64) -> f64 {
    -20.0 * sigma_w.log10()
}

pub fn sigma_from_snr_db(snr: f64) -> f64 {
    10f64.powf(-snr / 20.0)
}

/// Range grid `R_p = c/(2Δf) · p/P` and velocity grid
/// `v_q = span · c/(f0 T_r) · q/Q`, both 0-based.
pub fn grids(cfg: &RadarConfig) -> (Vec<f64>, Vec<f64>) {
    let r_max = SPEED_OF_LIGHT / (2.0 * cfg.freq_step_hz);
    let v_max = cfg.velocity_span * SPEED_OF_LIGHT / (cfg.carrier_hz * cfg.pri_s);
    let ranges = (0..cfg.range_cells)
        .map(|p| r_max * p as f64 / cfg.range_cells as f64)
        .collect();
    let velocities = (0..cfg.velocity_cells)
        .map(|q| v_max * q as f64 / cfg.velocity_cells as f64)
        .collect();
    (ranges, velocities)
}

/// The raw `N × PQ` matrix of unit-modulus atoms, column `qP + p`.
pub fn raw_dictionary(cfg: &RadarConfig) -> Result<CMatrix> {
    cfg.validate()?;
    let p_cells = cfg.range_cells;
    let cols: Vec<Vec<C64>> = (0..p_cells * cfg.velocity_cells)
        .into_par_iter()
        .map(|j| {
            let (q, p) = (j / p_cells, j % p_cells);
            (0..cfg.pulses).map(|n| cfg.atom(n, p, q)).collect()
        })
        .collect();
    CMatrix::from_col_major(cfg.pulses, cols.len(), cols.concat())
}

/// Column-normalized dictionary; the recorded column scales (all `√N`) map
/// dictionary coordinates back to physical coefficients.
pub fn dictionary(cfg: &RadarConfig) -> Result<BlockDictionary> {
    BlockDictionary::new(raw_dictionary(cfg)?, cfg.partition()?)?.normalize_columns()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub range_index: usize,
    pub coefficient: C64,
}

/// An extended target: scatterers sharing one velocity cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub velocity_index: usize,
    pub scatterers: Vec<Scatterer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarScene {
    pub targets: Vec<Target>,
    pub config: RadarConfig,
}

impl RadarScene {
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        let mut seen_blocks = std::collections::BTreeSet::new();
        for t in &self.targets {
            if t.velocity_index >= cfg.velocity_cells {
                return Err(Error::InvalidScene(format!(
                    "velocity index {} outside 0..{}",
                    t.velocity_index, cfg.velocity_cells
                )));
            }
            if !seen_blocks.insert(t.velocity_index) {
                return Err(Error::InvalidScene(format!(
                    "two targets share velocity cell {}",
                    t.velocity_index
                )));
            }
            if t.scatterers.is_empty() || t.scatterers.len() > cfg.range_cells {
                return Err(Error::InvalidScene(format!(
                    "target at velocity cell {} has {} scatterers",
                    t.velocity_index,
                    t.scatterers.len()
                )));
            }
            let mut cells = std::collections::BTreeSet::new();
            for s in &t.scatterers {
                if s.range_index >= cfg.range_cells {
                    return Err(Error::InvalidScene(format!(
                        "range index {} outside 0..{}",
                        s.range_index, cfg.range_cells
                    )));
                }
                if !cells.insert(s.range_index) {
                    return Err(Error::DuplicateScatterer {
                        block: t.velocity_index,
                        cell: s.range_index,
                    });
                }
            }
        }
        Ok(())
    }

    /// Noise-free echo, summed scatterer by scatterer.
    pub fn echo(&self) -> Vec<C64> {
        let cfg = &self.config;
        (0..cfg.pulses)
            .map(|n| {
                self.targets
                    .iter()
                    .flat_map(|t| t.scatterers.iter().map(move |s| (t.velocity_index, s)))
                    .map(|(q, s)| s.coefficient * cfg.atom(n, s.range_index, q))
                    .sum()
            })
            .collect()
    }
}

/// Physical coefficients on the grid: `x[qP + p] = β`.
pub fn scene_to_signal(scene: &RadarScene) -> Result<BlockSignal> {
    scene.validate()?;
    let part = scene.config.partition()?;
    let mut x = BlockSignal::zeros(part);
    for t in &scene.targets {
        let block = x.block_mut(t.velocity_index)?;
        for s in &t.scatterers {
            block[s.range_index] = s.coefficient;
        }
    }
    Ok(x)
}

/// Physical coefficients in the coordinates of the normalized dictionary.
pub fn to_dictionary_coordinates(x: &BlockSignal, dict: &BlockDictionary) -> Result<BlockSignal> {
    rescale(x, dict, |v, s| v * s)
}

pub fn to_physical(x: &BlockSignal, dict: &BlockDictionary) -> Result<BlockSignal> {
    rescale(x, dict, |v, s| v / s)
}

fn rescale(x: &BlockSignal, dict: &BlockDictionary, f: impl Fn(C64, f64) -> C64) -> Result<BlockSignal> {
    if x.len() != dict.cols() {
        return Err(Error::DimensionMismatch {
            what: "signal length",
            expected: dict.cols(),
            found: x.len(),
        });
    }
    let data = x
        .as_slice()
        .iter()
        .zip(dict.column_scales())
        .map(|(v, s)| f(*v, *s))
        .collect();
    BlockSignal::from_vec(data, x.partition())
}

/// `y = echo + σ_w w`, `w` standard complex normal from `rng`.
pub fn observe(scene: &RadarScene, rng: &mut impl Rng) -> Result<Observation> {
    scene.validate()?;
    let mut y = scene.echo();
    let sigma = scene.config.noise_sigma_w;
    if sigma > 0.0 {
        let w = linalg::random_complex_normal(y.len(), rng);
        y.iter_mut().zip(w).for_each(|(yi, wi)| *yi += wi * sigma);
    }
    Ok(Observation::new(y, sigma))
}

/// `K` targets in distinct velocity cells, each with a uniform number of
/// scatterers from `scatterers` at distinct range cells, coefficients
/// standard complex normal.
pub fn random_scene(
    cfg: &RadarConfig,
    targets: usize,
    scatterers: (usize, usize),
    rng: &mut impl Rng,
) -> Result<RadarScene> {
    cfg.validate()?;
    if targets > cfg.velocity_cells {
        return Err(Error::SparsityExceedsBlocks {
            s: targets,
            num_blocks: cfg.velocity_cells,
        });
    }
    let (lo, hi) = scatterers;
    if lo == 0 || lo > hi || hi > cfg.range_cells {
        return Err(Error::InvalidScene(format!(
            "scatterer range {lo}..={hi} invalid for {} range cells",
            cfg.range_cells
        )));
    }
    let mut blocks = index::sample(rng, cfg.velocity_cells, targets).into_vec();
    blocks.sort_unstable();
    let targets = blocks
        .into_iter()
        .map(|q| {
            let count = rng.random_range(lo..=hi);
            let mut cells = index::sample(rng, cfg.range_cells, count).into_vec();
            cells.sort_unstable();
            let coefs = linalg::random_complex_normal(count, rng);
            Target {
                velocity_index: q,
                scatterers: cells
                    .into_iter()
                    .zip(coefs)
                    .map(|(p, c)| Scatterer {
                        range_index: p,
                        coefficient: c,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(RadarScene {
        targets,
        config: cfg.clone(),
    })
}

/// A random scene's ground truth (in dictionary coordinates) and observation.
pub fn scene_sample(
    cfg: &RadarConfig,
    dict: &BlockDictionary,
    targets: usize,
    scatterers: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Sample> {
    let scene = random_scene(cfg, targets, scatterers, rng)?;
    let x = to_dictionary_coordinates(&scene_to_signal(&scene)?, dict)?;
    Ok(Sample {
        x_true: x,
        y: observe(&scene, rng)?,
    })
}

/// Train/validation/test splits of radar scenes. Sample counts, sparsity and
/// seed come from `train_cfg`; noise comes from the radar config.
pub fn radar_dataset(
    cfg: &RadarConfig,
    dict: &BlockDictionary,
    train_cfg: &TrainingConfig,
    scatterers: (usize, usize),
) -> Result<Dataset> {
    train_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut draw = |n: usize| -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| scene_sample(cfg, dict, train_cfg.sparsity, scatterers, &mut rng))
            .collect()
    };
    let train = draw(train_cfg.n_train)?;
    let val = draw(train_cfg.n_val)?;
    let test = draw(train_cfg.n_test)?;
    Ok(Dataset {
        train,
        val,
        test,
        dictionary: dict.clone(),
        config: train_cfg.clone(),
    })
}

const DATASET_MAGIC: &[u8; 4] = b"ABLD";
const DATASET_VERSION: u32 = 1;

/// Binary sample file, little-endian throughout:
///
/// ```text
/// magic "ABLD" | version u32 | count u32 | N u32 | Q u32 | P u32
/// per sample: x (QP complex) then y (N complex), each complex as re f64, im f64
/// ```
pub fn write_samples<W: Write>(samples: &[Sample], partition: BlockPartition, n: usize, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    for v in [
        DATASET_VERSION,
        samples.len() as u32,
        n as u32,
        partition.num_blocks() as u32,
        partition.block_len() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in samples {
        if s.x_true.partition() != partition || s.y.len() != n {
            return Err(Error::Format("sample shape differs from header".into()));
        }
        write_complex(&mut w, s.x_true.as_slice())?;
        write_complex(&mut w, &s.y.y)?;
    }
    Ok(())
}

pub fn read_samples<R: Read>(mut r: R, noise_sigma_w: f64) -> Result<(Vec<Sample>, BlockPartition, usize)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let mut header = [0u32; 5];
    for h in header.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *h = u32::from_le_bytes(b);
    }
    let [version, count, n, q, p] = header;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let partition = BlockPartition::new(q as usize, p as usize)?;
    let n = n as usize;
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let x = read_complex(&mut r, partition.total_len())?;
        let y = read_complex(&mut r, n)?;
        samples.push(Sample {
            x_true: BlockSignal::from_vec(x, partition)?,
            y: Observation::new(y, noise_sigma_w),
        });
    }
    Ok((samples, partition, n))
}

/// Dictionary matrix as `rows u32 | cols u32` then row-major interleaved
/// complex f64, little-endian.
pub fn write_matrix<W: Write>(m: &CMatrix, mut w: W) -> Result<()> {
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            write_complex(&mut w, &[m[(i, j)]])?;
        }
    }
    Ok(())
}

fn write_complex<W: Write>(w: &mut W, v: &[C64]) -> Result<()> {
    for c in v {
        w.write_all(&c.re.to_le_bytes())?;
        w.write_all(&c.im.to_le_bytes())?;
    }
    Ok(())
}

fn read_complex<R: Read>(r: &mut R, len: usize) -> Result<Vec<C64>> {
    let mut out = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b)?;
        let re = f64::from_le_bytes(b);
        r.read_exact(&mut b)?;
        out.push(C64::new(re, f64::from_le_bytes(b)));
    }
    Ok(out)
}
