use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adablock::experiments::{self, ExperimentSpec, RadarSpec, RunContext, TheorySpec};
use adablock::networks::{self, NetworkKind, NetworkParams};
use adablock::radar::{self, CodeScheme, RadarConfig};
use adablock::solvers::{self, IterativeConfig, SolverKind};
use adablock::training::{self, Dataset, Sample, TrainingConfig};
use adablock::{coherence, linalg, ops, BlockDictionary};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "adablock", version, about = "Block-sparse recovery with unfolded networks")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate radar scenes and write a dataset directory.
    Generate(GenerateArgs),
    /// Print μ, ν_I and μ_B of a radar dictionary as JSON.
    Coherence(RadarArgs),
    /// Run ISTA or Block-ISTA on one dataset sample and write its trace.
    Solve(SolveArgs),
    /// Train an unfolded network on a dataset.
    Train(TrainArgs),
    /// Run a trained network over a dataset and write per-layer NMSE.
    Infer(InferArgs),
    /// Check the block-recovery condition and verify the convergence bound.
    TheoryCheck(TheoryArgs),
    /// Manifest-driven experiments.
    Experiment {
        #[command(subcommand)]
        action: ExperimentAction,
    },
}

#[derive(Subcommand)]
enum ExperimentAction {
    /// Run every experiment in a TOML manifest.
    Run { manifest: PathBuf },
}

#[derive(Args, Clone)]
struct RadarArgs {
    /// Pulses N (defaults to Q).
    #[arg(long)]
    pulses: Option<usize>,
    /// Range cells P.
    #[arg(long, default_value_t = 16)]
    range_cells: usize,
    /// Velocity cells Q.
    #[arg(long, default_value_t = 64)]
    velocity_cells: usize,
    #[arg(long, value_enum, default_value_t = Codes::Balanced)]
    codes: Codes,
    /// Velocity grid extent in units of c/(f0 T_r).
    #[arg(long, default_value_t = 0.5)]
    velocity_span: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Codes {
    Uniform,
    Balanced,
}

impl RadarArgs {
    fn config(&self, seed: u64, sigma_w: f64) -> Result<RadarConfig> {
        let spec = RadarSpec {
            pulses: self.pulses,
            range_cells: self.range_cells,
            velocity_cells: self.velocity_cells,
            code_scheme: match self.codes {
                Codes::Uniform => CodeScheme::Uniform,
                Codes::Balanced => CodeScheme::Balanced,
            },
            code_seed: seed,
            velocity_span: self.velocity_span,
            ..RadarSpec::default()
        };
        Ok(spec.config(sigma_w)?)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    radar: RadarArgs,
    /// Targets (nonzero blocks) per scene.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 12)]
    min_scatterers: usize,
    #[arg(long, default_value_t = 16)]
    max_scatterers: usize,
    /// Per-sample SNR in dB; noiseless when absent.
    #[arg(long)]
    snr_db: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Ista,
    BlockIsta,
}

#[derive(Args)]
struct SolveArgs {
    /// Dataset directory written by `generate`.
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SolverArg::BlockIsta)]
    method: SolverArg,
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    /// λ as a fraction of the largest entry (ISTA) or block (Block-ISTA) of Φ^H y.
    #[arg(long, default_value_t = 0.02)]
    lambda_fraction: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Lista,
    Adalista,
    AdalistaSingle,
    AdaBlocklista,
}

impl From<KindArg> for NetworkKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Lista => NetworkKind::Lista,
            KindArg::Adalista => NetworkKind::AdaLista,
            KindArg::AdalistaSingle => NetworkKind::AdaListaSingle,
            KindArg::AdaBlocklista => NetworkKind::AdaBlockLista,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::AdaBlocklista)]
    kind: KindArg,
    #[arg(long, default_value_t = 10)]
    layers: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr0: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Fraction of the dataset held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Initial step size (defaults to 1/L).
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct InferArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 24)]
    measurements: usize,
    #[arg(long, default_value_t = 12)]
    blocks: usize,
    #[arg(long, default_value_t = 2)]
    block_len: usize,
    #[arg(long, default_value_t = 0.05)]
    perturbation: f64,
    #[arg(long, default_value_t = 2)]
    s: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma_w: f64,
    #[arg(long, default_value_t = 20)]
    layers: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::Generate(a) => generate(&a, cli.seed, &out_dir)?,
        Command::Coherence(a) => {
            let dict = radar::dictionary(&a.config(cli.seed, 0.0)?)?;
            println!("{}", serde_json::to_string_pretty(&coherence::coherence_report(&dict)?)?);
        }
        Command::Solve(a) => solve(&a, &out_dir)?,
        Command::Train(a) => train(&a, cli.seed, &out_dir)?,
        Command::Infer(a) => infer(&a, &out_dir)?,
        Command::TheoryCheck(a) => theory_check(&a, cli.seed, &out_dir)?,
        Command::Experiment {
            action: ExperimentAction::Run { manifest },
        } => {
            let mut ctx = RunContext::new(None);
            ctx.progress = Some(Box::new(|m: &str| eprintln!("{m}")));
            let summary = experiments::run_all(&manifest, cli.out_dir.as_deref(), &mut ctx)?;
            for e in &summary.experiments {
                match &e.error {
                    None => eprintln!("ok     {}", e.name),
                    Some(err) => eprintln!("FAILED {}: {err}", e.name),
                }
            }
            if !summary.all_ok() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

const CONFIG_FILE: &str = "radar.json";
const SAMPLES_FILE: &str = "samples.abld";
const DICTIONARY_FILE: &str = "dictionary.bin";

fn generate(a: &GenerateArgs, seed: u64, out: &Path) -> Result<()> {
    let sigma = a.snr_db.map_or(0.0, radar::sigma_from_snr_db);
    let cfg = a.radar.config(seed, sigma)?;
    let dict = radar::dictionary(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e_6572);
    let samples = (0..a.count)
        .map(|_| radar::scene_sample(&cfg, &dict, a.k, (a.min_scatterers, a.max_scatterers), &mut rng))
        .collect::<adablock::Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let mut w = BufWriter::new(File::create(out.join(SAMPLES_FILE))?);
    radar::write_samples(&samples, dict.partition(), dict.rows(), &mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(out.join(DICTIONARY_FILE))?);
    radar::write_matrix(dict.matrix(), &mut w)?;
    w.flush()?;
    eprintln!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<(RadarConfig, BlockDictionary, Vec<Sample>)> {
    let cfg: RadarConfig = serde_json::from_str(
        &fs::read_to_string(dir.join(CONFIG_FILE)).with_context(|| format!("reading {}", dir.display()))?,
    )?;
    let dict = radar::dictionary(&cfg)?;
    let (samples, part, n) =
        radar::read_samples(BufReader::new(File::open(dir.join(SAMPLES_FILE))?), cfg.noise_sigma_w)?;
    if part != dict.partition() || n != dict.rows() {
        bail!("samples in {} do not match its radar config", dir.display());
    }
    Ok((cfg, dict, samples))
}

fn solve(a: &SolveArgs, out: &Path) -> Result<()> {
    let (_, dict, samples) = load_dataset(&a.dataset)?;
    let sample = samples
        .get(a.sample)
        .with_context(|| format!("sample {} out of range ({} samples)", a.sample, samples.len()))?;
    let z = dict.apply_adjoint(&sample.y.y)?;
    let (kind, peak) = match a.method {
        SolverArg::Ista => (SolverKind::Ista, z.iter().map(|v| v.norm()).fold(0.0, f64::max)),
        SolverArg::BlockIsta => (
            SolverKind::BlockIsta,
            z.chunks(dict.partition().block_len()).map(linalg::norm2).fold(0.0, f64::max),
        ),
    };
    let cfg = IterativeConfig::new(a.lambda_fraction * peak, a.iterations);
    let (_, trace) = solvers::solve(kind, &sample.y, &dict, &cfg, Some(&sample.x_true))?;
    let mut csv = String::from("iteration,nmse,objective\n");
    for (i, (n, o)) in trace.per_iter_nmse.iter().zip(&trace.per_iter_objective).enumerate() {
        csv.push_str(&format!("{},{n},{o}\n", i + 1));
    }
    fs::create_dir_all(out)?;
    let path = out.join(format!("solve_{}.csv", kind.name()));
    fs::write(&path, csv)?;
    eprintln!(
        "{}: {} iterations, final NMSE {:.4e} -> {}",
        kind.name(),
        trace.iterations_run,
        trace.per_iter_nmse.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn train(a: &TrainArgs, seed: u64, out: &Path) -> Result<()> {
    let (_, dict, samples) = load_dataset(&a.dataset)?;
    if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
        bail!("--val-fraction must lie in (0, 1)");
    }
    let n_val = ((samples.len() as f64 * a.val_fraction).round() as usize).max(1);
    if n_val >= samples.len() {
        bail!("dataset too small to split off {n_val} validation samples");
    }
    let (val, train) = samples.split_at(n_val);
    let kind = NetworkKind::from(a.kind);
    let cfg = TrainingConfig {
        n_train: train.len(),
        n_val,
        n_test: 1,
        lr0: a.lr0,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed,
        ..TrainingConfig::default()
    };
    let gamma = match a.gamma {
        Some(g) => g,
        None => 1.0 / ops::lipschitz_constant(&dict)?,
    };
    let theta = training::calibrate_initial_threshold(kind, &dict, val, gamma)?;
    let mut init = NetworkParams::init_from_dictionary(kind, &dict, a.layers, theta)?;
    if !init.gammas.is_empty() {
        init.gammas = vec![gamma; a.layers];
    }
    let data = Dataset {
        train: train.to_vec(),
        val: val.to_vec(),
        test: val[..1].to_vec(),
        dictionary: dict,
        config: cfg.clone(),
    };
    let (params, log) = training::train(init, &data, &cfg)?;
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("network.abln"))?);
    params.write_binary(&mut w)?;
    w.flush()?;
    fs::write(out.join("train_log.csv"), log.to_csv())?;
    eprintln!(
        "{}: validation NMSE {:.4} -> {:.4}",
        kind.name(),
        log.initial_val_nmse,
        log.best_val_nmse
    );
    Ok(())
}

fn infer(a: &InferArgs, out: &Path) -> Result<()> {
    let params = NetworkParams::read_binary(BufReader::new(
        File::open(&a.checkpoint).with_context(|| format!("opening {}", a.checkpoint.display()))?,
    ))?;
    let (_, dict, samples) = load_dataset(&a.dataset)?;
    let mut sums = vec![0.0; params.layers()];
    for s in &samples {
        let (_, trace) = networks::infer(&params, &s.y, &dict, Some(&s.x_true))?;
        for (acc, v) in sums.iter_mut().zip(&trace.per_iter_nmse) {
            *acc += v;
        }
    }
    let mut csv = String::from("layer,nmse\n");
    for (t, v) in sums.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", t + 1, v / samples.len() as f64));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("infer.csv"), csv)?;
    eprintln!(
        "mean NMSE after {} layers: {:.4e}",
        params.layers(),
        sums.last().copied().unwrap_or(f64::NAN) / samples.len() as f64
    );
    Ok(())
}

fn theory_check(a: &TheoryArgs, seed: u64, out: &Path) -> Result<()> {
    let spec = ExperimentSpec {
        name: "theory".into(),
        seed,
        trials: a.trials,
        theory: TheorySpec {
            measurements: a.measurements,
            num_blocks: a.blocks,
            block_len: a.block_len,
            perturbation: a.perturbation,
            s: a.s,
            sigma_w: a.sigma_w,
            layers: a.layers,
            ..TheorySpec::default()
        },
        ..ExperimentSpec::default()
    };
    let report = experiments::run_theory_report(&spec)?;
    let v = &report.verification;
    eprintln!(
        "block condition margin {:.4}; containment {:.3}; max bound ratio {:.4}; c1 {:.4}",
        report.block_condition.margin, v.containment_rate, v.max_bound_ratio, v.c1
    );
    fs::create_dir_all(out)?;
    fs::write(out.join("theory.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}
