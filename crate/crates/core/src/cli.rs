//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error (including a failed oracle check).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::check::{sampler_moments, score_error};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::io::{export_pgm, load_checkpoint, read_dataset, read_tensor, save_checkpoint, write_dataset, write_tensor};
use crate::metrics::{eval_report, SamplerSynthesizer};
use crate::modality::{enumerate_partitions_with, ModalityPartition, ModalitySet};
use crate::oracle::{GaussianWorld, ShapeWorld};
use crate::sampler::{generate, NetScore, OracleScore, ScoreSource};
use crate::tensor::Tensor;
use crate::train::TrainState;

#[derive(Parser, Debug)]
#[command(name = "mmscore", version, about = "Conditional score-based synthesis of missing modalities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for all randomness of this command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum World {
    Gaussian3,
    Gaussian2,
    Shapes,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "gaussian3")]
        world: World,
        /// Gaussian world description; overrides `--world`.
        #[arg(long)]
        world_file: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Image size of the shapes world.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or resume training) a score network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Total number of steps to reach.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "model.mmck")]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the loss every this many steps.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Complete missing modalities by reverse-SDE sampling.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use the closed-form score of this Gaussian world file.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Subjects `[N, |C|, H, W]` or one subject `[|C|, H, W]`.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated modalities to synthesize.
        #[arg(long)]
        missing: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// With more than one draw, write the pixelwise std here.
        #[arg(long)]
        std_out: Option<PathBuf>,
        #[arg(long)]
        no_final_noise: bool,
        /// Also write every output channel as a PGM image into this directory.
        #[arg(long)]
        pgm_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset and write a CSV report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate only this partition.
        #[arg(long, conflicts_with = "all_partitions")]
        missing: Option<String>,
        /// Evaluate every partition instead of each single missing modality.
        #[arg(long)]
        all_partitions: bool,
    },
    /// Compare sampling (and optionally a trained network) with the closed
    /// forms of a Gaussian world.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world_file: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        #[arg(long)]
        steps: Option<usize>,
        /// Value of every conditional entry.
        #[arg(long, default_value_t = 1.0)]
        b: f64,
        #[arg(long, default_value_t = 0.02)]
        oracle_tol: f64,
        #[arg(long, default_value_t = 0.05)]
        net_tol: f64,
        #[arg(long, default_value_t = 0.15)]
        score_tol: f64,
        #[arg(long, default_value_t = 0.02)]
        ks_tol: f64,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn build_config(base: Config, common: &Common) -> Result<Config> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_world(path: &Path) -> Result<GaussianWorld> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GaussianWorld::from_text(&text)
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::MakeData {
            common,
            world,
            world_file,
            n,
            size,
            out,
        } => {
            let seed = common.seed.unwrap_or(0);
            let data = if let Some(path) = world_file {
                load_world(&path)?.sample_joint(n, seed)?
            } else {
                match world {
                    World::Gaussian3 => GaussianWorld::correlated3().sample_joint(n, seed)?,
                    World::Gaussian2 => GaussianWorld::bivariate(0.8)?.sample_joint(n, seed)?,
                    World::Shapes => ShapeWorld::new(size, 3)?.make_dataset(n, seed)?.0,
                }
            };
            write_dataset(&out, &data)?;
            println!("wrote {} subjects {:?} to {}", data.len(), data.images.shape(), out.display());
            Ok(0)
        }
        Command::Train {
            common,
            data,
            steps,
            out,
            resume,
            log_every,
        } => {
            let dataset = read_dataset(&data)?;
            let mut state = match resume {
                Some(path) => {
                    let mut st = load_checkpoint(&path)?;
                    st.config = build_config(st.config.clone(), &common)?;
                    st
                }
                None => {
                    let mut cfg = build_config(Config::default(), &common)?;
                    if let Some(s) = common.seed {
                        cfg.train.seed = s;
                    }
                    TrainState::new(cfg, dataset.modalities.clone())?
                }
            };
            let until = steps.unwrap_or(state.config.train.steps);
            let every = log_every.max(1);
            let losses = state.train_until(&dataset, until, |r| {
                if (r.step + 1) % every == 0 {
                    println!("step {} loss {:.6} partition {}", r.step + 1, r.loss, r.partition);
                }
            })?;
            save_checkpoint(&state, &out)?;
            println!(
                "trained {} steps (now at {}), checkpoint {}",
                losses.len(),
                state.step,
                out.display()
            );
            Ok(0)
        }
        Command::Sample {
            common,
            checkpoint,
            oracle,
            input,
            missing,
            steps,
            draws,
            out,
            std_out,
            no_final_noise,
            pgm_dir,
        } => {
            let (ckpt, world) = match (&checkpoint, &oracle) {
                (Some(path), _) => (Some(load_checkpoint(path)?), None),
                (None, Some(path)) => (None, Some(load_world(path)?)),
                (None, None) => return Err(Error::Config("either --checkpoint or --oracle is required".into())),
            };
            let base = ckpt.as_ref().map_or_else(Config::default, |c| c.config.clone());
            let mut cfg = build_config(base, &common)?;
            if let Some(s) = common.seed {
                cfg.sample.seed = s;
            }
            if let Some(s) = steps {
                cfg.sample.steps = s;
            }
            if let Some(d) = draws {
                cfg.sample.draws = d;
            }
            if no_final_noise {
                cfg.sample.final_noise = false;
            }
            cfg.validate()?;
            let net;
            let orc;
            let source: &dyn ScoreSource = match (&ckpt, &world) {
                (Some(st), _) => {
                    net = NetScore {
                        params: &st.ema,
                        modalities: &st.modalities,
                        schedule: cfg.sde,
                    };
                    &net
                }
                (None, Some(w)) => {
                    orc = OracleScore {
                        world: w,
                        schedule: cfg.sde,
                    };
                    &orc
                }
                _ => unreachable!("one source is always loaded"),
            };
            let modalities = source.modalities().clone();
            let partition = modalities.partition_from_missing(&missing, cfg.allow_unconditional)?;
            let subjects = as_batch(read_tensor(&input)?)?;
            let (mean, std) = sample_subjects(source, &subjects, &partition, &cfg)?;
            write_tensor(&out, &mean)?;
            if let Some(path) = &std_out {
                match &std {
                    Some(s) => write_tensor(path, s)?,
                    None => return Err(Error::Config("--std-out needs --draws >= 2".into())),
                }
            }
            if let Some(dir) = &pgm_dir {
                write_pgms(dir, &mean, &modalities)?;
            }
            println!(
                "synthesized {} for {} subject(s), {} draw(s) each -> {}",
                partition.label(&modalities),
                subjects.dim(0),
                cfg.sample.draws,
                out.display()
            );
            Ok(0)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            missing,
            all_partitions,
        } => {
            let st = load_checkpoint(&checkpoint)?;
            let mut cfg = build_config(st.config.clone(), &common)?;
            if let Some(s) = common.seed {
                cfg.sample.seed = s;
            }
            let dataset = read_dataset(&data)?;
            let count = st.modalities.len();
            let partitions: Vec<ModalityPartition> = match (&missing, all_partitions) {
                (Some(m), _) => vec![st.modalities.partition_from_missing(m, cfg.allow_unconditional)?],
                (None, true) => enumerate_partitions_with(count, cfg.allow_unconditional)?,
                (None, false) => (0..count)
                    .map(|i| ModalityPartition::new(count, &[i], false))
                    .collect::<Result<_>>()?,
            };
            let source = NetScore {
                params: &st.ema,
                modalities: &st.modalities,
                schedule: cfg.sde,
            };
            let synth = SamplerSynthesizer {
                source: &source,
                config: cfg.sample.clone(),
            };
            let report = eval_report(&synth, &dataset, &partitions, cfg.sample.seed)?;
            let mut comments = vec![
                format!("checkpoint {} (step {})", checkpoint.display(), st.step),
                format!("data {}", data.display()),
                "psnr = 20*log10(MAX_I/sqrt(MSE)) with MAX_I = 1; inf when MSE = 0".to_string(),
                "ssim as a fraction in [-1, 1]; mae on the [0, 1] intensity scale".to_string(),
            ];
            comments.push(cfg.to_text());
            fs::write(&out, report.to_csv(&comments)).map_err(|e| Error::io(&out, e))?;
            let failed = report.rows.iter().filter(|r| r.failure.is_some()).count();
            println!("{} rows ({failed} failed) -> {}", report.rows.len(), out.display());
            Ok(0)
        }
        Command::OracleCheck {
            common,
            world_file,
            checkpoint,
            draws,
            steps,
            b,
            oracle_tol,
            net_tol,
            score_tol,
            ks_tol,
        } => {
            let world = match &world_file {
                Some(p) => load_world(p)?,
                None => GaussianWorld::correlated3(),
            };
            let ckpt = checkpoint.as_ref().map(load_checkpoint).transpose()?;
            let base = ckpt.as_ref().map_or_else(Config::default, |c| c.config.clone());
            let mut cfg = build_config(base, &common)?;
            if let Some(s) = steps {
                cfg.sample.steps = s;
            }
            let seed = common.seed.unwrap_or(cfg.sample.seed);
            oracle_check(&world, ckpt.as_ref(), &cfg, draws, seed, b, [oracle_tol, net_tol, score_tol, ks_tol])
        }
    }
}

fn as_batch(t: Tensor) -> Result<Tensor> {
    match t.ndim() {
        4 => Ok(t),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(&shape)
        }
        _ => Err(Error::shape(t.shape(), "expected [N, |C|, H, W] or [|C|, H, W]")),
    }
}

/// One draw per subject, or the mean and std over `draws` per subject. Draw
/// `d` of subject `i` uses seed `seed + i·draws + d`.
fn sample_subjects(
    source: &dyn ScoreSource,
    subjects: &Tensor,
    partition: &ModalityPartition,
    cfg: &Config,
) -> Result<(Tensor, Option<Tensor>)> {
    let draws = cfg.sample.draws;
    let n = subjects.dim(0);
    let per = subjects.len() / n;
    let mut batch = Vec::with_capacity(n * draws * per);
    for i in 0..n {
        for _ in 0..draws {
            batch.extend_from_slice(&subjects.data()[i * per..(i + 1) * per]);
        }
    }
    let mut shape = subjects.shape().to_vec();
    shape[0] = n * draws;
    let out = generate(source, &Tensor::new(&shape, batch)?, partition, &cfg.sample, cfg.sample.seed)?;
    if draws == 1 {
        return Ok((out, None));
    }
    let mut mean = vec![0.0; n * per];
    let mut std = vec![0.0; n * per];
    for i in 0..n {
        let block = &out.data()[i * draws * per..(i + 1) * draws * per];
        for p in 0..per {
            let m = (0..draws).map(|d| block[d * per + p]).sum::<f64>() / draws as f64;
            let v = (0..draws).map(|d| (block[d * per + p] - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
            mean[i * per + p] = m;
            std[i * per + p] = v.sqrt();
        }
    }
    Ok((
        Tensor::new(subjects.shape(), mean)?,
        Some(Tensor::new(subjects.shape(), std)?),
    ))
}

fn write_pgms(dir: &Path, images: &Tensor, modalities: &ModalitySet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [n, c, h, w] = *images.shape() else {
        return Err(Error::shape(images.shape(), "expected [N, |C|, H, W]"));
    };
    for s in 0..n {
        for k in 0..c {
            let base = (s * c + k) * h * w;
            let chan = Tensor::new(&[h, w], images.data()[base..base + h * w].to_vec())?;
            let path = dir.join(format!("s{s}_{}.pgm", modalities.names()[k]));
            let clamped = export_pgm(&chan, &path)?;
            if clamped > 0 {
                eprintln!("warning: clamped {clamped} pixel(s) outside [0, 1] in {}", path.display());
            }
        }
    }
    Ok(())
}

fn oracle_check(
    world: &GaussianWorld,
    ckpt: Option<&TrainState>,
    cfg: &Config,
    draws: usize,
    seed: u64,
    b: f64,
    [oracle_tol, net_tol, score_tol, ks_tol]: [f64; 4],
) -> Result<i32> {
    let count = world.modalities().len();
    let partitions = enumerate_partitions_with(count, cfg.allow_unconditional)?;
    let mut failures = 0;
    let mut line = |ok: bool, text: String| {
        if !ok {
            failures += 1;
        }
        println!("{} {text}", if ok { "PASS" } else { "FAIL" });
    };
    let oracle = OracleScore {
        world,
        schedule: cfg.sde,
    };
    println!(
        "# world {:?}, T = {}, {draws} draws, b = {b}",
        world.modalities().names(),
        cfg.sample.steps
    );
    for p in &partitions {
        let bv = vec![b; p.cond().len() * world.dim()];
        let r = sampler_moments(&oracle, world, p, &bv, &cfg.sample, draws, seed)?;
        let ok = r.mean_err() <= oracle_tol && r.cov_err() <= oracle_tol && r.ks < ks_tol;
        line(
            ok,
            format!(
                "oracle sampler {}: mean err {:.4}, cov err {:.4}, KS {:.4}",
                p.label(world.modalities()),
                r.mean_err(),
                r.cov_err(),
                r.ks
            ),
        );
    }
    if let Some(st) = ckpt {
        if &st.modalities != world.modalities() {
            return Err(Error::Contract("checkpoint modalities differ from the world's".into()));
        }
        let net = NetScore {
            params: &st.ema,
            modalities: &st.modalities,
            schedule: cfg.sde,
        };
        for p in &partitions {
            let err = score_error(&st.ema, world, p, &cfg.sde, 1000, seed)?;
            line(
                err <= score_tol,
                format!("score error {}: relative L2 {:.4}", p.label(world.modalities()), err),
            );
            let bv = vec![b; p.cond().len() * world.dim()];
            let r = sampler_moments(&net, world, p, &bv, &cfg.sample, draws, seed)?;
            line(
                r.mean_err() <= net_tol && r.cov_err() <= net_tol,
                format!(
                    "network sampler {}: mean err {:.4}, cov err {:.4}",
                    p.label(world.modalities()),
                    r.mean_err(),
                    r.cov_err()
                ),
            );
        }
    }
    println!("{failures} check(s) failed");
    Ok(if failures == 0 { 0 } else { 2 })
}
