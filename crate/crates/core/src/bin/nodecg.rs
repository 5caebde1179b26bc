use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nodecg::baseline::sgd_train;
use nodecg::config::{parse_entries, Method, RunConfig};
use nodecg::cost::LabeledSet;
use nodecg::datasets::{accuracy, DatasetKind, DatasetSpec, CLEAN_TEST_COUNT};
use nodecg::io::{self, Checkpoint, Extent};
use nodecg::ncg::{ncg_resume, EvalSets, TrainState};
use nodecg::ode::{SolverMode, SolverOptions};
use nodecg::Error;

#[derive(Parser)]
#[command(name = "nodecg", version, about = "Train and inspect neural ODE classifiers")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data set as CSV.
    Generate {
        #[arg(long, default_value = "moons")]
        kind: DatasetKind,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0.07)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pad to three dimensions.
        #[arg(long)]
        augment: bool,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Train with NCG (or the RMSProp baseline) and write a checkpoint and metrics.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a data set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Decision-boundary scores x2(T) - x1(T) on a grid.
    Boundary {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// x0,x1,y0,y1; defaults to the data bounding box padded by 0.5.
        #[arg(long, value_parser = parse_extent, allow_hyphen_values = true)]
        extent: Option<Extent>,
        /// Grid points per unit length.
        #[arg(long, default_value_t = 400.0)]
        resolution: f64,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Trajectories of clean points from each class at 101 times.
    Trajectories {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Points per class.
        #[arg(long, default_value_t = 25)]
        count: usize,
        #[arg(long, default_value = "moons")]
        kind: DatasetKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// W(t) and b(t) at the mesh nodes.
    ParamsExport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. --set train.epochs=3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    descent: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training data CSV; generated from the config when absent.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long)]
    noisy: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    metrics: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Data CSV; otherwise a set is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "moons")]
    kind: DatasetKind,
    #[arg(long, default_value_t = CLEAN_TEST_COUNT)]
    count: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1000)]
    data_seed: u64,
}

#[derive(Args)]
struct SolverArgs {
    /// adaptive, fixed (RK4 on the mesh) or euler.
    #[arg(long, default_value = "fixed")]
    solver: SolverMode,
    #[arg(long, default_value_t = nodecg::ode::DEFAULT_ABS_TOL)]
    abs_tol: f64,
    #[arg(long, default_value_t = nodecg::ode::DEFAULT_REL_TOL)]
    rel_tol: f64,
}

impl SolverArgs {
    fn options(&self) -> SolverOptions {
        SolverOptions { mode: self.solver, abs_tol: self.abs_tol, rel_tol: self.rel_tol }
    }
}

fn parse_extent(s: &str) -> Result<Extent, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("'{t}': {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x0, x1, y0, y1] => Ok(Extent { x0, x1, y0, y1 }),
        _ => Err("expected x0,x1,y0,y1".into()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create(path: &Path) -> nodecg::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| io::with_path(e, path))?))
}

fn load_set(path: &Path) -> nodecg::Result<LabeledSet> {
    io::read_dataset(File::open(path).map_err(|e| io::with_path(e, path))?)
}

impl DataArgs {
    fn load(&self, n_state: usize) -> nodecg::Result<LabeledSet> {
        match &self.data {
            Some(p) => load_set(p),
            None => DatasetSpec {
                kind: self.kind,
                count: self.count,
                noise_sigma: self.sigma,
                seed: self.data_seed,
                augmented: n_state == 3,
            }
            .generate(),
        }
    }
}

fn run(cmd: Command) -> nodecg::Result<()> {
    match cmd {
        Command::Generate { kind, count, sigma, seed, augment, out, force } => {
            if out.exists() && !force {
                return Err(Error::Invalid(format!("{} exists; pass --force to overwrite", out.display())));
            }
            let set = DatasetSpec { kind, count, noise_sigma: sigma, seed, augmented: augment }.generate()?;
            let mut w = create(&out)?;
            io::write_dataset(&set, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Train(args) => train(args),
        Command::Eval { checkpoint, data, solver } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let set = data.load(ckpt.n_state())?;
            let acc = accuracy(&ckpt.params, &set, &solver.options())?;
            println!("accuracy {acc}");
            Ok(())
        }
        Command::Boundary { checkpoint, out, extent, resolution, data, solver } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let extent = match extent {
                Some(e) => e,
                None => Extent::around(&data.load(ckpt.n_state())?, 0.5)?,
            };
            let rows = io::boundary_scores(&ckpt.params, &extent, resolution, &solver.options())?;
            let mut w = create(&out)?;
            io::write_boundary(&rows, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Trajectories { checkpoint, out, count, kind, seed, solver } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let set = DatasetSpec { kind, count: 2 * count, noise_sigma: 0.0, seed, augmented: ckpt.n_state() == 3 }
                .generate()?;
            let mut w = create(&out)?;
            io::write_trajectories(&ckpt.params, &set, 101, &solver.options(), &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::ParamsExport { checkpoint, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut w = create(&out)?;
            io::write_params(&ckpt.params, &mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn train(args: TrainArgs) -> nodecg::Result<()> {
    let mut entries = match &args.config {
        Some(p) => parse_entries(&fs::read_to_string(p).map_err(|e| io::with_path(e, p))?)?,
        None => Vec::new(),
    };
    let mut errs = Vec::new();
    for s in &args.set {
        match s.split_once('=') {
            Some((k, v)) => entries.push((k.trim().to_string(), v.trim().to_string())),
            None => errs.push(format!("--set expects KEY=VALUE, got '{s}'")),
        }
    }
    if let Some(e) = args.epochs {
        entries.push(("train.epochs".into(), e.to_string()));
    }
    if let Some(d) = &args.descent {
        entries.push(("train.descent".into(), d.clone()));
    }
    if let Some(s) = args.seed {
        entries.push(("run.seed".into(), s.to_string()));
    }
    let config = match RunConfig::from_entries(&entries) {
        Ok(c) if errs.is_empty() => c,
        Ok(_) => return Err(Error::Config(errs)),
        Err(Error::Config(list)) => {
            errs.extend(list);
            return Err(Error::Config(errs));
        }
        Err(e) => return Err(e),
    };

    let spec = |s: DatasetSpec| s.augmented(config.augment).generate();
    let seed = config.dataset_seed;
    let train_set = match &args.train {
        Some(p) => load_set(p)?,
        None => spec(DatasetSpec::train(config.kind, seed))?,
    };
    let clean = match &args.clean {
        Some(p) => load_set(p)?,
        None => spec(DatasetSpec::clean_test(config.kind, seed + 1000))?,
    };
    let noisy = match &args.noisy {
        Some(p) => load_set(p)?,
        None => spec(DatasetSpec::noisy_test(config.kind, seed + 2000))?,
    };
    let n = config.n_state();
    for (name, set) in [("training", &train_set), ("clean", &clean), ("noisy", &noisy)] {
        if set.n_state() != n {
            return Err(Error::Invalid(format!("{name} data has dimension {}, config expects {n}", set.n_state())));
        }
    }

    match config.method {
        Method::Ncg => {
            let tc = config.train_config();
            let state = match &args.resume {
                Some(p) => {
                    let c = Checkpoint::load(p)?;
                    if c.n_state() != n {
                        return Err(Error::Invalid("checkpoint dimension differs from the config".into()));
                    }
                    c.to_state()
                }
                None => TrainState::initial(&tc, n)?,
            };
            let sets = EvalSets { clean: Some(&clean), noisy: Some(&noisy) };
            let state = match ncg_resume(&tc, state, &train_set, &sets) {
                Ok(s) => s,
                Err(f) => {
                    if let Some(s) = &f.state {
                        let dump = args.checkpoint.with_extension("failed");
                        Checkpoint::from_state(s, config.weights, config.run_seed).save(&dump)?;
                        let mut w = create(&args.metrics)?;
                        io::write_metrics(&s.records, &s.evaluations, &mut w)?;
                        w.flush()?;
                        eprintln!("last good state written to {}", dump.display());
                    }
                    return Err(f.error);
                }
            };
            Checkpoint::from_state(&state, config.weights, config.run_seed).save(&args.checkpoint)?;
            let mut w = create(&args.metrics)?;
            io::write_metrics(&state.records, &state.evaluations, &mut w)?;
            w.flush()?;
            if let Some(best) = state.best_clean() {
                println!("best clean accuracy {best} at epoch {:.1}", state.best_clean_epoch().unwrap_or(0.0));
            }
        }
        Method::RmsProp => {
            if args.resume.is_some() {
                return Err(Error::Invalid("--resume is only supported for NCG training".into()));
            }
            let run = sgd_train(&config.sgd_config(), &train_set, Some(&clean), Some(&noisy))?;
            let params = run.net.to_trajectory()?;
            Checkpoint::new(params, config.weights, config.run_seed).save(&args.checkpoint)?;
            let mut w = create(&args.metrics)?;
            io::write_sgd_metrics(&run.records, &mut w)?;
            w.flush()?;
            if let Some(last) = run.records.last() {
                println!("final training accuracy {}", last.train_acc);
            }
        }
    }
    Ok(())
}
