use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use capt_bank::ConfusionBank;
use capt_semantic::ExternalPrompts;
use capt_trainer::{
    default_bank, evaluate, noise_ablation, noise_csv, read_report, read_run_config, run_experiment_with_prompts, sweep, sweep_csv,
    write_run_dir, ModelParams, Result, RunConfig, Split, SweepParam, TrainConfig, TrainError,
};
use capt_world::{generate_world, World, WorldSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "capt", about = "Confusion-aware prompt tuning on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world and save it (plus a .json spec sidecar).
    GenWorld {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON world spec; missing fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "world.bin")]
        out: PathBuf,
    },
    /// Build the confusion bank from the base training samples.
    BuildBank {
        #[command(flatten)]
        inputs: WorldArg,
        #[arg(long, default_value_t = 0.07)]
        tau: f64,
        #[arg(long, default_value = "bank.bin")]
        out: PathBuf,
    },
    /// Train, evaluate and write a run directory.
    Train {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a run directory's checkpoint (or a checkpoint file).
    Eval {
        #[command(flatten)]
        inputs: WorldArg,
        #[arg(long, required_unless_present = "checkpoint")]
        rundir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Both)]
        split: SplitArg,
    },
    /// Print a run's report; without --run, train in memory and print it.
    Report {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        rundir: Option<PathBuf>,
        /// Print the full JSON instead of the summary line.
        #[arg(long)]
        json: bool,
    },
    /// Retrain over a list of values of one parameter.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain with Gaussian noise on the representative features.
    Noise {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1")]
        levels: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct WorldArg {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Saved world; generated from default settings and --seed when absent.
    #[arg(long)]
    world: Option<PathBuf>,
}

#[derive(Args)]
struct Inputs {
    #[command(flatten)]
    world: WorldArg,
    /// Saved bank; built from the world when absent.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// JSON training config; missing fields take defaults. --seed wins.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON file of externally written pair prompts.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Base,
    Novel,
    Both,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_world(arg: &WorldArg) -> Result<World> {
    match &arg.world {
        Some(p) => Ok(World::load(p)?),
        None => Ok(generate_world(&WorldSpec {
            seed: arg.seed,
            ..WorldSpec::default()
        })?),
    }
}

struct Loaded {
    world: World,
    bank: ConfusionBank,
    cfg: TrainConfig,
    prompts: Option<ExternalPrompts>,
    run: RunConfig,
}

fn load_inputs(inputs: &Inputs) -> Result<Loaded> {
    let world = load_world(&inputs.world)?;
    let mut cfg: TrainConfig = match &inputs.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(io_err(p))?)?,
        None => TrainConfig::default(),
    };
    cfg.seed = inputs.world.seed;
    cfg.validate()?;
    let bank = match &inputs.bank {
        Some(p) => ConfusionBank::load(p)?,
        None => default_bank(&world, cfg.seed, cfg.tau)?,
    };
    let prompts = inputs.prompts.as_deref().map(ExternalPrompts::load).transpose()?;
    let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let run = RunConfig {
        world: show(&inputs.world.world),
        bank: show(&inputs.bank),
        train: cfg.clone(),
    };
    Ok(Loaded {
        world,
        bank,
        cfg,
        prompts,
        run,
    })
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(io_err(p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld { seed, spec, out } => {
            let mut s: WorldSpec = match &spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(io_err(p))?)?,
                None => WorldSpec::default(),
            };
            s.seed = seed;
            let world = generate_world(&s)?;
            world.save(&out)?;
            println!(
                "world: {} categories ({} base, {} novel), {} samples, encoder {}",
                world.num_categories(),
                world.base.len(),
                world.novel.len(),
                world.samples.len(),
                world.encoder_checksum()
            );
        }
        Command::BuildBank { inputs, tau, out } => {
            let world = load_world(&inputs)?;
            let bank = default_bank(&world, inputs.seed, tau)?;
            bank.save(&out)?;
            println!("bank: {} records, checksum {}", bank.len(), bank.checksum());
        }
        Command::Train { inputs, out } => {
            let l = load_inputs(&inputs)?;
            let start = Instant::now();
            let (trained, report) = run_experiment_with_prompts(&l.world, &l.bank, &l.cfg, l.prompts.as_ref())?;
            write_run_dir(&out, &l.run, &trained.model, &report)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", report.summary());
            println!("wrote {} in {:.1}s", out.display(), start.elapsed().as_secs_f64());
        }
        Command::Eval {
            inputs,
            rundir,
            checkpoint,
            split,
        } => {
            let mut world_arg = inputs;
            if let Some(dir) = &rundir {
                let run = read_run_config(&dir.join("config.json"))?;
                if world_arg.world.is_none() {
                    world_arg.world = run.world.map(PathBuf::from);
                    world_arg.seed = run.train.seed;
                }
            }
            let world = load_world(&world_arg)?;
            let path = match (checkpoint, rundir) {
                (Some(p), _) => p,
                (None, Some(dir)) => dir.join("checkpoint.bin"),
                (None, None) => return Err(TrainError::Config("eval needs --rundir or --checkpoint".into())),
            };
            let model = ModelParams::load(&path)?;
            let split = match split {
                SplitArg::Base => Split::Base,
                SplitArg::Novel => Split::Novel,
                SplitArg::Both => Split::Both,
            };
            let acc = evaluate(&world, &model, split)?;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
            println!("base {} novel {} HM {}", show(acc.base), show(acc.novel), show(acc.hm()));
        }
        Command::Report { inputs, rundir, json } => {
            let report = match rundir {
                Some(dir) => read_report(&dir.join("report.json"))?,
                None => {
                    let l = load_inputs(&inputs)?;
                    run_experiment_with_prompts(&l.world, &l.bank, &l.cfg, l.prompts.as_ref())?.1
                }
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{}", report.summary());
            }
        }
        Command::Sweep {
            inputs,
            param,
            values,
            out,
        } => {
            let param: SweepParam = param.parse()?;
            let l = load_inputs(&inputs)?;
            let rows = sweep(&l.world, &l.bank, &l.cfg, param, &values)?;
            write_or_print(&out, &sweep_csv(&rows))?;
        }
        Command::Noise { inputs, levels, out } => {
            let l = load_inputs(&inputs)?;
            let rows = noise_ablation(&l.world, &l.bank, &l.cfg, &levels)?;
            write_or_print(&out, &noise_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
