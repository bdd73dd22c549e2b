//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ocdl::analysis::{
    correlations, run_sweep, summarize_correlations, trajdump, write_correlations_csv, write_sweep_csv,
    write_trajectory_csv, DumpTimes, SweepAxis, SweepSpec,
};
use ocdl::data::{generate_spirals, write_spirals_csv, SpiralSpec};
use ocdl::trainer::{gradient_check, load_datasets, train, Checkpoint, ExperimentKind, Setup, TrainConfig};
use ocdl::{Error, Executor};

#[derive(Parser, Debug)]
#[command(name = "ocdl", version, about = "Supervised learning by optimal control of ODE and delay systems")]
struct Cli {
    /// Experiment configuration file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, or output directory for `train`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (1 = sequential, 0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes metrics.csv and checkpoint.bin.
    Train,
    /// Evaluate a checkpoint on the test set.
    Eval(CheckpointArg),
    /// Train one model per grid cell and tabulate accuracies.
    Sweep {
        /// `name=v1,v2,...`; give once or twice.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
    },
    /// Compare adjoint gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        kind: Option<String>,
        /// Total time steps of the small instance.
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
    /// Generate a dataset.
    Gendata {
        /// Dataset name (only `spirals`).
        dataset: String,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 0.025)]
        noise: f64,
        #[arg(long, default_value_t = 1.5)]
        turns: f64,
    },
    /// Correlation values of a trained delay model on the test set.
    Correlations {
        #[command(flatten)]
        ck: CheckpointArg,
        #[arg(long, default_value_t = 500)]
        instances: usize,
    },
    /// Dump state trajectories of selected test samples.
    Trajdump {
        #[command(flatten)]
        ck: CheckpointArg,
        /// Comma-separated sample ids.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<usize>,
        /// Comma-separated times; every stored sample when omitted.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        times: Option<Vec<f64>>,
        /// Keep every n-th stored sample when `--times` is omitted.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Use the training set instead of the test set.
        #[arg(long)]
        train_set: bool,
    },
}

#[derive(Args, Debug)]
struct CheckpointArg {
    #[arg(long)]
    checkpoint: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_config(cli: &Cli) -> Result<TrainConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("--config is required for this command".into()))?;
    let mut c = TrainConfig::load(path).map_err(usage)?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(t) = cli.threads {
        c.threads = t;
    }
    Ok(c)
}

fn executor(threads: usize) -> Result<Executor, Failure> {
    Executor::from_threads(threads).map_err(usage)
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn load_checkpoint(path: &Path, config: &TrainConfig) -> Result<ocdl::trainer::Parameters, Failure> {
    Ok(Checkpoint::load(path, config)?.params)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train => {
            let mut c = load_config(&cli)?;
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.to_string()))?;
                c.metrics_path = Some(dir.join("metrics.csv"));
                c.checkpoint_path = Some(dir.join("checkpoint.bin"));
            }
            c.metrics_path.get_or_insert_with(|| PathBuf::from("metrics.csv"));
            c.checkpoint_path.get_or_insert_with(|| PathBuf::from("checkpoint.bin"));
            c.validate().map_err(usage)?;
            let exec = executor(c.threads)?;
            let (tr, te) = load_datasets(&c)?;
            let outcome = train(&c, &tr, &te, &exec)?;
            let last = outcome.log.last().expect("epochs >= 1");
            eprintln!(
                "trained {} epochs: train_loss {:.6} test_acc {:.4} (metrics {}, checkpoint {})",
                last.epoch,
                last.train_loss,
                last.test_acc,
                c.metrics_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                c.checkpoint_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            );
        }
        Command::Eval(ck) => {
            let c = load_config(&cli)?;
            let exec = executor(c.threads)?;
            let params = load_checkpoint(&ck.checkpoint, &c)?;
            let (_, te) = load_datasets(&c)?;
            let report = Setup::new(&c)?.evaluate(&exec, &params, &te)?;
            let mut w = output(&cli.out)?;
            writeln!(w, "split,samples,loss,accuracy,diverged").map_err(Error::from)?;
            writeln!(w, "test,{},{},{},{}", te.len(), report.loss, report.accuracy, report.diverged)
                .map_err(Error::from)?;
            w.flush().map_err(Error::from)?;
        }
        Command::Sweep { axes } => {
            let template = load_config(&cli)?;
            let axes = axes
                .iter()
                .map(|a| a.parse::<SweepAxis>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(usage)?;
            let spec = SweepSpec { axes, template };
            spec.validate().map_err(usage)?;
            let exec = executor(spec.template.threads)?;
            let rows = run_sweep(&spec, &exec)?;
            for r in &rows {
                if let Some(e) = &r.error {
                    eprintln!("cell {},{} failed: {e}", r.param1, r.param2);
                }
            }
            let mut w = output(&cli.out)?;
            write_sweep_csv(&rows, &mut w)?;
            w.flush().map_err(Error::from)?;
        }
        Command::Gradcheck {
            kind,
            steps,
            samples,
            epsilon,
        } => {
            let mut c = match (kind, &cli.config) {
                (Some(k), _) => {
                    let kind: ExperimentKind = k.parse().map_err(usage)?;
                    TrainConfig::small_instance(kind, *steps).map_err(usage)?
                }
                (None, Some(_)) => load_config(&cli)?,
                (None, None) => return Err(Failure::Usage("gradcheck needs --kind or --config".into())),
            };
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            let report = gradient_check(&c, *samples, *epsilon)?;
            let mut w = output(&cli.out)?;
            report.write_csv(&mut w)?;
            w.flush().map_err(Error::from)?;
        }
        Command::Gendata {
            dataset,
            per_class,
            noise,
            turns,
        } => {
            if dataset != "spirals" {
                return Err(Failure::Usage(format!("unknown dataset '{dataset}' (only 'spirals')")));
            }
            let spec = SpiralSpec {
                count_per_class: *per_class,
                noise_sd: *noise,
                turns: *turns,
            };
            let data = generate_spirals(spec, cli.seed.unwrap_or(1)).map_err(usage)?;
            let mut w = output(&cli.out)?;
            write_spirals_csv(&data, &mut w)?;
            w.flush().map_err(Error::from)?;
        }
        Command::Correlations { ck, instances } => {
            let c = load_config(&cli)?;
            if !c.kind.is_delay() {
                return Err(Failure::Usage(format!("correlations need a delay experiment, not {}", c.kind)));
            }
            let exec = executor(c.threads)?;
            let params = load_checkpoint(&ck.checkpoint, &c)?;
            let (_, te) = load_datasets(&c)?;
            let setup = Setup::new(&c)?;
            let records = correlations(&setup, &params, &te, *instances, &exec)?;
            let s = summarize_correlations(&records);
            eprintln!(
                "own class largest: {:.3}, median same: {:.4e}, median other: {:.4e}",
                s.own_class_largest, s.median_same, s.median_other
            );
            let mut w = output(&cli.out)?;
            write_correlations_csv(&records, &mut w)?;
            w.flush().map_err(Error::from)?;
        }
        Command::Trajdump {
            ck,
            samples,
            times,
            stride,
            train_set,
        } => {
            let c = load_config(&cli)?;
            let params = load_checkpoint(&ck.checkpoint, &c)?;
            let (tr, te) = load_datasets(&c)?;
            let data = if *train_set { tr } else { te };
            let times = match times {
                Some(ts) => DumpTimes::At(ts.clone()),
                None => DumpTimes::All { stride: *stride },
            };
            let rows = trajdump(&Setup::new(&c)?, &params, &data, samples, &times)?;
            let mut w = output(&cli.out)?;
            write_trajectory_csv(&rows, &mut w)?;
            w.flush().map_err(Error::from)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
