use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use greybox_cli::commands::{self, Context};
use greybox_cli::config::RunConfig;
use greybox_cli::CliError;

#[derive(Parser)]
#[command(name = "greybox", version, about = "Greybox optimal control of a dephasing qubit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides GREYBOX_SEED and the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sequential reductions and zero wall times: byte-reproducible outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Noise coupling strength g.
    #[arg(long, global = true)]
    g: Option<f64>,
    /// Noise kind: rtn or ou.
    #[arg(long, global = true)]
    kind: Option<greybox::noise::NoiseKind>,
    /// Noise rate γ.
    #[arg(long, global = true)]
    gamma: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample noise trajectories and write autocorrelation and PSD tables.
    Spectrum {
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Generate a Monte Carlo labelled dataset.
    GenData {
        /// Dataset CSV path (default: <out>/data.csv).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        /// Noise realizations per label.
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Train the greybox model on a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Design pulses through a trained model and verify them.
    Optimize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "all_gates")]
        gate: Option<String>,
        #[arg(long)]
        all_gates: bool,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Simulator fidelities of a pulse file.
    Verify {
        #[arg(long)]
        pulses: PathBuf,
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// gen-data → train → optimize → verify for each coupling.
    Sweep {
        /// Comma-separated couplings.
        #[arg(long, value_delimiter = ',')]
        g_list: Option<Vec<f64>>,
    },
}

fn resolve(global: &Global) -> Result<RunConfig, CliError> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut seed = cfg.seed;
    if let Ok(s) = std::env::var("GREYBOX_SEED") {
        seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("GREYBOX_SEED={s:?} is not an unsigned integer")))?;
    }
    if let Some(s) = global.seed {
        seed = s;
    }
    cfg.apply_seed(seed);
    if let Some(o) = &global.out {
        cfg.output_dir = o.clone();
    }
    if let Some(g) = global.g {
        cfg.noise.g = g;
    }
    if let Some(k) = global.kind {
        cfg.noise.kind = k;
    }
    if let Some(gm) = global.gamma {
        cfg.noise.gamma = gm;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve(&cli.global)?;
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let ctx = Context {
        deterministic: cli.global.deterministic,
        force: cli.global.force,
    };
    match cli.command {
        Command::Spectrum { trajectories } => {
            if let Some(n) = trajectories {
                cfg.spectrum.trajectories = n;
            }
            cfg.validate()?;
            commands::spectrum(&cfg, &ctx).map(|_| ())
        }
        Command::GenData {
            data,
            train,
            test,
            realizations,
        } => {
            if let Some(n) = train {
                cfg.dataset.train = n;
            }
            if let Some(n) = test {
                cfg.dataset.test = n;
            }
            if let Some(n) = realizations {
                cfg.dataset.realizations = n;
            }
            cfg.validate()?;
            let path = data.unwrap_or_else(|| cfg.output_dir.join("data.csv"));
            commands::gen_data(&cfg, &ctx, &path).map(|_| ())
        }
        Command::Train { data, epochs, resume } => {
            if let Some(n) = epochs {
                cfg.model.epochs = n;
            }
            cfg.validate()?;
            let path = data.unwrap_or_else(|| cfg.output_dir.join("data.csv"));
            commands::train(&cfg, &ctx, &path, resume.as_deref()).map(|_| ())
        }
        Command::Optimize {
            checkpoint,
            gate,
            all_gates,
            restarts,
            iterations,
        } => {
            if let Some(n) = restarts {
                cfg.optimize.restarts = n;
            }
            if let Some(n) = iterations {
                cfg.optimize.iterations = n;
            }
            if let Some(g) = gate {
                cfg.optimize.gate = g;
            }
            cfg.validate()?;
            let path = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoint.json"));
            commands::optimize(&cfg, &ctx, &path, all_gates).map(|_| ())
        }
        Command::Verify { pulses, realizations } => {
            if let Some(n) = realizations {
                cfg.optimize.verify_realizations = n;
            }
            cfg.validate()?;
            commands::verify(&cfg, &ctx, &pulses)
        }
        Command::Sweep { g_list } => {
            if let Some(g) = g_list {
                cfg.sweep.g = g;
            }
            cfg.validate()?;
            commands::sweep(&cfg, &ctx).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
