use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fairda::data::{builtin_experiments, data_root, find_experiment};
use fairda::experiment::{assemble, run_seeds, run_sweep, TrainConfig, Variant};
use fairda::report::{emit_report, emit_sweep, render_table};

#[derive(Parser)]
#[command(name = "fairda", version, about = "Fair classification under unknown target attributes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment over several seeds.
    Run(RunArgs),
    /// Run an alpha-by-beta grid.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment id (1-4).
    #[arg(long = "exp")]
    experiment: Option<u32>,
    /// full, no-da, no-debias or vanilla.
    #[arg(long)]
    variant: Option<Variant>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for reports.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Dataset root (defaults to $FAIRDA_DATA_DIR, then ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    betas: Vec<f64>,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(e) = self.experiment {
            c.experiment = e;
        }
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(m) = self.max_epochs {
            c.max_epochs = m;
        }
        c.output = Some(self.out.clone());
        Ok(c)
    }

    fn data_root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(data_root)
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = args.common.config()?;
    if let Some(a) = args.alpha {
        config.alpha = a;
    }
    if let Some(b) = args.beta {
        config.beta = b;
    }
    config.validate()?;
    let spec = find_experiment(&builtin_experiments(), config.experiment)?;
    let root = args.common.data_root();
    let tables = spec
        .load_tables(&root)
        .with_context(|| format!("loading experiment {} from {}", spec.id, root.display()))?;

    let start = Instant::now();
    let outcomes = run_seeds(&tables, &spec.schema(), &config)?;
    let record = assemble(&spec.name, &config, &outcomes, start.elapsed().as_secs_f64())?;

    let out = &args.common.out;
    let (json, _) = emit_report(&record, out)?;
    let stem = format!("exp{}-{}", config.experiment, config.variant);
    for o in &outcomes {
        let seed = o.record.seed;
        o.prediction
            .write_csv(out.join(format!("{stem}-seed{seed}-predictions.csv")))?;
        if let Some(est) = &o.estimate {
            est.write_csv(out.join(format!("{stem}-seed{seed}-attributes.csv")))?;
        }
    }
    print!("{}", render_table(&record));
    eprintln!(
        "wrote {} ({:.1}s)",
        json.display(),
        record.wall_clock_secs
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let config = args.common.config()?;
    let root = args.common.data_root();
    let result = run_sweep(&config, &args.alphas, &args.betas, Path::new(&root))?;
    let paths = emit_sweep(&result, config.experiment, &args.common.out)?;
    print!("{}", result.matrix_csv(fairda::experiment::Metric::DpGap));
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
