use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gradleak::harness::{parse_config, run_experiment, HarnessError, Mode};

/// Federated-learning gradient inversion experiments.
#[derive(Debug, Parser)]
#[command(name = "gradleak", version)]
struct Cli {
    /// train | attack | oracle | divergence | sweep
    mode: String,
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Trial count; overrides `trials` in the config.
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn run(cli: Cli) -> Result<PathBuf, HarnessError> {
    let mode: Mode = cli.mode.parse()?;
    let mut spec = parse_config(&cli.config)?;
    if let Some(m) = spec.mode {
        if m != mode {
            return Err(HarnessError::Validation(format!(
                "mode: config says `{}` but the command line says `{}`",
                m.name(),
                mode.name()
            )));
        }
    }
    spec.mode = Some(mode);
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(t) = cli.trials {
        spec.trials = t;
    }
    spec.validate()?;
    let out = cli
        .out
        .or_else(|| spec.out.clone())
        .unwrap_or_else(|| PathBuf::from("gradleak-out").join(mode.name()));
    run_experiment(&spec, &out, cli.threads)?;
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("wrote {}", out.join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gradleak: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
