use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use modloc::harness::{self, SceneConfig, SweepRow};
use modloc::Error;

#[derive(Parser)]
#[command(name = "modloc", version, about = "Modular XL-MIMO near-field localization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Table1,
    Smoke,
}

#[derive(clap::Args)]
struct SceneArgs {
    /// TOML scene file; the preset is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table1")]
    preset: Preset,
    /// Master seed, overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Trials per point, overrides the file.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run Monte-Carlo trials for one scene and write the stage summary CSV.
    Simulate {
        #[command(flatten)]
        scene: SceneArgs,
        /// Output CSV, stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one parameter (dotted path) over a list of values.
    Sweep {
        #[command(flatten)]
        scene: SceneArgs,
        /// Dotted path such as `training.P_t`; comma-separated paths sweep
        /// jointly with `:`-separated values.
        #[arg(long)]
        param: String,
        #[arg(long, allow_hyphen_values = true, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time full-dictionary SOMP against reduced-dictionary SOMP per sub-array.
    Bench {
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Print the resolved scene configuration as TOML.
    Config {
        #[command(flatten)]
        scene: SceneArgs,
    },
}

enum Failure {
    Config(String),
    AllFailed,
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::IndexOutOfRange { .. } => Failure::Config(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

fn load(args: &SceneArgs) -> Result<SceneConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => SceneConfig::load(path)?,
        None => match args.preset {
            Preset::Table1 => SceneConfig::table1(),
            Preset::Smoke => SceneConfig::smoke(),
        },
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(rows: &[SweepRow], out: &Option<PathBuf>) -> Result<(), Failure> {
    match out {
        Some(path) => {
            let f = File::create(path)
                .map_err(|e| Failure::Other(format!("creating {}: {}", path.display(), e)))?;
            harness::write_csv(rows, BufWriter::new(f))?;
        }
        None => harness::write_csv(rows, io::stdout().lock())?,
    }
    if harness::all_failed(rows) {
        return Err(Failure::AllFailed);
    }
    Ok(())
}

fn bench(cfg: &SceneConfig) -> Result<(), Failure> {
    let scene = cfg.prepare()?;
    let trials = cfg.trials.clamp(1, 5) as u64;
    let (mut full_t, mut full_n, mut rd_t, mut rd_n) = (0.0, 0usize, 0.0, 0usize);
    let (mut full_atoms, mut rd_atoms) = (0usize, 0usize);
    for t in 0..trials {
        let r = harness::run_trial(&scene, t)?;
        for (ue, times) in r.ues.iter().zip(&r.timing) {
            let typical = ue.angles.iter().filter(|a| a.typical).count();
            let reduced = ue.angles.len() - typical;
            full_t += times.stage1;
            full_n += typical;
            rd_t += times.stage3;
            rd_n += reduced;
            full_atoms += ue.atoms_stage1();
            rd_atoms += ue.atoms_stage3();
        }
    }
    let per = |t: f64, n: usize| if n == 0 { f64::NAN } else { t / n as f64 };
    let mut out = io::stdout().lock();
    let w = |e: io::Error| Failure::Other(e.to_string());
    writeln!(out, "trials            {}", trials).map_err(w)?;
    writeln!(out, "full SOMP / SA    {:.6} s  ({} SAs, {:.0} atoms/SA)", per(full_t, full_n), full_n, per(full_atoms as f64, full_n)).map_err(w)?;
    writeln!(out, "RD-SOMP / SA      {:.6} s  ({} SAs, {:.0} atoms/SA)", per(rd_t, rd_n), rd_n, per(rd_atoms as f64, rd_n)).map_err(w)?;
    writeln!(out, "time ratio        {:.4}", per(rd_t, rd_n) / per(full_t, full_n)).map_err(w)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { scene, out } => {
            let cfg = load(&scene)?;
            let rows = harness::simulate(&cfg, cfg.trials)?;
            emit(&rows, &out)
        }
        Command::Sweep { scene, param, values, out } => {
            let cfg = load(&scene)?;
            if values.is_empty() {
                return Err(Failure::Config("no sweep values given".into()));
            }
            let rows = harness::run_sweep(&cfg, &param, &values, cfg.trials)?;
            emit(&rows, &out)
        }
        Command::Bench { scene } => bench(&load(&scene)?),
        Command::Config { scene } => {
            let cfg = load(&scene)?;
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("modloc: {}", msg);
            ExitCode::from(2)
        }
        Err(Failure::AllFailed) => {
            eprintln!("modloc: every trial failed, no RMSE defined");
            ExitCode::from(3)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("modloc: {}", msg);
            ExitCode::FAILURE
        }
    }
}
