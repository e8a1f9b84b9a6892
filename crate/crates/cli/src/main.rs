use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use al_forge_core::data::{generate_dataset, save_dataset, DatasetSpec};
use al_forge_core::experiment::{
    ablation_cells, aggregate_csv, load_results_dir, run_experiment_on, write_atomic, AblationTable, ALConfig,
    DatasetSource, ExperimentResult,
};
use al_forge_core::report::{learning_curves, render_csv, render_svg};
use al_forge_core::{Error, Strategy};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

const SEED_ENV: &str = "AL_FORGE_SEED";

#[derive(Parser)]
#[command(name = "al-forge", version, about = "Uncertainty-weighted active learning for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one active-learning experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Overrides the config seed.
        #[arg(long, env = SEED_ENV)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the four-variant ablation grid over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Grid cells run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Plot (.svg) or tabulate (.csv) learning curves from a results directory.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status 1: bad input. Exit status 2: the run itself failed.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Validation(_)
            | Error::UnsupportedVersion { .. }
            | Error::Json(_)
            | Error::Usage(_)
            | Error::Lookup(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| invalid(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// A missing input is the caller's mistake, not a runtime failure.
fn require_input(path: &Path) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{} does not exist", path.display())))
    }
}

fn read_json(path: &Path) -> CliResult<serde_json::Value> {
    require_input(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn gen_data(spec_path: &Path, out: &Path) -> CliResult {
    let mut value = read_json(spec_path)?;
    // A spec without a seed takes the environment default.
    if let Some(obj) = value.as_object_mut() {
        if !obj.contains_key("seed") {
            obj.insert("seed".into(), env_seed()?.unwrap_or(0).into());
        }
    }
    let spec: DatasetSpec = serde_json::from_value(value).map_err(Error::from)?;
    let dataset = generate_dataset(&spec)?;
    save_dataset(&dataset, out)?;
    println!("wrote {} train / {} test samples to {}", dataset.train.len(), dataset.test.len(), out.display());
    println!("checksum {}", dataset.checksum());
    Ok(())
}

/// Loads the config and checks everything that can be checked before any
/// training starts.
fn load_config(path: &Path) -> CliResult<(ALConfig, al_forge_core::data::Dataset)> {
    require_input(path)?;
    let cfg = ALConfig::load(path)?;
    cfg.validate(None)?;
    let cfg = match &cfg.dataset {
        // Relative dataset paths resolve against the config file.
        DatasetSource::Path(p) if p.is_relative() => ALConfig {
            dataset: DatasetSource::Path(path.parent().unwrap_or(Path::new(".")).join(p)),
            ..cfg
        },
        _ => cfg,
    };
    let dataset = cfg.dataset.resolve()?;
    cfg.validate(Some(dataset.train.len()))?;
    Ok((cfg, dataset))
}

fn write_aggregate(out: &Path) -> CliResult {
    let all = load_results_dir(out)?;
    write_atomic(&out.join("aggregate.csv"), aggregate_csv(&all).as_bytes())?;
    Ok(())
}

fn run(config: &Path, strategy: Option<Strategy>, seed: Option<u64>, out: &Path) -> CliResult {
    let (mut cfg, dataset) = load_config(config)?;
    if let Some(s) = strategy {
        cfg.strategy = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let started = Instant::now();
    let result = run_experiment_on(&cfg, cfg.strategy.name(), &dataset, &mut |m| {
        println!(
            "round {} labeled={} miou={} dice={}",
            m.round_index, m.labeled_count, m.miou, m.dice
        );
        eprintln!("round {} took {:.1}s", m.round_index, m.wall_seconds);
    })?;
    let path = result.save(out)?;
    write_aggregate(out)?;
    eprintln!("wrote {} in {:.1}s", path.display(), started.elapsed().as_secs_f64());
    let last = result.final_round();
    println!("FINAL miou={} dice={}", last.miou, last.dice);
    Ok(())
}

fn ablate(config: &Path, seeds: &[u64], out: &Path, jobs: usize) -> CliResult {
    if seeds.is_empty() {
        return Err(invalid("--seeds needs at least one seed"));
    }
    if jobs == 0 {
        return Err(invalid("--jobs must be >= 1"));
    }
    let (cfg, dataset) = load_config(config)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cells = ablation_cells(&cfg, seeds);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure {
            code: 2,
            message: format!("cannot start worker pool: {e}"),
        })?;
    let results: Vec<ExperimentResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|(variant, cell)| {
                let res = run_experiment_on(cell, variant.label(), &dataset, &mut |_| {})?;
                res.save(out)?;
                eprintln!(
                    "{} seed {}: final miou={}",
                    variant.label(),
                    cell.seed,
                    res.final_round().miou
                );
                Ok(res)
            })
            .collect::<Result<Vec<_>, Error>>()
    })?;
    let table = AblationTable::from_results(&results)?;
    let csv = table.to_csv();
    write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
    write_aggregate(out)?;
    print!("{csv}");
    Ok(())
}

fn report(results: &Path, out: &Path) -> CliResult {
    require_input(results)?;
    let all = load_results_dir(results)?;
    if all.is_empty() {
        return Err(invalid(format!("no results_*.json files in {}", results.display())));
    }
    let body = match out.extension().and_then(|e| e.to_str()) {
        Some("svg") => render_svg(&learning_curves(&all)?),
        Some("csv") => render_csv(&all),
        _ => return Err(invalid("--out must end in .svg or .csv")),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(out, body.as_bytes())?;
    println!("wrote {} ({} runs)", out.display(), all.len());
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
    let outcome = match &cli.command {
        Command::GenData { spec, out } => gen_data(spec, out),
        Command::Run {
            config,
            strategy,
            seed,
            out,
        } => run(config, *strategy, *seed, out),
        Command::Ablate {
            config,
            seeds,
            out,
            jobs,
        } => ablate(config, seeds, out, *jobs),
        Command::Report { results, out } => report(results, out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
