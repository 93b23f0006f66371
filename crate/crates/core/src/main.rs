use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use covbuf::harness::{
    emit_reports, generate_scenes, rerun_failed, run_experiment_with, ExperimentConfig, OrderSpec, ReplayMode,
    RunOptions, RunRecord,
};
use covbuf::verify::{run_suite, SuiteOptions};
use covbuf::{Error, Strategy};

const EXIT_CONFIG: u8 = 2;
const EXIT_CELLS: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(
    name = "covbuf",
    version,
    about = "Coverage-aware replay buffers for continual visual localization"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the scenes of a configuration and export them.
    Generate(GridArgs),
    /// Run the strategy x buffer size x seed grid and write reports.
    Run {
        #[command(flatten)]
        grid: GridArgs,
        /// Re-run only the failed cells of an existing run.json in --out.
        #[arg(long)]
        resume: bool,
        /// Write one NDJSON decision log per cell under <out>/logs.
        #[arg(long)]
        decision_logs: bool,
    },
    /// Re-render CSV reports from a run.json.
    Report {
        /// Path to run.json, or a directory containing it.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance checks.
    Verify {
        /// Comma-separated criterion ids; all when omitted.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u32>,
        /// Paired seeds for the default-profile checks.
        #[arg(long, default_value_t = 100)]
        profile_seeds: u64,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Args, Clone)]
struct GridArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    buffer_sizes: Option<Vec<usize>>,
    /// Explicit permutation such as 2,0,1 or random:N.
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    replay_mode: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
}

impl GridArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(s) = &self.strategies {
            cfg.strategies = s.iter().map(|x| x.parse::<Strategy>()).collect::<Result<_, _>>()?;
        }
        if let Some(b) = &self.buffer_sizes {
            cfg.buffer_sizes = b.clone();
        }
        if let Some(o) = &self.order {
            cfg.order = o.parse::<OrderSpec>()?;
        }
        if let Some(m) = &self.replay_mode {
            cfg.replay_mode = m.parse::<ReplayMode>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::BadPermutation(_) => EXIT_CONFIG,
        _ => 1,
    }
}

fn write_run(rec: &RunRecord, out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.into(),
        source: e,
    })?;
    rec.write_json(&out.join("run.json"))?;
    emit_reports(rec, out)?;
    Ok(())
}

fn cmd_run(grid: &GridArgs, resume: bool, logs: bool) -> Result<u8, Error> {
    let cfg = grid.config()?;
    let opts = RunOptions {
        jobs: grid.jobs,
        decision_log_dir: logs.then(|| grid.out.join("logs")),
    };
    let record_path = grid.out.join("run.json");
    let rec = if resume && record_path.exists() {
        let mut rec = RunRecord::read_json(&record_path)?;
        if rec.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "{} was produced by a different configuration",
                record_path.display()
            )));
        }
        rerun_failed(&mut rec, &opts)?;
        rec
    } else {
        run_experiment_with(&cfg, &opts)?
    };
    write_run(&rec, &grid.out)?;
    let failed = rec.failed_cells();
    println!(
        "{} cells, {} failed; reports in {}",
        rec.cells.len(),
        failed,
        grid.out.display()
    );
    Ok(if failed > 0 { EXIT_CELLS } else { 0 })
}

fn cmd_generate(grid: &GridArgs) -> Result<u8, Error> {
    let cfg = grid.config()?;
    for &seed in &cfg.seeds {
        let dir = grid.out.join(format!("seed{seed}"));
        for scene in generate_scenes(&cfg, seed)? {
            scene.export(&dir)?;
        }
        println!("seed {seed}: {} scenes in {}", cfg.scene_profile.len(), dir.display());
    }
    Ok(0)
}

fn cmd_report(input: &Path, out: Option<&Path>) -> Result<u8, Error> {
    let path = if input.is_dir() {
        input.join("run.json")
    } else {
        input.to_path_buf()
    };
    let rec = RunRecord::read_json(&path)?;
    let dir = out.map_or_else(
        || path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        Path::to_path_buf,
    );
    for p in emit_reports(&rec, &dir)? {
        println!("{}", p.display());
    }
    Ok(if rec.failed_cells() > 0 { EXIT_CELLS } else { 0 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Generate(g) => cmd_generate(g),
        Cmd::Run {
            grid,
            resume,
            decision_logs,
        } => cmd_run(grid, *resume, *decision_logs),
        Cmd::Report { input, out } => cmd_report(input, out.as_deref()),
        Cmd::Verify {
            criteria,
            profile_seeds,
            jobs,
        } => {
            let outcomes = run_suite(&SuiteOptions {
                only: criteria.clone(),
                profile_seeds: *profile_seeds,
                jobs: *jobs,
            });
            for o in &outcomes {
                println!("{}", o.line());
            }
            Ok(if outcomes.iter().all(|o| o.ok()) {
                0
            } else {
                EXIT_VERIFY
            })
        }
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
