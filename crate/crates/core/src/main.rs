use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use egloce::config::ExperimentConfig;
use egloce::runner::{execute, read_samples, RowOutput, RunOptions};
use egloce::world::{World, WorldSpec};
use egloce::{svg, validate, Error};

#[derive(Parser)]
#[command(
    name = "egloce",
    version,
    about = "Dual energy-guided concept erasure on analytic diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config (every sweep row, if it has a sweep)
    Run {
        config: PathBuf,
        #[command(flatten)]
        opts: RunFlags,
    },
    /// Run a config's sweep; fails if the config has none
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        opts: RunFlags,
    },
    /// Run the invariant suite and print a per-check table
    Validate,
    /// Render a samples CSV over a world as SVG
    Scatter {
        samples: PathBuf,
        /// World spec JSON, or a full experiment config
        world: PathBuf,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunFlags {
    /// Output directory (overrides output.dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides run.master_seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core. EGLOCE_SANDBOX_THREADS wins.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Capture per-step trajectories and write them as CSV
    #[arg(long)]
    trajectory: bool,
    /// Record real wall-clock milliseconds per row (breaks byte-identical reruns)
    #[arg(long)]
    timing: bool,
}

impl From<RunFlags> for RunOptions {
    fn from(f: RunFlags) -> Self {
        RunOptions {
            out_dir: f.out,
            seed: f.seed,
            workers: f.workers,
            trajectory: f.trajectory,
            timing: f.timing,
        }
    }
}

fn print_rows(rows: &[RowOutput]) {
    println!(
        "{:<16} {:>3} {:>10} {:>10} {:>9} {:>13} {:>8} {:>8} {:>9} {:>9}",
        "hash",
        "K",
        "lam_rep",
        "lam_ret",
        "window",
        "grad_mode",
        "erased",
        "safe_tv",
        "sw2",
        "align"
    );
    for r in rows {
        let g = &r.guidance;
        let w = g
            .window
            .map_or("-".to_string(), |w| format!("{}-{}", w.start, w.end));
        println!(
            "{:<16} {:>3} {:>10.4e} {:>10.4e} {:>9} {:>13} {:>8.4} {:>8.4} {:>9.4} {:>9.4}",
            r.config_hash,
            g.k,
            g.lambda_rep,
            g.lambda_ret,
            w,
            g.grad_mode.to_string(),
            r.report.erased_mass,
            r.report.safe_tv,
            r.report.sliced_w2,
            r.report.alignment
        );
    }
}

fn load_world(path: &PathBuf) -> egloce::Result<World> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let spec: WorldSpec = match serde_json::from_str(&text) {
        Ok(spec) => spec,
        Err(_) => ExperimentConfig::from_json(&text)?.world,
    };
    World::from_spec(&spec)
}

fn run(cli: Cli) -> egloce::Result<ExitCode> {
    match cli.command {
        Command::Run { config, opts } => {
            let rows = execute(ExperimentConfig::load(&config)?, &opts.into())?;
            print_rows(&rows);
        }
        Command::Sweep { config, opts } => {
            let cfg = ExperimentConfig::load(&config)?;
            if cfg.sweep.is_none() {
                return Err(Error::Config(format!(
                    "{}: no `sweep` section",
                    config.display()
                )));
            }
            let rows = execute(cfg, &opts.into())?;
            print_rows(&rows);
        }
        Command::Validate => {
            let report = validate::validate();
            println!("{report}");
            if !report.all_passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Scatter {
            samples,
            world,
            out,
        } => {
            let batch = read_samples(&samples)?;
            let world = load_world(&world)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let stem = samples
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("samples");
            let path = out.join(format!("{stem}.svg"));
            svg::write_scatter(&batch, &world, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
