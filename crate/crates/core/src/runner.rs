//! Experiment execution: builds the world once, runs every sweep row's
//! chains on a worker pool, and writes CSV (and optionally SVG) output.
//!
//! Chain `i` always gets seed `derive_seed(master_seed, i)` and results are
//! collected in index order, so output does not depend on the worker count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::metrics::{assignments, EvalContext, MetricsReport};
use crate::mixture::{Provenance, SampleBatch};
use crate::sampler::{derive_seed, ChainResult, Sampler};
use crate::schedule::NoiseSchedule;
use crate::svg;
use crate::world::World;

/// Environment variable that overrides `--workers`.
pub const THREADS_ENV: &str = "EGLOCE_SANDBOX_THREADS";

/// Keeps the metric RNG streams apart from the chain seeds.
const EVAL_STREAM: u64 = 0xE7A1_0000_0000_0001;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    /// 0 means one worker per available core.
    pub workers: usize,
    pub trajectory: bool,
    pub timing: bool,
}

/// Worker count after applying the environment override.
pub fn resolve_workers(requested: usize) -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}=`{v}` is not a thread count"))),
        Err(_) => Ok(requested),
    }
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// One metrics row plus the samples behind it.
#[derive(Debug, Clone)]
pub struct RowOutput {
    pub config_hash: String,
    pub guidance: GuidanceConfig,
    pub report: MetricsReport,
    pub wall_ms: u128,
    pub samples: SampleBatch,
    pub assigned: Vec<usize>,
    pub chains: Vec<ChainResult>,
}

/// A config with its world, schedule and semantics built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub world: World,
    pub schedule: NoiseSchedule,
    sampler: Sampler,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.check()?;
        let world = World::from_spec(&config.world)?;
        let schedule = config.schedule.build()?;
        let (space, decoder) = config.semantics.build(&world)?;
        let sampler = Sampler::new(
            &world,
            &config.world.prompt,
            &config.world.concept,
            &schedule,
            config.sampler.steps,
            space,
            decoder,
            config.guidance,
        )?
        .with_trajectory(config.sampler.capture_trajectory);
        Ok(Self {
            config,
            world,
            schedule,
            sampler,
        })
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    pub fn chain_seed(&self, index: usize) -> u64 {
        derive_seed(self.config.run.master_seed, index as u64)
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.config.run.master_seed ^ EVAL_STREAM, 0)
    }

    pub fn eval_context(&self) -> EvalContext<'_> {
        EvalContext {
            mixture: &self.world.active_prompt().mixture,
            space: self.sampler.space(),
            decoder: self.sampler.decoder(),
            e_prompt: self.sampler.prompt_embedding(),
            projections: self.config.run.projections,
            seed: self.eval_seed(),
        }
    }

    /// Runs `run.chains` chains under `guidance` and evaluates them.
    pub fn run_row(
        &self,
        guidance: &GuidanceConfig,
        pool: &rayon::ThreadPool,
        timing: bool,
    ) -> Result<RowOutput> {
        let sampler = self.sampler.with_config(*guidance)?;
        let start = Instant::now();
        let chains: Vec<ChainResult> = pool.install(|| {
            (0..self.config.run.chains)
                .into_par_iter()
                .map(|i| sampler.run_chain(self.chain_seed(i)))
                .collect::<Result<_>>()
        })?;
        let wall_ms = if timing {
            start.elapsed().as_millis()
        } else {
            0
        };
        let flat: Vec<f64> = chains
            .iter()
            .flat_map(|c| c.final_latent.iter().copied())
            .collect();
        let samples = SampleBatch::new(
            self.world.dim(),
            flat,
            self.config.run.master_seed,
            Provenance::ChainOutput,
        )?;
        let ctx = self.eval_context();
        let report = ctx.evaluate(&samples)?;
        let assigned = assignments(&samples, ctx.mixture)?;
        Ok(RowOutput {
            config_hash: self.config.row_hash(guidance),
            guidance: *guidance,
            report,
            wall_ms,
            samples,
            assigned,
            chains,
        })
    }

    /// Every row of the config, in sweep order.
    pub fn run_all(&self, pool: &rayon::ThreadPool, timing: bool) -> Result<Vec<RowOutput>> {
        self.config
            .guidance_rows()
            .iter()
            .map(|g| self.run_row(g, pool, timing))
            .collect()
    }
}

/// Applies CLI overrides to a loaded config.
pub fn apply_options(mut config: ExperimentConfig, opts: &RunOptions) -> ExperimentConfig {
    if let Some(seed) = opts.seed {
        config.run.master_seed = seed;
    }
    if let Some(dir) = &opts.out_dir {
        config.output.dir = dir.clone();
    }
    if opts.trajectory {
        config.sampler.capture_trajectory = true;
    }
    if opts.timing {
        config.run.record_wall_time = true;
    }
    config
}

/// Runs the config and writes every output file. Returns the rows.
pub fn execute(config: ExperimentConfig, opts: &RunOptions) -> Result<Vec<RowOutput>> {
    let config = apply_options(config, opts);
    let experiment = Experiment::new(config)?;
    let pool = thread_pool(resolve_workers(opts.workers)?)?;
    let rows = experiment.run_all(&pool, experiment.config.run.record_wall_time)?;
    write_outputs(&experiment, &rows)?;
    Ok(rows)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Fixed 17-significant-digit scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub const METRICS_HEADER: [&str; 13] = [
    "config_hash",
    "K",
    "lambda_rep",
    "lambda_ret",
    "t_start",
    "t_end",
    "grad_mode",
    "n",
    "erased_mass",
    "safe_tv",
    "sliced_w2",
    "alignment",
    "wall_ms",
];

fn file_name(stem: &str, row: usize, rows: usize, ext: &str) -> String {
    if rows == 1 {
        format!("{stem}.{ext}")
    } else {
        format!("{stem}-{row}.{ext}")
    }
}

pub fn write_outputs(experiment: &Experiment, rows: &[RowOutput]) -> Result<()> {
    let out = &experiment.config.output;
    create_dir(&out.dir)?;
    write_metrics(&out.dir.join(&out.metrics), rows)?;
    for (i, row) in rows.iter().enumerate() {
        let path = out.dir.join(file_name(&out.samples, i, rows.len(), "csv"));
        write_samples(
            &path,
            row,
            experiment.world.active_prompt().mixture.unsafe_mask(),
        )?;
        if experiment.config.sampler.capture_trajectory {
            let path = out
                .dir
                .join(file_name(&out.trajectory, i, rows.len(), "csv"));
            write_trajectory(&path, &row.chains)?;
        }
        if out.scatter {
            let path = out.dir.join(file_name(&out.samples, i, rows.len(), "svg"));
            svg::write_scatter(&row.samples, &experiment.world, &path)?;
        }
    }
    Ok(())
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

pub fn write_metrics(path: &Path, rows: &[RowOutput]) -> Result<()> {
    let mut w = writer(path)?;
    let err = |e| Error::csv(path, e);
    w.write_record(METRICS_HEADER).map_err(err)?;
    for r in rows {
        let g = &r.guidance;
        let (ts, te) = g.window.map_or((String::new(), String::new()), |w| {
            (w.start.to_string(), w.end.to_string())
        });
        w.write_record([
            r.config_hash.clone(),
            g.k.to_string(),
            fmt_f64(g.lambda_rep),
            fmt_f64(g.lambda_ret),
            ts,
            te,
            g.grad_mode.to_string(),
            r.report.n.to_string(),
            fmt_f64(r.report.erased_mass),
            fmt_f64(r.report.safe_tv),
            fmt_f64(r.report.sliced_w2),
            fmt_f64(r.report.alignment),
            r.wall_ms.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_samples(path: &Path, row: &RowOutput, unsafe_mask: &[bool]) -> Result<()> {
    let mut w = writer(path)?;
    let err = |e| Error::csv(path, e);
    let dim = row.samples.dim();
    let mut header = vec!["chain_index".to_string()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    header.push("assigned_component".into());
    header.push("is_unsafe".into());
    w.write_record(&header).map_err(err)?;
    for (i, (z, &k)) in row.samples.iter().zip(&row.assigned).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(z.iter().map(|&x| fmt_f64(x)));
        rec.push(k.to_string());
        rec.push(u8::from(unsafe_mask[k]).to_string());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trajectory(path: &Path, chains: &[ChainResult]) -> Result<()> {
    let mut w = writer(path)?;
    let err = |e| Error::csv(path, e);
    let dim = chains.first().map_or(0, |c| c.final_latent.len());
    let mut header = vec!["chain_index".to_string(), "step".into(), "t".into()];
    header.extend((0..dim).map(|j| format!("z_t{j}")));
    header.extend((0..dim).map(|j| format!("z0_{j}")));
    header.push("e_rep".into());
    header.push("e_ret".into());
    w.write_record(&header).map_err(err)?;
    for (i, c) in chains.iter().enumerate() {
        for p in c.trajectory.iter().flatten() {
            let mut rec = vec![i.to_string(), p.step.to_string(), p.timestep.to_string()];
            rec.extend(p.z_t.iter().map(|&x| fmt_f64(x)));
            rec.extend(p.z0_est.iter().map(|&x| fmt_f64(x)));
            rec.push(fmt_f64(p.e_rep));
            rec.push(fmt_f64(p.e_ret));
            w.write_record(&rec).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the latent columns (`x0`, `x1`, ...) of a samples CSV.
pub fn read_samples(path: &Path) -> Result<SampleBatch> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    let cols: Vec<usize> = (0..)
        .map_while(|j| headers.iter().position(|h| h == format!("x{j}")))
        .collect();
    if cols.is_empty() {
        return Err(Error::Config(format!("{}: no x0 column", path.display())));
    }
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        for &c in &cols {
            let field = rec.get(c).unwrap_or("");
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Config(format!("{}: `{field}` is not a number", path.display()))
            })?;
            points.push(v);
        }
    }
    SampleBatch::new(cols.len(), points, 0, Provenance::ChainOutput)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.run.chains = 40;
        c.run.master_seed = 5;
        c
    }

    #[test]
    fn formatting_is_fixed_width_scientific() {
        assert_eq!(fmt_f64(0.25), "2.5000000000000000e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn rows_do_not_depend_on_worker_count() {
        let exp = Experiment::new(small_config()).unwrap();
        let a = exp.run_all(&thread_pool(1).unwrap(), false).unwrap();
        let b = exp.run_all(&thread_pool(3).unwrap(), false).unwrap();
        assert_eq!(a[0].samples, b[0].samples);
        assert_eq!(a[0].report, b[0].report);
    }

    #[test]
    fn writes_and_reads_back_samples() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            workers: 2,
            trajectory: true,
            ..Default::default()
        };
        let rows = execute(small_config(), &opts).unwrap();
        let back = read_samples(&dir.path().join("samples.csv")).unwrap();
        assert_eq!(back.as_flat(), rows[0].samples.as_flat());
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("config_hash,K,lambda_rep"));
        assert_eq!(metrics.lines().count(), 2);
        assert!(dir.path().join("trajectory.csv").exists());
    }

    #[test]
    fn missing_directory_parent_is_an_io_error() {
        let mut c = small_config();
        c.run.chains = 2;
        c.output.dir = PathBuf::from("/proc/egloce-cannot-exist/out");
        let err = execute(c, &RunOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("/proc/egloce-cannot-exist"));
    }
}
