//! Experiment configuration: one JSON document describing the world, the
//! sampler, the guidance settings, and an optional single-axis sweep.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidance::{GradMode, GuidanceConfig, StepWindow};
use crate::metrics::DEFAULT_PROJECTIONS;
use crate::schedule::ScheduleSpec;
use crate::world::{SemanticsSpec, WorldSpec};

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub steps: usize,
    pub capture_trajectory: bool,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            steps: 50,
            capture_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub chains: usize,
    pub master_seed: u64,
    /// Random projections for the sliced W2 metric.
    pub projections: usize,
    /// Record real wall-clock time per row. Off by default so reruns give
    /// byte-identical CSVs; `wall_ms` is then written as 0.
    pub record_wall_time: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            chains: 1000,
            master_seed: 0,
            projections: DEFAULT_PROJECTIONS,
            record_wall_time: false,
        }
    }
}

/// One sweep axis and the values it takes. Every other setting comes from
/// the base `guidance` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", deny_unknown_fields)]
pub enum Sweep {
    K(Vec<usize>),
    /// `[lambda_rep, lambda_ret]` pairs.
    #[serde(rename = "lambda")]
    Lambda(Vec<[f64; 2]>),
    #[serde(rename = "window")]
    Window(Vec<StepWindow>),
    #[serde(rename = "grad_mode")]
    GradMode(Vec<GradMode>),
}

impl Sweep {
    pub fn axis(&self) -> &'static str {
        match self {
            Self::K(_) => "K",
            Self::Lambda(_) => "lambda",
            Self::Window(_) => "window",
            Self::GradMode(_) => "grad_mode",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::K(v) => v.len(),
            Self::Lambda(v) => v.len(),
            Self::Window(v) => v.len(),
            Self::GradMode(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The guidance config for every sweep value, in order.
    pub fn expand(&self, base: &GuidanceConfig) -> Vec<GuidanceConfig> {
        let with = |f: &dyn Fn(&mut GuidanceConfig)| {
            let mut g = *base;
            f(&mut g);
            g
        };
        match self {
            Self::K(v) => v.iter().map(|&k| with(&|g| g.k = k)).collect(),
            Self::Lambda(v) => v
                .iter()
                .map(|&[r, t]| {
                    with(&|g| {
                        g.lambda_rep = r;
                        g.lambda_ret = t;
                    })
                })
                .collect(),
            Self::Window(v) => v.iter().map(|&w| with(&|g| g.window = Some(w))).collect(),
            Self::GradMode(v) => v.iter().map(|&m| with(&|g| g.grad_mode = m)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Directory for every output file; relative paths resolve against the
    /// working directory. Overridden by `--out`.
    pub dir: PathBuf,
    pub metrics: String,
    /// Sample file stem; sweeps append `-<row index>`.
    pub samples: String,
    pub trajectory: String,
    /// Also write an SVG scatter per row (2-D worlds only).
    pub scatter: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            metrics: "metrics.csv".into(),
            samples: "samples".into(),
            trajectory: "trajectory".into(),
            scatter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec_version: u32,
    #[serde(default)]
    pub world: WorldSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub semantics: SemanticsSpec,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub output: OutputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            spec_version: SPEC_VERSION,
            world: WorldSpec::default(),
            schedule: ScheduleSpec::default(),
            semantics: SemanticsSpec::default(),
            guidance: GuidanceConfig::default(),
            sampler: SamplerSpec::default(),
            run: RunSpec::default(),
            sweep: None,
            output: OutputSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Structural checks that do not need the world to be built.
    pub fn check(&self) -> Result<()> {
        if self.spec_version != SPEC_VERSION {
            return Err(Error::Config(format!(
                "unsupported spec_version {} (expected {SPEC_VERSION})",
                self.spec_version
            )));
        }
        if let Some(n) = self.schedule.sampler_steps {
            if n != self.sampler.steps {
                return Err(Error::Config(format!(
                    "schedule.N = {n} disagrees with sampler.steps = {}",
                    self.sampler.steps
                )));
            }
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.num_steps {
            return Err(Error::Config(format!(
                "sampler.steps must lie in 1..={}",
                self.schedule.num_steps
            )));
        }
        if self.run.chains == 0 {
            return Err(Error::Config("run.chains must be positive".into()));
        }
        if self.run.projections == 0 {
            return Err(Error::Config("run.projections must be positive".into()));
        }
        if let Some(s) = &self.sweep {
            if s.is_empty() {
                return Err(Error::Config(format!(
                    "sweep over `{}` has no values",
                    s.axis()
                )));
            }
        }
        for g in self.guidance_rows() {
            g.validate(self.sampler.steps)?;
        }
        Ok(())
    }

    /// Guidance settings for each output row.
    pub fn guidance_rows(&self) -> Vec<GuidanceConfig> {
        match &self.sweep {
            Some(s) => s.expand(&self.guidance),
            None => vec![self.guidance],
        }
    }

    /// Short stable digest of everything that determines one row's numbers.
    pub fn row_hash(&self, guidance: &GuidanceConfig) -> String {
        let mut cfg = self.clone();
        cfg.guidance = *guidance;
        cfg.sweep = None;
        cfg.output = OutputSpec::default();
        cfg.run.record_wall_time = false;
        let json = serde_json::to_string(&cfg).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_uses_defaults() {
        let c = ExperimentConfig::from_json(r#"{"spec_version": 1}"#).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig {
            sweep: Some(Sweep::Window(vec![StepWindow::new(20, 35).unwrap()])),
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            r#"{"spec_version": 2}"#,
            r#"{"spec_version": 1, "bogus": 0}"#,
            r#"{"spec_version": 1, "sampler": {"steps": 0}}"#,
            r#"{"spec_version": 1, "run": {"chains": 0}}"#,
            r#"{"spec_version": 1, "sweep": {"axis": "K", "values": []}}"#,
            r#"{"spec_version": 1, "sweep": {"axis": "omega", "values": [1]}}"#,
            r#"{"spec_version": 1, "sweep": {"axis": "window", "values": [[10, 60]]}}"#,
            r#"{"spec_version": 1, "schedule": {"T": 1000, "N": 20, "beta_start": 0.0001, "beta_end": 0.02}}"#,
        ] {
            assert!(ExperimentConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn sweep_expands_in_order() {
        let c = ExperimentConfig::from_json(
            r#"{"spec_version": 1, "sweep": {"axis": "lambda", "values": [[0.01, 0.005], [0.01, 0]]}}"#,
        )
        .unwrap();
        let rows = c.guidance_rows();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].lambda_ret, 0.0);
        assert_eq!(rows[1].k, c.guidance.k);
        assert_ne!(c.row_hash(&rows[0]), c.row_hash(&rows[1]));
    }

    #[test]
    fn hash_ignores_output_paths() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output.dir = PathBuf::from("elsewhere");
        assert_eq!(a.row_hash(&a.guidance), b.row_hash(&b.guidance));
    }
}
