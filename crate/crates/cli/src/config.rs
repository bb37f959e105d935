//! Run configuration: a JSON file, then environment, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use splatdeform::handles::Method;
use splatdeform::pipeline::PipelineConfig;
use splatdeform::ply::FormatOptions;

pub const CACHE_ENV: &str = "SPLATDEFORM_CACHE_DIR";
pub const DEFAULT_CACHE_DIR: &str = ".splatdeform-cache";
pub const MAX_PREVIEW: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    /// Overrides the method named in the handle document.
    pub method: Option<Method>,
    pub format: FormatOptions,
    pub engine: PipelineConfig,
    /// Largest number of points sent to the preview client.
    pub max_preview: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            output: None,
            report: None,
            cache_dir: None,
            method: None,
            format: FormatOptions::default(),
            engine: PipelineConfig::default(),
            max_preview: MAX_PREVIEW,
        }
    }
}

/// Command line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub method: Option<Method>,
    pub epsilon_factor: Option<f64>,
    pub k_laplacian: Option<usize>,
    pub k_bind: Option<usize>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub thresholds: Option<Vec<f64>>,
    pub keypoint_radius: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        if o.input.is_some() {
            self.input.clone_from(&o.input);
        }
        if o.output.is_some() {
            self.output.clone_from(&o.output);
        }
        if o.report.is_some() {
            self.report.clone_from(&o.report);
        }
        if o.cache_dir.is_some() {
            self.cache_dir.clone_from(&o.cache_dir);
        }
        if o.method.is_some() {
            self.method = o.method;
        }
        let e = &mut self.engine;
        set(&mut e.epsilon_factor, &o.epsilon_factor);
        set(&mut e.k_laplacian, &o.k_laplacian);
        set(&mut e.k_bind, &o.k_bind);
        set(&mut e.arap.max_iters, &o.max_iters);
        set(&mut e.arap.tol, &o.tol);
        set(&mut e.thresholds, &o.thresholds);
        set(&mut e.keypoint_radius, &o.keypoint_radius);
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.engine.validate().context("engine")?;
        if self.max_preview == 0 {
            bail!("max_preview: must be positive");
        }
        let c = self.format.min_contribution;
        if !(c > 0.0 && c < 1.0) {
            bail!("format.min_contribution: must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn input(&self) -> Result<&Path> {
        match &self.input {
            Some(p) => Ok(p),
            None => bail!("input: no scene given (use --input or the `input` config field)"),
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
    }
}
