//! Run configuration file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::ValueEnum;
use knobtune_core::adapters::{CommandSpec, MetricParserSpec, Renderer};
use knobtune_core::Objective;
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    #[default]
    Rrs,
    Random,
    Lhs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub algo: Algo,
    #[serde(default = "empty_object")]
    pub params: serde_json::Value,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algo: Algo::default(),
            params: empty_object(),
        }
    }
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateConfig {
    /// Template file with `{name}` placeholders.
    pub path: PathBuf,
    /// Where the rendered file goes.
    pub output: PathBuf,
    #[serde(default)]
    pub renderers: BTreeMap<String, Renderer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecConfig {
    #[serde(default)]
    pub template: Option<TemplateConfig>,
    #[serde(default)]
    pub restart: Option<CommandSpec>,
    #[serde(default)]
    pub ready: Option<CommandSpec>,
    #[serde(default)]
    pub teardown: Option<CommandSpec>,
    pub workload: CommandSpec,
    pub parser: MetricParserSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SutConfig {
    Synthetic {
        surface: String,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        noise_seed: u64,
    },
    Exec(Box<ExecConfig>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    /// Space file; synthetic SUTs bring their own space.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub sut: SutConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<Objective>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Baseline values by parameter name; missing ones take the space default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<serde_json::Map<String, serde_json::Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ready_timeout_secs: Option<f64>,
}

impl RunConfig {
    /// Reads a config and makes every relative path absolute against the
    /// config file's directory. Referenced input files must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid run config {}", path.display()))?;
        ensure!(
            cfg.format_version == RUN_CONFIG_VERSION,
            "{}: unsupported format_version {}",
            path.display(),
            cfg.format_version
        );
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = parent
            .canonicalize()
            .with_context(|| format!("resolving {}", parent.display()))?;
        cfg.resolve(&base);
        cfg.check_files()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.space {
            abs(p);
        }
        if let Some(p) = &mut self.output_dir {
            abs(p);
        }
        if let SutConfig::Exec(exec) = &mut self.sut {
            if let Some(t) = &mut exec.template {
                abs(&mut t.path);
                abs(&mut t.output);
            }
            let cmds = [
                exec.restart.as_mut(),
                exec.ready.as_mut(),
                exec.teardown.as_mut(),
                Some(&mut exec.workload),
            ];
            for c in cmds.into_iter().flatten() {
                match &mut c.cwd {
                    Some(d) => abs(d),
                    None => c.cwd = Some(base.to_path_buf()),
                }
            }
            if let knobtune_core::adapters::MetricSource::File { path } = &mut exec.parser.source {
                abs(path);
            }
        }
    }

    fn check_files(&self) -> Result<()> {
        if let Some(p) = &self.space {
            ensure!(p.is_file(), "space file {} does not exist", p.display());
        }
        match &self.sut {
            SutConfig::Exec(exec) => {
                ensure!(self.space.is_some(), "exec SUTs need a \"space\" file");
                if let Some(t) = &exec.template {
                    ensure!(t.path.is_file(), "template {} does not exist", t.path.display());
                }
                for c in [&exec.restart, &exec.ready, &exec.teardown].into_iter().flatten() {
                    ensure!(c.timeout_secs > 0.0, "command {:?}: timeout_secs must be positive", c.program);
                }
                ensure!(exec.workload.timeout_secs > 0.0, "workload: timeout_secs must be positive");
            }
            SutConfig::Synthetic { noise, .. } => {
                if self.space.is_some() {
                    bail!("synthetic SUTs define their own space; drop \"space\"");
                }
                ensure!(*noise >= 0.0 && noise.is_finite(), "noise must be a non-negative number");
            }
        }
        Ok(())
    }
}
