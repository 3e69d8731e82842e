//! Run configuration: an optional TOML file with one table per command, with
//! command-line flags taking precedence over file values.
//!
//! ```toml
//! seed = 7
//! deterministic = true
//!
//! [synth]
//! clean_dir = "clean"
//! out = "data"
//! count = 200
//! height = 64
//! width = 80
//!
//! [train_toy.model]
//! enc1 = 8
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use smokebench_core::dcp::DcpConfig;
use smokebench_core::model::ModelConfig;
use smokebench_core::synth::DEFAULT_RESOLUTION;
use smokebench_core::train::TrainConfig;

use crate::UsageError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
    pub threads: Option<usize>,
    pub synth: SynthSettings,
    pub desmoke: DesmokeSettings,
    pub eval: EvalSettings,
    pub gradcheck: GradcheckSettings,
    pub train_toy: TrainSettings,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| UsageError(format!("{e:#}")))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }
}

/// Settings shared by every command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GlobalSettings {
    pub seed: u64,
    pub deterministic: bool,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub clean_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            clean_dir: None,
            out: None,
            count: 10,
            height: DEFAULT_RESOLUTION.0,
            width: DEFAULT_RESOLUTION.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Dcp,
    Learned,
    InvertOracle,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesmokeSettings {
    pub method: Method,
    /// An image file or a directory of images.
    pub input: Option<PathBuf>,
    /// A synthesis manifest; its smoky images are processed.
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dcp: DcpConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub manifest: Option<PathBuf>,
    /// Predictions named `<smoky stem>.png`; turns `manifest` into a synthesis manifest.
    pub pred_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Also write prediction | reference | difference strips.
    pub strips: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub probes: usize,
    pub step: f64,
    /// Extra steps whose errors are logged but not judged.
    pub sweep: Vec<f64>,
    pub tolerance: f64,
    pub coords_per_tensor: usize,
    pub lambda: f64,
    pub model: ModelConfig,
    /// Scales the analytic gradient by 1.01 to exercise the failure path.
    pub corrupt: bool,
    pub out: Option<PathBuf>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        let probe = smokebench_core::model::ProbeConfig::default();
        Self {
            probes: 20,
            step: 1e-3,
            sweep: Vec::new(),
            tolerance: 1e-4,
            coords_per_tensor: probe.coords_per_tensor,
            lambda: probe.lambda,
            model: probe.model,
            corrupt: false,
            out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub flip: bool,
    pub model: ModelConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            manifest: None,
            out: None,
            steps: t.steps,
            batch_size: t.batch_size,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            weight_decay: t.weight_decay,
            lambda: t.lambda,
            flip: t.flip,
            model: t.model,
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            steps: self.steps,
            batch_size: self.batch_size,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            flip: self.flip,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// Overwrites `slot` when the flag was given.
pub fn override_with<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn override_opt<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

/// Unwraps a required path, reporting the missing flag as a usage error.
pub fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| UsageError(format!("--{flag} is required (flag or config file)")).into())
}

#[derive(Serialize)]
struct Resolved<'a, T: Serialize> {
    command: &'a str,
    #[serde(flatten)]
    global: &'a GlobalSettings,
    settings: &'a T,
}

/// The fully resolved configuration of a run, as TOML.
pub fn resolved_toml<T: Serialize>(command: &str, global: &GlobalSettings, settings: &T) -> anyhow::Result<String> {
    toml::to_string(&Resolved {
        command,
        global,
        settings,
    })
    .context("encoding resolved config")
}

pub const RESOLVED_CONFIG_NAME: &str = "resolved_config.toml";

/// Logs the resolved configuration and writes it next to the run's outputs.
pub fn record_resolved<T: Serialize>(
    command: &str,
    global: &GlobalSettings,
    settings: &T,
    out_dir: Option<&Path>,
) -> anyhow::Result<()> {
    let text = resolved_toml(command, global, settings)?;
    log::info!("resolved config:\n{text}");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        smokebench_core::write_atomic(&dir.join(RESOLVED_CONFIG_NAME), text.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_tables_parse_and_unknown_keys_fail() {
        let cfg: FileConfig = toml::from_str(
            "seed = 3\n[synth]\ncount = 4\n[train_toy]\nsteps = 5\n[train_toy.model]\nenc1 = 2\n[desmoke.dcp]\nomega = 0.9\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.synth.count, 4);
        assert_eq!(cfg.synth.height, DEFAULT_RESOLUTION.0);
        assert_eq!(cfg.train_toy.steps, 5);
        assert_eq!(cfg.train_toy.model.enc1, 2);
        assert_eq!(cfg.train_toy.model.enc2, ModelConfig::default().enc2);
        assert_eq!(cfg.desmoke.dcp.omega, 0.9);
        assert!(toml::from_str::<FileConfig>("[synth]\ncuont = 4\n").is_err());
        assert!(toml::from_str::<FileConfig>("[desmoke]\nmethod = \"magic\"\n").is_err());
    }

    #[test]
    fn flags_override_values() {
        let mut count = 10;
        override_with(&mut count, Some(3));
        override_with(&mut count, None);
        assert_eq!(count, 3);
        let mut p = Some(PathBuf::from("a"));
        override_opt(&mut p, None);
        assert_eq!(p, Some(PathBuf::from("a")));
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let global = GlobalSettings { seed: 1, deterministic: true, threads: 0 };
        let text = resolved_toml("train-toy", &global, &TrainSettings::default()).unwrap();
        let value: toml::Table = toml::from_str(&text).unwrap();
        assert_eq!(value["command"].as_str(), Some("train-toy"));
        assert_eq!(value["seed"].as_integer(), Some(1));
        assert_eq!(value["settings"]["steps"].as_integer(), Some(2000));
    }
}
