//! Run configuration.
//!
//! A config is a TOML file laid over a preset: keys present in the file
//! replace the preset's values, everything else keeps the preset default.
//! Unknown keys are rejected. CLI flags are applied last.

use std::path::{Path, PathBuf};

use ncdwf_core::data::{MixtureSpec, SplitSpec};
use ncdwf_core::miregularizer::MiSign;
use ncdwf_core::models::ModelDims;
use ncdwf_core::pseudoreplay::InversionConfig;
use ncdwf_core::selflabel::SinkhornConfig;
use ncdwf_core::trainer::{DiscoveryOptions, PhaseConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_PRESET: &str = "synth-10-5-5";
pub const PRESETS: [&str; 3] = ["synth-10-5-5", "synth-100-20-80-style", "paper-scale"];

/// The threshold grid of the τ sensitivity sweep.
pub const TAU_GRID: [f64; 6] = [0.8, 0.85, 0.9, 0.95, 0.99, 0.999];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Gaussian mixture drawn from the `[data]` generator keys.
    Synthetic,
    /// Precomputed embeddings read from `data.csv_path`.
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    /// Minimum distance between class centers, in units of `noise_sigma`.
    pub min_separation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
    /// Directory holding the split CSVs; defaults to the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub labeled: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub extractor_hidden: Vec<usize>,
    /// Empty for linear heads.
    pub head_hidden: Vec<usize>,
    pub variational_hidden: usize,
    pub kci_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lambda_ce: f64,
    pub lambda_mi: f64,
    pub lambda_fd: f64,
    pub lambda_replay: f64,
    pub pseudo_fraction: f64,
    pub enable_plr: bool,
    pub enable_mir: bool,
    pub enable_fd: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoveryConfig {
    pub unified_head: bool,
    pub soft_targets: bool,
    pub squared_fd: bool,
    pub freeze_labeled_head: bool,
    pub mi_sign: MiSign,
    /// Absent means no clipping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    pub mi_frozen_target: bool,
    pub sigma_closed_form: bool,
    pub mi_through_extractor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Thresholds for the generalized reports.
    pub taus: Vec<f64>,
    /// Threshold used for `predictions.csv`.
    pub tau: f64,
    /// Evaluate test accuracy after every epoch for the training log.
    pub monitor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub discovery: DiscoveryConfig,
    pub sinkhorn: SinkhornConfig,
    pub inversion: InversionConfig,
    pub eval: EvalConfig,
}

/// Component switched off by `--ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoPlr,
    NoMir,
    NoFd,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::NoPlr, Ablation::NoMir, Ablation::NoFd];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoPlr => "no-plr",
            Ablation::NoMir => "no-mir",
            Ablation::NoFd => "no-fd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (expected no-plr, no-mir or no-fd)")))
    }
}

fn synth_10_5_5() -> RunConfig {
    RunConfig {
        seed: 0,
        out: PathBuf::from("out"),
        data: DataConfig {
            source: DataSource::Synthetic,
            classes: 10,
            per_class: 250,
            dim: 64,
            center_scale: 2.0,
            noise_sigma: 1.0,
            min_separation: 8.0,
            csv_path: None,
            dir: None,
            test_fraction: 0.2,
        },
        split: SplitConfig { labeled: 5, unlabeled: 5 },
        model: ModelConfig {
            latent_dim: 64,
            extractor_hidden: vec![64],
            head_hidden: vec![64],
            variational_hidden: 64,
            kci_hidden: 128,
        },
        phase1: Phase1Config {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
        },
        phase2: Phase2Config {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            lambda_ce: 1.0,
            lambda_mi: 0.01,
            lambda_fd: 0.5,
            lambda_replay: 1.0,
            pseudo_fraction: 0.25,
            enable_plr: true,
            enable_mir: true,
            enable_fd: true,
        },
        discovery: DiscoveryConfig {
            unified_head: true,
            soft_targets: false,
            squared_fd: false,
            freeze_labeled_head: false,
            mi_sign: MiSign::NegLogLikelihood,
            max_grad_norm: None,
            mi_frozen_target: false,
            sigma_closed_form: true,
            mi_through_extractor: false,
        },
        sinkhorn: SinkhornConfig {
            epsilon: 0.05,
            ..SinkhornConfig::default()
        },
        inversion: InversionConfig::default(),
        eval: EvalConfig {
            taus: TAU_GRID.to_vec(),
            tau: ncdwf_core::kci::DEFAULT_TAU,
            monitor: true,
        },
    }
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let mut c = synth_10_5_5();
    match name {
        "synth-10-5-5" => {}
        "synth-100-20-80-style" => {
            c.data.classes = 100;
            c.data.per_class = 50;
            c.split = SplitConfig { labeled: 20, unlabeled: 80 };
            c.phase1.epochs = 40;
            c.phase2.epochs = 20;
            c.phase2.batch_size = 128;
            c.inversion.per_class = 20;
        }
        "paper-scale" => {
            c.phase1.epochs = 200;
            c.phase1.batch_size = 512;
            c.phase2.epochs = 200;
            c.phase2.batch_size = 512;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(c)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// The preset with `text` laid over it.
    pub fn from_toml_over(preset_name: &str, text: &str) -> Result<Self> {
        let mut base = toml::Value::try_from(preset(preset_name)?).map_err(|e| Error::Config(e.to_string()))?;
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(preset_name: &str, path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_over(preset_name, &text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        match a {
            Ablation::NoPlr => self.phase2.enable_plr = false,
            Ablation::NoMir => self.phase2.enable_mir = false,
            Ablation::NoFd => self.phase2.enable_fd = false,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.out.clone())
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        Ok(SplitSpec::new(
            self.split.labeled + self.split.unlabeled,
            self.split.labeled,
            self.split.unlabeled,
        )?)
    }

    pub fn mixture_spec(&self) -> MixtureSpec {
        MixtureSpec {
            classes: self.data.classes,
            per_class: self.data.per_class,
            dim: self.data.dim,
            center_scale: self.data.center_scale,
            noise_sigma: self.data.noise_sigma,
            min_separation: self.data.min_separation,
            seed: self.seed,
        }
    }

    pub fn model_dims(&self, input_dim: usize) -> ModelDims {
        ModelDims {
            extractor_hidden: self.model.extractor_hidden.clone(),
            head_hidden: self.model.head_hidden.clone(),
            ..ModelDims::new(input_dim, self.model.latent_dim, self.split.labeled, self.split.unlabeled)
        }
    }

    pub fn phase1_config(&self) -> PhaseConfig {
        let p = &self.phase1;
        PhaseConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            momentum: p.momentum,
            seed: self.seed,
            ..PhaseConfig::default()
        }
    }

    pub fn phase2_config(&self) -> PhaseConfig {
        let p = &self.phase2;
        PhaseConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            momentum: p.momentum,
            lambda_ce: p.lambda_ce,
            lambda_mi: p.lambda_mi,
            lambda_fd: p.lambda_fd,
            lambda_replay: p.lambda_replay,
            pseudo_fraction: p.pseudo_fraction,
            seed: self.seed.wrapping_add(1),
            enable_plr: p.enable_plr,
            enable_mir: p.enable_mir,
            enable_fd: p.enable_fd,
        }
    }

    pub fn discovery_options(&self) -> DiscoveryOptions {
        let d = &self.discovery;
        DiscoveryOptions {
            unified_head: d.unified_head,
            soft_targets: d.soft_targets,
            squared_fd: d.squared_fd,
            freeze_labeled_head: d.freeze_labeled_head,
            mi_sign: d.mi_sign,
            max_grad_norm: d.max_grad_norm,
            mi_frozen_target: d.mi_frozen_target,
            sigma_closed_form: d.sigma_closed_form,
            mi_through_extractor: d.mi_through_extractor,
            sinkhorn: self.sinkhorn,
            inversion: self.inversion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if self.split.labeled == 0 || self.split.unlabeled == 0 {
            return bad("split.labeled and split.unlabeled must be at least 1".into());
        }
        if d.source == DataSource::Synthetic && self.split.labeled + self.split.unlabeled != d.classes {
            return bad(format!(
                "split.labeled + split.unlabeled = {} but data.classes = {}",
                self.split.labeled + self.split.unlabeled,
                d.classes
            ));
        }
        if d.source == DataSource::Csv && d.csv_path.is_none() {
            return bad("data.source = \"csv\" needs data.csv_path".into());
        }
        if d.source == DataSource::Synthetic {
            if d.classes == 0 || d.per_class == 0 || d.dim == 0 {
                return bad("data.classes, data.per_class and data.dim must be positive".into());
            }
            if !(d.noise_sigma > 0.0 && d.center_scale > 0.0) {
                return bad("data.noise_sigma and data.center_scale must be positive".into());
            }
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return bad(format!("data.test_fraction must lie in (0, 1), got {}", d.test_fraction));
        }
        let m = &self.model;
        if m.variational_hidden == 0 || m.kci_hidden == 0 {
            return bad("model.variational_hidden and model.kci_hidden must be positive".into());
        }
        self.model_dims(d.dim.max(1)).validate()?;
        self.phase1_config().validate()?;
        self.phase2_config().validate()?;
        self.inversion.validate()?;
        let s = &self.sinkhorn;
        if !(s.epsilon > 0.0 && s.epsilon.is_finite() && s.tol > 0.0 && s.max_iters > 0) {
            return bad("sinkhorn: epsilon and tol must be positive, max_iters at least 1".into());
        }
        if let Some(c) = self.discovery.max_grad_norm {
            if !(c > 0.0) {
                return bad("discovery.max_grad_norm must be positive".into());
            }
        }
        for &t in self.eval.taus.iter().chain(std::iter::once(&self.eval.tau)) {
            ncdwf_core::kci::validate_tau(t)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn empty_file_is_the_preset() {
        assert_eq!(RunConfig::from_toml_over(DEFAULT_PRESET, "").unwrap(), preset(DEFAULT_PRESET).unwrap());
    }

    #[test]
    fn file_values_override_preset() {
        let c = RunConfig::from_toml_over(DEFAULT_PRESET, "seed = 9\n[phase2]\nepochs = 3\n").unwrap();
        assert_eq!((c.seed, c.phase2.epochs, c.phase1.epochs), (9, 3, 100));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_over(DEFAULT_PRESET, "[phase2]\nepochz = 3\n").is_err());
        assert!(RunConfig::from_toml_over(DEFAULT_PRESET, "[nonsense]\n").is_err());
    }

    #[test]
    fn inconsistent_split_rejected() {
        let e = RunConfig::from_toml_over(DEFAULT_PRESET, "[split]\nlabeled = 4\n").unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn toml_round_trip_and_stable_hash() {
        let c = preset("synth-100-20-80-style").unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), preset(DEFAULT_PRESET).unwrap().hash());
    }
}
