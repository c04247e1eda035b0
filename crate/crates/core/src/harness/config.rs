use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blp::HmcConfig;
use crate::error::{Error, Result};
use crate::folds::DEFAULT_THRESHOLD;
use crate::metrics::DEFAULT_BINS;
use crate::mlp::MlpHyperparams;
use crate::synth::SynthSpec;
use crate::tuning::GridSpec;

/// The seven model variants of the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "MLP+P")]
    MlpPlatt,
    #[serde(rename = "MLP-D")]
    MlpDropout,
    #[serde(rename = "MLP-E")]
    MlpEnsemble,
    #[serde(rename = "MLP-BLP")]
    MlpBlp,
    #[serde(rename = "MLP-E+P")]
    MlpEnsemblePlatt,
    #[serde(rename = "MLP-BLP+P")]
    MlpBlpPlatt,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Mlp,
        Method::MlpPlatt,
        Method::MlpDropout,
        Method::MlpEnsemble,
        Method::MlpBlp,
        Method::MlpEnsemblePlatt,
        Method::MlpBlpPlatt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mlp => "MLP",
            Method::MlpPlatt => "MLP+P",
            Method::MlpDropout => "MLP-D",
            Method::MlpEnsemble => "MLP-E",
            Method::MlpBlp => "MLP-BLP",
            Method::MlpEnsemblePlatt => "MLP-E+P",
            Method::MlpBlpPlatt => "MLP-BLP+P",
        }
    }

    /// File-name form of the method name.
    pub fn slug(self) -> &'static str {
        match self {
            Method::Mlp => "mlp",
            Method::MlpPlatt => "mlp_p",
            Method::MlpDropout => "mlp_d",
            Method::MlpEnsemble => "mlp_e",
            Method::MlpBlp => "mlp_blp",
            Method::MlpEnsemblePlatt => "mlp_e_p",
            Method::MlpBlpPlatt => "mlp_blp_p",
        }
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, Method::MlpEnsemble | Method::MlpEnsemblePlatt)
    }

    /// Methods computed from the same trained networks share a group and are
    /// compared with paired tests.
    pub fn pairing_group(self) -> &'static str {
        if self.is_ensemble() {
            "ensemble"
        } else {
            "baseline"
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldConfig {
    pub threshold: f64,
    pub k: usize,
    pub test: u8,
    pub validation: u8,
    /// Seed for clustering and fold assignment; derived from the master seed
    /// when absent.
    pub seed: Option<u64>,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            k: 5,
            test: 0,
            validation: 1,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlpConfig {
    pub taus: Vec<f64>,
    pub hmc: HmcConfig,
}

impl Default for BlpConfig {
    fn default() -> Self {
        Self {
            taus: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            hmc: HmcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub seed: u64,
    #[serde(flatten)]
    pub spec: SynthSpec,
}

/// Declarative description of one study run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the target in result tables.
    pub target: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Sparse feature file; mutually exclusive with `synthetic`.
    pub dataset: Option<PathBuf>,
    /// Fold file to use instead of clustering.
    pub folds_file: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub repeats: usize,
    pub ensemble_repeats: usize,
    pub ensemble_size: usize,
    pub mc_passes: usize,
    pub bins: usize,
    pub alpha: f64,
    pub folds: FoldConfig,
    pub grid: GridSpec,
    /// Fixed baseline hyperparameters; skips the grid search when present.
    pub baseline: Option<MlpHyperparams>,
    pub blp: BlpConfig,
    pub synthetic: Option<SyntheticSource>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            target: "target".into(),
            seed: 0,
            output_dir: PathBuf::from("run"),
            dataset: None,
            folds_file: None,
            methods: Method::ALL.to_vec(),
            repeats: 10,
            ensemble_repeats: 5,
            ensemble_size: 50,
            mc_passes: 100,
            bins: DEFAULT_BINS,
            alpha: 0.05,
            folds: FoldConfig::default(),
            grid: GridSpec::default(),
            baseline: None,
            blp: BlpConfig::default(),
            synthetic: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        cfg.dataset.as_mut().map(resolve);
        cfg.folds_file.as_mut().map(resolve);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => return bad("set either dataset or [synthetic], not both".into()),
            (None, None) => return bad("no dataset or [synthetic] source".into()),
            (Some(p), None) if !p.is_file() => return bad(format!("dataset {} not found", p.display())),
            _ => {}
        }
        if let Some(p) = &self.folds_file {
            if !p.is_file() {
                return bad(format!("folds file {} not found", p.display()));
            }
        }
        if self.methods.is_empty() {
            return bad("empty method list".into());
        }
        if self.repeats == 0 || self.ensemble_repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.methods.iter().any(|m| m.is_ensemble()) && self.ensemble_size < 2 {
            return bad("ensemble_size must be at least 2".into());
        }
        if self.mc_passes == 0 || self.bins == 0 {
            return bad("mc_passes and bins must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must be in (0, 1)".into());
        }
        if self.blp.taus.is_empty() {
            return bad("empty BLP tau grid".into());
        }
        match &self.baseline {
            Some(hp) => hp.validate(),
            None => self.grid.validate(),
        }
    }

    /// Methods in canonical order without duplicates.
    pub fn method_list(&self) -> Vec<Method> {
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        m
    }
}
