//! Pipeline configuration: one TOML document with a section per stage.
//!
//! Stage seeds that the file does not pin are derived from the global seed,
//! so `--seed` alone reseeds every stochastic stage.

use std::path::{Path, PathBuf};

use peerassign::assign::GAConfig;
use peerassign::cohort::SynthConfig;
use peerassign::evalharness::derive_seed;
use peerassign::peernn::{Hyper, OptConfig, SYNTHETIC_HYPER};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Cohort CSV to use instead of the one written by `synth`.
    pub cohort: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            cohort: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Training {
    pub hyper: Hyper,
    pub opt: OptConfig,
}

impl Default for Training {
    fn default() -> Self {
        Training {
            hyper: SYNTHETIC_HYPER,
            opt: OptConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prediction {
    /// Survey replays per classroom.
    pub replicates: usize,
    /// Pixels per matrix cell in PGM heatmaps.
    pub heatmap_scale: usize,
    pub seed: u64,
}

impl Default for Prediction {
    fn default() -> Self {
        Prediction {
            replicates: 1000,
            heatmap_scale: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Estimation {
    /// Also fit the classroom random-intercept variants.
    pub random_effect: bool,
    /// Also fit the uninstrumented regression on predicted Ω.
    pub naive: bool,
}

impl Default for Estimation {
    fn default() -> Self {
        Estimation {
            random_effect: true,
            naive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Assignment {
    /// School to reassign; the first school when absent.
    pub school: Option<u64>,
    /// Peer-effect coefficient; taken from the estimation report when absent.
    pub beta: Option<f64>,
    pub ga: GAConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub training: Training,
    pub prediction: Prediction,
    pub estimation: Estimation,
    pub assignment: Assignment,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            training: Training::default(),
            prediction: Prediction::default(),
            estimation: Estimation::default(),
            assignment: Assignment::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub fitness: Option<peerassign::assign::FitnessKind>,
    pub phi: Option<f64>,
    pub rho: Option<f64>,
    pub iters: Option<usize>,
    pub swaps: Option<usize>,
    pub mut_prob: Option<f64>,
}

/// Keys of the per-stage seeds, in derivation order.
const STAGE_SEEDS: [&[&str]; 4] = [
    &["synth", "seed"],
    &["training", "opt", "seed"],
    &["prediction", "seed"],
    &["assignment", "ga", "seed"],
];

fn is_pinned(table: &toml::Table, path: &[&str]) -> bool {
    let mut cur = table;
    for (k, key) in path.iter().enumerate() {
        match cur.get(*key) {
            Some(toml::Value::Table(t)) if k + 1 < path.len() => cur = t,
            Some(_) if k + 1 == path.len() => return true,
            _ => return false,
        }
    }
    false
}

impl PipelineConfig {
    pub fn parse(text: &str, overrides: &Overrides) -> CliResult<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let mut cfg: PipelineConfig = table
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.apply(overrides, |path| is_pinned(&table, path))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text, overrides)
            }
            None => Self::parse("", overrides),
        }
    }

    fn apply(&mut self, o: &Overrides, pinned: impl Fn(&[&str]) -> bool) -> CliResult<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.paths.out_dir = d.clone();
        }
        for (k, path) in STAGE_SEEDS.iter().enumerate() {
            if pinned(path) {
                continue;
            }
            let derived = derive_seed(self.seed, k as u64, 0);
            match k {
                0 => self.synth.seed = derived,
                1 => self.training.opt.seed = derived,
                2 => self.prediction.seed = derived,
                _ => self.assignment.ga.seed = derived,
            }
        }
        let ga = &mut self.assignment.ga;
        if let Some(f) = o.fitness {
            ga.fitness = f;
        }
        if let Some(v) = o.phi {
            ga.phi = v;
        }
        if let Some(v) = o.rho {
            ga.rho = v;
        }
        if let Some(v) = o.iters {
            ga.iterations = v;
        }
        if let Some(v) = o.swaps {
            ga.swaps = v;
        }
        if let Some(v) = o.mut_prob {
            ga.mutation_prob = v;
        }
        self.validate()
    }

    fn validate(&self) -> CliResult<()> {
        let core = |r: peerassign::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        core(self.synth.validate())?;
        core(self.assignment.ga.validate())?;
        if self.prediction.replicates == 0 || self.prediction.heatmap_scale == 0 {
            return Err(CliError::Config(
                "prediction.replicates and prediction.heatmap_scale must be >= 1".into(),
            ));
        }
        let h = self.training.hyper;
        if ![h.mu, h.kappa, h.lambda].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(CliError::Config("training.hyper weights must be finite and >= 0".into()));
        }
        if self.assignment.beta.is_some_and(|b| !b.is_finite()) {
            return Err(CliError::Config("assignment.beta must be finite".into()));
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults_with_derived_seeds() {
        let cfg = PipelineConfig::parse("", &Overrides::default()).unwrap();
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.training.hyper, SYNTHETIC_HYPER);
        assert_eq!(cfg.synth.seed, derive_seed(1, 0, 0));
        assert_ne!(cfg.synth.seed, cfg.assignment.ga.seed);
    }

    #[test]
    fn pinned_stage_seed_survives_global_override() {
        let o = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        let cfg = PipelineConfig::parse("[synth]\nseed = 5\n", &o).unwrap();
        assert_eq!(cfg.synth.seed, 5);
        assert_eq!(cfg.training.opt.seed, derive_seed(9, 1, 0));
    }

    #[test]
    fn flags_override_file() {
        let o = Overrides {
            iters: Some(7),
            phi: Some(0.5),
            ..Overrides::default()
        };
        let cfg = PipelineConfig::parse("[assignment.ga]\niterations = 40\nphi = 2.0\n", &o).unwrap();
        assert_eq!(cfg.assignment.ga.iterations, 7);
        assert_eq!(cfg.assignment.ga.phi, 0.5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(PipelineConfig::parse("[training]\nlearning_rate = 1\n", &Overrides::default()).is_err());
        assert!(PipelineConfig::parse("[assignment.ga]\nmutation_prob = 2.0\n", &Overrides::default()).is_err());
        assert!(PipelineConfig::parse("seed = \"x\"", &Overrides::default()).is_err());
    }

    #[test]
    fn shipped_default_config_matches_code_defaults() {
        let text = include_str!("../../../configs/default.toml");
        let cfg = PipelineConfig::parse(text, &Overrides::default()).unwrap();
        assert_eq!(cfg, PipelineConfig::parse("", &Overrides::default()).unwrap());
        let quick = include_str!("../../../configs/quick.toml");
        assert!(PipelineConfig::parse(quick, &Overrides::default()).is_ok());
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.assignment.ga.phi = 0.3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
