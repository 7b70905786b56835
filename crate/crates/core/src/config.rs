//! Run configuration: every tunable of every stage in one TOML document.
//! Unknown keys are rejected; the resolved form is what gets hashed and
//! written next to outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderDims, Stage1Config};
use crate::error::{GeoError, Result};
use crate::graph::SynthConfig;
use crate::manifold::{Geometry, ManifoldSpec};
use crate::trainer::model::BackboneConfig;
use crate::trainer::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub k: usize,
    pub hyperbolic_c: f64,
    pub spherical_c: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: 10,
            hyperbolic_c: -1.0,
            spherical_c: 1.0,
        }
    }
}

impl GraphConfig {
    pub fn spec(&self, g: Geometry) -> Result<ManifoldSpec> {
        match g {
            Geometry::Euclidean => Ok(ManifoldSpec::euclidean()),
            Geometry::Hyperbolic => ManifoldSpec::hyperbolic(self.hyperbolic_c),
            Geometry::Spherical => ManifoldSpec::spherical(self.spherical_c),
        }
    }
}

/// Prompt encoder widths; the input width follows the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub hidden: usize,
    pub output: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        let d = EncoderDims::default();
        Self {
            hidden: d.hidden,
            output: d.output,
        }
    }
}

impl PromptConfig {
    pub fn dims(&self, input: usize) -> EncoderDims {
        EncoderDims {
            input,
            hidden: self.hidden,
            output: self.output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub periods: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { periods: vec![1, 2, 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory used when none is given on the command line.
    pub out_dir: String,
    pub synth: SynthConfig,
    pub graph: GraphConfig,
    pub encoder: PromptConfig,
    pub stage1: Stage1Config,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: String::new(),
            synth: SynthConfig::default(),
            graph: GraphConfig::default(),
            encoder: PromptConfig::default(),
            stage1: Stage1Config::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GeoError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GeoError::from(e).context(path.display().to_string()))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Copies the run seed into the stage configs and validates every
    /// section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.synth.validate()?;
        if self.graph.k == 0 {
            return Err(GeoError::Config("graph.k must be at least 1".into()));
        }
        for g in Geometry::ALL {
            self.graph.spec(g)?;
        }
        if self.encoder.hidden == 0 || self.encoder.output == 0 {
            return Err(GeoError::Config("encoder widths must be positive".into()));
        }
        self.backbone.validate()?;
        self.train.validate()?;
        if self.sweep.periods.is_empty() || self.sweep.periods.contains(&0) {
            return Err(GeoError::Config("sweep.periods must be non-empty and positive".into()));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the resolved TOML text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\n[train]\nlambda = 2.0\n").is_ok());
        assert!(RunConfig::from_toml("sed = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlamda = 2.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nseed = 2\n").is_err());
        assert!(RunConfig::from_toml("[backbone]\nheads = 3\n")
            .unwrap()
            .resolve()
            .is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_toml("seed = 9\nout_dir = \"/tmp/o\"\n[graph]\nk = 5\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(c.train.seed, 9);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap().resolve().unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let other = RunConfig { seed: 10, ..c.clone() }.resolve().unwrap();
        assert_ne!(other.hash(), c.hash());
    }
}
