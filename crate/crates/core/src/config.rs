//! The single JSON run configuration shared by the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cv::{prepare, PreparedData};
use crate::data_io::{
    parse_expression, read_geometry, read_gmt, ExpressionFormat, ExpressionMatrix,
    GeneSetCollection, PatchFeatureMatrix, SpotGeometry,
};
use crate::encoders::ModelConfig;
use crate::error::{PearlError, Result};
use crate::preprocess::PreprocessConfig;
use crate::ssgsea::SsgseaConfig;
use crate::trainer::TrainConfig;

/// Input files of a run. Relative paths are resolved against the directory
/// holding the configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub expression: PathBuf,
    pub expression_format: ExpressionFormat,
    pub gene_sets: PathBuf,
    pub coordinates: PathBuf,
    pub features: PathBuf,
}

/// Every section is required; `train` and `model` fields individually fall
/// back to their defaults. `seed` seeds model initialization and training
/// and overrides `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: DataPaths,
    pub preprocess: PreprocessConfig,
    pub ssgsea: SsgseaConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

/// Raw inputs named by [`DataPaths`].
#[derive(Clone, Debug)]
pub struct RunInputs {
    pub expression: ExpressionMatrix,
    pub geometry: Vec<SpotGeometry>,
    pub gene_sets: GeneSetCollection,
    pub features: PatchFeatureMatrix,
}

impl RunConfig {
    /// Parses and validates a configuration. Schema violations, including a
    /// missing field, are reported as [`PearlError::Config`] naming the field.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| PearlError::Config(format!("schema: {e}")))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PearlError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.paths.resolve_against(dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.ssgsea.validate()?;
        self.train.validate()
    }

    /// Replaces the run seed, keeping `train.seed` in step.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn read_inputs(&self) -> Result<RunInputs> {
        let p = &self.paths;
        let expression = parse_expression(&p.expression, p.expression_format)?;
        let gmt = read_gmt(&p.gene_sets)?;
        if gmt.duplicate_genes > 0 {
            log::warn!("{} duplicate gene entries in gene sets ignored", gmt.duplicate_genes);
        }
        Ok(RunInputs {
            expression,
            geometry: read_geometry(&p.coordinates)?,
            gene_sets: gmt.collection,
            features: PatchFeatureMatrix::read(&p.features)?,
        })
    }

    /// Reads the inputs, preprocesses, scores pathways and aligns everything
    /// into a training set.
    pub fn prepare(&self) -> Result<PreparedData> {
        let i = self.read_inputs()?;
        prepare(&i.expression, &i.geometry, &i.gene_sets, &i.features, &self.preprocess, &self.ssgsea)
    }
}

impl DataPaths {
    fn resolve_against(&mut self, dir: &Path) {
        for p in [
            &mut self.expression,
            &mut self.gene_sets,
            &mut self.coordinates,
            &mut self.features,
        ] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 7,
        "paths": {
            "expression": "expr.tsv",
            "expression_format": "sparse_triplet_tsv",
            "gene_sets": "sets.gmt",
            "coordinates": "coords.csv",
            "features": "features.tsv"
        },
        "preprocess": {"min_spots_per_gene": 10, "target_sum": 10000.0, "top_hvg": 50, "smoothing_enabled": true},
        "ssgsea": {"weight_exponent": 0.75, "null_sets": 100, "rng_seed": 0, "epsilon": 1e-12},
        "train": {},
        "model": {}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.model.heads, 8);
        let again = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace(r#""top_hvg": 50, "#, "");
        let err = RunConfig::from_json(&text).unwrap_err();
        assert_eq!(err.code(), "config");
        assert!(err.to_string().contains("top_hvg"), "{err}");
        let text = MINIMAL.replace(r#""seed": 7,"#, "");
        assert!(RunConfig::from_json(&text).unwrap_err().to_string().contains("seed"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut p = RunConfig::from_json(MINIMAL).unwrap().paths;
        p.resolve_against(Path::new("/data/run"));
        assert_eq!(p.expression, PathBuf::from("/data/run/expr.tsv"));
    }
}
