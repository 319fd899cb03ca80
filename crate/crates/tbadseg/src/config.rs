//! TOML run configuration tying every stage together.
//!
//! A single `RunConfig` file drives the CLI end to end: where the cases come
//! from, how they are preprocessed and split, which networks the chosen
//! pipeline trains, and where artifacts land.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::networks::{ClassifierConfig, SegmenterConfig};
use crate::phantom::PhantomSpec;
use crate::pipelines::{PipelineConfig, PipelineKind};
use crate::preprocess::PreprocessConfig;
use crate::training::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Where the raw image/label pairs come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// Synthetic cohort written under `dir` by the `phantom` subcommand.
    Phantom {
        dir: PathBuf,
        count: usize,
        /// Fraction of cases carrying false-lumen thrombus.
        flt_fraction: f64,
        #[serde(default)]
        spec: PhantomSpec,
    },
    /// Pre-existing `dir/images` + `dir/labels` NIfTI tree.
    Real { dir: PathBuf },
}

impl DataConfig {
    pub fn dir(&self) -> &Path {
        match self {
            DataConfig::Phantom { dir, .. } => dir,
            DataConfig::Real { dir } => dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataConfig::Phantom { count, flt_fraction, spec, .. } => {
                if *count == 0 {
                    return Err(Error::Config("phantom cohort count must be at least 1".into()));
                }
                if !(0.0..=1.0).contains(flt_fraction) {
                    return Err(Error::Config(format!("flt_fraction {flt_fraction} outside [0,1]")));
                }
                spec.validate()
            }
            DataConfig::Real { .. } => Ok(()),
        }
    }
}

/// How the cohort is divided into train/validation/test roles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitConfig {
    Holdout { train: usize, validation: usize, test: usize },
    Kfold { folds: usize },
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            SplitConfig::Holdout { train, validation, test } => {
                if *train == 0 || *validation == 0 || *test == 0 {
                    return Err(Error::Config("holdout roles must each hold at least one case".into()));
                }
                Ok(())
            }
            SplitConfig::Kfold { folds } => {
                if *folds < 2 {
                    return Err(Error::Config("k-fold splitting needs at least 2 folds".into()));
                }
                Ok(())
            }
        }
    }
}

/// Complete description of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub run_id: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub segmenter: SegmenterConfig,
    /// Second ensemble member; required only for the ensemble pipeline.
    pub ensemble_partner: Option<SegmenterConfig>,
    /// FLT-presence gate; required only when the multitask pipeline does not
    /// bypass the classifier.
    pub classifier: Option<ClassifierConfig>,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    /// Small phantom-cohort template used by `init` and the tests.
    pub fn phantom_template(run_id: &str, seed: u64) -> Self {
        let mut augment = AugmentConfig::default();
        augment.seed = seed;
        let mut train = TrainConfig::default();
        train.seed = seed;
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            run_id: run_id.to_string(),
            output_dir: PathBuf::from("runs").join(run_id),
            seed,
            data: DataConfig::Phantom {
                dir: PathBuf::from("data").join(run_id),
                count: 30,
                flt_fraction: 0.5,
                spec: PhantomSpec::default(),
            },
            split: SplitConfig::Holdout { train: 20, validation: 5, test: 5 },
            preprocess: PreprocessConfig::default(),
            augment,
            segmenter: SegmenterConfig::unet3d(1, 4, seed),
            ensemble_partner: None,
            classifier: None,
            train,
            pipeline: PipelineConfig::new(PipelineKind::SingleStep),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.run_id.is_empty() {
            return Err(Error::Config("run_id must not be empty".into()));
        }
        self.data.validate()?;
        self.split.validate()?;
        self.preprocess.validate()?;
        self.augment.validate()?;
        self.segmenter.validate()?;
        if let Some(partner) = &self.ensemble_partner {
            partner.validate()?;
        }
        if let Some(cls) = &self.classifier {
            cls.validate()?;
        }
        self.train.validate()?;
        self.pipeline.validate()?;
        if self.pipeline.kind == PipelineKind::Ensemble && self.ensemble_partner.is_none() {
            return Err(Error::Config("ensemble pipeline requires an ensemble_partner network".into()));
        }
        if self.pipeline.kind == PipelineKind::Multitask
            && !self.pipeline.bypass_classifier
            && self.classifier.is_none()
        {
            return Err(Error::Config(
                "multitask pipeline with bypass_classifier = false requires a classifier".into(),
            ));
        }
        if self.augment.patch_size != self.pipeline.patch_size {
            return Err(Error::Config(format!(
                "augment patch_size {:?} must match pipeline patch_size {:?}",
                self.augment.patch_size, self.pipeline.patch_size
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // [TRIVIAL] round-trip through TOML preserves every section.
    #[test]
    fn toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut cfg = RunConfig::phantom_template("demo", 7);
        cfg.ensemble_partner = Some(SegmenterConfig::swin_unetr(1, 4, 8));
        cfg.classifier = Some(ClassifierConfig::small(2, 9));
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.run_id, "demo");
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.segmenter.base_width, cfg.segmenter.base_width);
        assert!(matches!(loaded.data, DataConfig::Phantom { count: 30, .. }));
        assert!(loaded.ensemble_partner.is_some());
        assert_eq!(loaded.classifier.unwrap().seed, 9);
    }

    // [TRIVIAL] template validates as-is.
    #[test]
    fn template_is_valid() {
        RunConfig::phantom_template("t", 0).validate().unwrap();
    }

    // [DERIVED] the ensemble pipeline is unusable with a single member.
    #[test]
    fn ensemble_requires_partner() {
        let mut cfg = RunConfig::phantom_template("t", 0);
        cfg.pipeline = PipelineConfig::new(PipelineKind::Ensemble);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.ensemble_partner = Some(SegmenterConfig::swin_unetr(1, 4, 1));
        cfg.validate().unwrap();
    }

    // [DERIVED] a gated multitask run cannot proceed without a classifier.
    #[test]
    fn gated_multitask_requires_classifier() {
        let mut cfg = RunConfig::phantom_template("t", 0);
        cfg.pipeline = PipelineConfig::new(PipelineKind::Multitask);
        cfg.pipeline.bypass_classifier = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.classifier = Some(ClassifierConfig::small(2, 0));
        cfg.validate().unwrap();
    }

    // [TRIVIAL] mismatched patch sizes between augmentation and inference
    // would train on a different receptive field than the sliding window.
    #[test]
    fn patch_size_mismatch_rejected() {
        let mut cfg = RunConfig::phantom_template("t", 0);
        cfg.augment.patch_size = [64, 64, 64];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    // [TRIVIAL] loading enforces validation, not just parsing.
    #[test]
    fn load_rejects_invalid_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        let mut cfg = RunConfig::phantom_template("t", 0);
        cfg.run_id = String::new();
        let text = toml::to_string_pretty(&cfg).unwrap();
        std::fs::write(&path, text).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::load(&dir.path().join("missing.toml")),
            Err(Error::NotFound(_))
        ));
    }
}
