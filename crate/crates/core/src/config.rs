//! Run configuration: one strict JSON document holding every component's
//! settings and a single seed from which all other seeds are derived.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cim::CimConfig;
use crate::error::{Error, Result};
use crate::losses::{summarize, LossConfig, MaskMap, MetricSummary};
use crate::model::{build_model, predict, Model, ModelConfig};
use crate::rng;
use crate::synth::{split, Sample, Split, SyntheticConfig};
use crate::train::{fit, Batch, EpochRecord, StepContext, TrainConfig, TrainHistory};

const DATA_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;
const CIM_STREAM: u64 = 4;
const SPLIT_STREAM: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub loss: LossConfig,
    pub cim: CimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            split: [0.7, 0.15, 0.15],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticConfig::default(),
            loss: LossConfig::default(),
            cim: CimConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses strictly (unknown keys are errors), derives the component
    /// seeds and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text)?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(e) => Error::Config(format!("{}: {e}", path.display())),
            other => other,
        })
    }

    /// Overwrites every component seed with one derived from `seed`.
    pub fn derive_seeds(&mut self) {
        self.synthetic.seed = self.data_seed();
        self.train.seed = rng::derive(self.seed, TRAIN_STREAM);
        self.cim.seed = rng::derive(self.seed, CIM_STREAM);
    }

    pub fn data_seed(&self) -> u64 {
        rng::derive(self.seed, DATA_STREAM)
    }

    pub fn model_seed(&self) -> u64 {
        rng::derive(self.seed, MODEL_STREAM)
    }

    pub fn split_seed(&self) -> u64 {
        rng::derive(self.seed, SPLIT_STREAM)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synthetic.validate()?;
        self.loss.validate()?;
        self.cim.validate()?;
        if self.split.iter().any(|f| f.is_nan() || *f < 0.0)
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split fractions {:?} must be non-negative and sum to 1",
                self.split
            )));
        }
        if self.synthetic.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "synthetic image size {} differs from model image size {}",
                self.synthetic.image_size, self.model.image_size
            )));
        }
        Ok(())
    }

    pub fn step_context(&self) -> StepContext {
        StepContext {
            train: self.train.clone(),
            loss: self.loss,
            cim: self.cim,
        }
    }
}

/// Result of a full training run.
pub struct RunOutcome {
    pub split: Split,
    pub history: TrainHistory,
    /// Best-validation parameters.
    pub model: Model,
    pub test: MetricSummary,
}

fn subset(dataset: &[Sample], indices: &[usize]) -> Vec<Sample> {
    indices.iter().map(|&i| dataset[i].clone()).collect()
}

/// Splits `dataset`, trains from a freshly seeded model, and evaluates the
/// best-validation snapshot on the test partition.
pub fn train_run(
    cfg: &RunConfig,
    dataset: &[Sample],
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let parts = split(
        dataset,
        cfg.split,
        cfg.split_seed(),
        cfg.synthetic.heldout_domain(),
    )?;
    if parts.test.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    let (train, val, test) = (
        subset(dataset, &parts.train),
        subset(dataset, &parts.val),
        subset(dataset, &parts.test),
    );
    let model = build_model(&cfg.model, cfg.model_seed())?;
    let fitted = fit(model, &train, &val, &cfg.step_context(), on_epoch)?;
    let batch = Batch::from_samples(&test)?;
    let probs = predict(&fitted.best, &batch.images, cfg.train.batch_size)?;
    let test = summarize(&MaskMap::argmax(&probs)?, &batch.masks)?;
    Ok(RunOutcome {
        split: parts,
        history: fitted.history,
        model: fitted.best,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults_with_derived_seeds() {
        let cfg = RunConfig::from_json("{}").unwrap();
        let mut expected = RunConfig::default();
        expected.derive_seeds();
        assert_eq!(cfg, expected);
        assert_ne!(cfg.train.seed, cfg.cim.seed);
        assert_ne!(cfg.synthetic.seed, cfg.train.seed);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"sed": 1}"#,
            r#"{"train": {"learning_rate": 1}}"#,
            r#"{"model": {"chanels": [1]}}"#,
            r#"{"cim": {"nf": 3}}"#,
            r#"{"train": {"seed": 3}}"#,
            r#"{"synthetic": {"spurious": {"confound": "tint-density", "strength": 0.5, "x": 1}}}"#,
        ] {
            assert!(RunConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn nested_overrides_and_validation() {
        let cfg = RunConfig::from_json(
            r#"{"seed": 7, "train": {"epochs": 3, "cim_enabled": false},
                "synthetic": {"spurious": {"confound": "tint-density", "strength": 0.8}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(!cfg.train.cim_enabled);
        assert_eq!(cfg.synthetic.spurious.as_ref().unwrap().strength, 0.8);
        assert!(RunConfig::from_json(r#"{"train": {"batch_size": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"split": [0.5, 0.5, 0.5]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"synthetic": {"image_size": 96}}"#).is_err());
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut cfg = RunConfig {
            seed: 3,
            ..RunConfig::default()
        };
        cfg.derive_seeds();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}
