use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reidtr::eval::{DEFAULT_IOU_THRESHOLD, DEFAULT_K1, DEFAULT_K2};
use reidtr::reid::ReIDConfig;
use reidtr::synth::SynthConfig;
use reidtr::train::{LossConfig, OptimizerConfig};
use reidtr::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory used when `--data` is not given.
    pub dir: Option<PathBuf>,
    pub seed: u64,
    /// Box jitter of the detector stub, as a fraction of box size.
    pub detector_noise: f64,
    pub benchmark: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            seed: 0,
            detector_noise: 0.02,
            benchmark: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub gallery_sizes: Vec<usize>,
    pub cbgm: bool,
    pub k1: usize,
    pub k2: usize,
    /// Seeds the detector run and the distractor draw of gallery sweeps.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            gallery_sizes: Vec::new(),
            cbgm: false,
            k1: DEFAULT_K1,
            k2: DEFAULT_K2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ReIDConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Missing file sections take their defaults; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Sets every seed of the run.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.optimizer.seed = seed;
        self.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.data.benchmark.validate()?;
        if !(self.data.detector_noise >= 0.0 && self.data.detector_noise.is_finite()) {
            return Err(Error::Config(format!(
                "data.detector_noise {} must be non-negative",
                self.data.detector_noise
            )));
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("eval.iou_threshold {} not in (0, 1]", self.eval.iou_threshold)));
        }
        if self.eval.k1 == 0 {
            return Err(Error::Config("eval.k1 must be at least 1".into()));
        }
        self.check_benchmark(&self.data.benchmark)
    }

    /// Consistency between the model and loss sections and a dataset.
    pub fn check_benchmark(&self, bench: &SynthConfig) -> Result<()> {
        check_model_fits(&self.model, bench)?;
        if self.loss.identities < bench.identities {
            return Err(Error::Config(format!(
                "loss.identities {} is smaller than the {} labeled identities of the data",
                self.loss.identities, bench.identities
            )));
        }
        Ok(())
    }
}

pub fn check_model_fits(model: &ReIDConfig, bench: &SynthConfig) -> Result<()> {
    if model.channels != bench.channels {
        return Err(Error::Config(format!(
            "model.channels {} does not match the {} feature channels of the data",
            model.channels, bench.channels
        )));
    }
    if model.queries < bench.persons_per_scene {
        return Err(Error::Config(format!(
            "model.queries {} cannot cover {} persons per scene",
            model.queries, bench.persons_per_scene
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [r#"{"modle": {}}"#, r#"{"model": {"depth": 3}}"#, r#"{"data": {"benchmark": {"x": 1}}}"#] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn cross_section_checks() {
        let bad = [
            r#"{"model": {"channels": 16}}"#,
            r#"{"model": {"queries": 2}}"#,
            r#"{"loss": {"identities": 8}}"#,
            r#"{"eval": {"k1": 0}}"#,
        ];
        for text in bad {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.eval.gallery_sizes = vec![10, 50];
        cfg.set_seed(7);
        let back = RunConfig::from_json(&cfg.to_json().to_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
