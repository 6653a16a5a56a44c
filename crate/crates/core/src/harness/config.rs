use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::training::{TrainConfig, TrainingMode, Transmitter};

use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    HybridMeta,
    JointAe,
    BpskMlMmse,
    BpskNeuralScratch,
    BpskNeuralJoint,
    BpskNeuralMeta,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::HybridMeta,
        Scheme::JointAe,
        Scheme::BpskMlMmse,
        Scheme::BpskNeuralScratch,
        Scheme::BpskNeuralJoint,
        Scheme::BpskNeuralMeta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::HybridMeta => "hybrid_meta",
            Scheme::JointAe => "joint_ae",
            Scheme::BpskMlMmse => "bpsk_ml_mmse",
            Scheme::BpskNeuralScratch => "bpsk_neural_scratch",
            Scheme::BpskNeuralJoint => "bpsk_neural_joint",
            Scheme::BpskNeuralMeta => "bpsk_neural_meta",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        Scheme::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn transmitter(self) -> Transmitter {
        match self {
            Scheme::HybridMeta | Scheme::JointAe => Transmitter::Neural,
            _ => Transmitter::Bpsk,
        }
    }

    /// Training loop the scheme needs, `None` for schemes without a training phase.
    pub fn training_mode(self) -> Option<TrainingMode> {
        match self {
            Scheme::HybridMeta | Scheme::BpskNeuralMeta => Some(TrainingMode::Meta),
            Scheme::JointAe | Scheme::BpskNeuralJoint => Some(TrainingMode::Joint),
            Scheme::BpskMlMmse | Scheme::BpskNeuralScratch => None,
        }
    }

    /// Test-time adaptation step size used when the config leaves it unset:
    /// the meta-training `eta` for meta schemes, `0.001` otherwise.
    pub fn default_test_eta(self, train_eta: f64) -> f64 {
        match self.training_mode() {
            Some(TrainingMode::Meta) => train_eta,
            _ => 0.001,
        }
    }

    pub fn needs_pilots(self) -> bool {
        matches!(self, Scheme::BpskMlMmse | Scheme::BpskNeuralScratch)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestConfig {
    /// Pilot blocks per test frame, `P`.
    pub pilots: usize,
    /// Payload blocks per run, spread evenly over the test frames.
    pub payload_blocks: usize,
    pub test_frames: usize,
    /// Adaptation step size; the scheme default applies when unset.
    pub eta: Option<f64>,
    pub adapt_steps: usize,
    /// SGD passes for the from-scratch decoder.
    pub scratch_steps: usize,
    pub runs: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            pilots: 8,
            payload_blocks: 10_000,
            test_frames: 500,
            eta: None,
            adapt_steps: 1,
            scratch_steps: 100,
            runs: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Pilots,
    TrainFrames,
    Rho,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: Axis,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub test: TestConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn invalid(key: &'static str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn new(scheme: Scheme) -> Self {
        let mut cfg = Self {
            scheme,
            train: TrainConfig::default(),
            test: TestConfig::default(),
            sweep: None,
        };
        cfg.train.transmitter = scheme.transmitter();
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        // the transmitter is implied by the scheme
        cfg.train.transmitter = cfg.scheme.transmitter();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn test_eta(&self) -> f64 {
        self.test.eta.unwrap_or_else(|| self.scheme.default_test_eta(self.train.eta))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.train.transmitter != self.scheme.transmitter() {
            return Err(invalid(
                "train.transmitter",
                format!("scheme {} uses a {:?} transmitter", self.scheme, self.scheme.transmitter()),
            ));
        }
        self.train.validate().map_err(|e| match e {
            crate::training::TrainError::Config { key, reason } => HarnessError::Config {
                key: format!("train.{key}"),
                reason,
            },
            other => HarnessError::Train(other),
        })?;
        let card = 1usize << self.train.k;
        let t = &self.test;
        self.check_pilots(t.pilots, card)?;
        if t.payload_blocks == 0 {
            return Err(invalid("test.payload_blocks", "must be at least 1"));
        }
        if t.test_frames == 0 {
            return Err(invalid("test.test_frames", "must be at least 1"));
        }
        if t.runs == 0 {
            return Err(invalid("test.runs", "must be at least 1"));
        }
        if let Some(eta) = t.eta {
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(invalid("test.eta", "must be finite and non-negative"));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(invalid("sweep.values", "must not be empty"));
            }
            for &v in &sweep.values {
                match sweep.axis {
                    Axis::Pilots | Axis::TrainFrames if !(v >= 0.0 && v.fract() == 0.0) => {
                        return Err(invalid("sweep.values", format!("{v} is not a non-negative integer")));
                    }
                    Axis::Pilots => self.check_pilots(v as usize, card)?,
                    Axis::Rho if !(0.0..=1.0).contains(&v) => {
                        return Err(invalid("sweep.values", format!("rho = {v} outside [0, 1]")));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn check_pilots(&self, p: usize, card: usize) -> Result<(), HarnessError> {
        if p > card {
            return Err(invalid("test.pilots", format!("P = {p} exceeds the {card} distinct messages")));
        }
        if p == 0 && self.scheme.needs_pilots() {
            return Err(invalid("test.pilots", format!("scheme {} needs at least one pilot", self.scheme)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
scheme = "hybrid_meta"

[train]
k = 4
n = 4
taps = 2
frame_len = 16
adapt_blocks = 4
frames = 100

[test]
pilots = 4
payload_blocks = 1000
test_frames = 50
runs = 2

[sweep]
axis = "pilots"
values = [1, 2, 4, 8]
"#;

    #[test]
    fn parses_sample() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.scheme, Scheme::HybridMeta);
        assert_eq!(cfg.train.k, 4);
        assert_eq!(cfg.train.kappa, 0.01);
        assert_eq!(cfg.test_eta(), 0.1);
        assert_eq!(cfg.sweep.as_ref().unwrap().values.len(), 4);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = SAMPLE.replace("frames = 100", "frames = 100\nlearning_rate = 3");
        match ExperimentConfig::from_toml(&text) {
            Err(HarnessError::Parse(msg)) => assert!(msg.contains("learning_rate"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let text = format!("{SAMPLE}\n[extra]\nx = 1\n");
        match ExperimentConfig::from_toml(&text) {
            Err(HarnessError::Parse(msg)) => assert!(msg.contains("extra"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_named() {
        let text = SAMPLE.replace("pilots = 4", "pilots = 17");
        assert!(matches!(
            ExperimentConfig::from_toml(&text),
            Err(HarnessError::Config { key, .. }) if key == "test.pilots"
        ));
        let text = SAMPLE.replace("adapt_blocks = 4", "adapt_blocks = 40");
        assert!(matches!(
            ExperimentConfig::from_toml(&text),
            Err(HarnessError::Config { key, .. }) if key == "train.adapt_blocks"
        ));
        let text = SAMPLE.replace("values = [1, 2, 4, 8]", "values = [1.5]");
        assert!(matches!(
            ExperimentConfig::from_toml(&text),
            Err(HarnessError::Config { key, .. }) if key == "sweep.values"
        ));
        let text = SAMPLE.replace("hybrid_meta", "bpsk_ml_mmse");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.train.transmitter, Transmitter::Bpsk);
        let mut cfg = ExperimentConfig::new(Scheme::JointAe);
        cfg.train.transmitter = Transmitter::Bpsk;
        assert!(matches!(
            cfg.validate(),
            Err(HarnessError::Config { key, .. }) if key == "train.transmitter"
        ));
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(Scheme::parse(s.name()), Some(s));
        }
        assert_eq!(Scheme::parse("nope"), None);
    }
}
