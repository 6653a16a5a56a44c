//! Online training: pilot-driven decoder adaptation, meta-gradients for the
//! decoder initialization, policy-gradient encoder updates, and the frame
//! loops that tie them to a fading channel.

mod adapt;
mod online;

pub use adapt::{
    adapt_decoder, encoder_update, meta_gradient, meta_gradient_unrolled, meta_step, meta_update,
    policy_gradient, Adaptation, MetaStep,
};
pub use online::{
    message_schedule, run_joint_training, run_meta_training, train_decoder_from_scratch,
    FrameStats, Trainer, TrainingMode, TrainOutcome,
};

use std::cell::Cell;
use std::marker::PhantomData;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::DiffError;
use crate::baselines::BaselineError;
use crate::channel::{snr_to_n0, ChannelError, ComplexVec, ReceivedBlock};
use crate::link::LinkError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {key}: {reason}")]
    Config { key: &'static str, reason: String },
    #[error("pilot set is empty")]
    EmptyPilots,
    #[error("pilot messages and received blocks differ in count ({messages} vs {blocks})")]
    PilotCount { messages: usize, blocks: usize },
    #[error("feedback for frame {feedback} applied to frame {frame}")]
    FeedbackFrame { frame: u64, feedback: u64 },
    #[error("feedback carries {found} losses for a {expected}-block frame")]
    FeedbackLength { expected: usize, found: usize },
    #[error("the feedback link does not exist during the test phase")]
    FeedbackInTestPhase,
    #[error("invalid frame: {0}")]
    Frame(String),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

impl TrainError {
    /// True for failures caused by non-finite values during training.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::Diff(DiffError::NonFinite { .. })
                | TrainError::Link(LinkError::Diff(DiffError::NonFinite { .. }))
        )
    }
}

/// Which transmitter a training run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transmitter {
    Neural,
    Bpsk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: u32,
    pub n: usize,
    pub taps: usize,
    pub es: f64,
    pub es_n0_db: f64,
    pub rho: f64,
    pub frame_len: usize,
    pub adapt_blocks: usize,
    pub frames: usize,
    pub kappa: f64,
    pub eta: f64,
    pub adapt_steps: usize,
    pub sigma: f64,
    pub first_order: bool,
    /// Divide the adaptation gradient by `adapt_blocks` instead of `frame_len`.
    pub normalize_by_pilots: bool,
    pub transmitter: Transmitter,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 8,
            n: 8,
            taps: 3,
            es: 1.0,
            es_n0_db: 10.0,
            rho: 0.9,
            frame_len: 256,
            adapt_blocks: 8,
            frames: 60_000,
            kappa: 0.01,
            eta: 0.1,
            adapt_steps: 1,
            sigma: 0.15,
            first_order: false,
            normalize_by_pilots: false,
            transmitter: Transmitter::Neural,
            seed: 0,
        }
    }
}

fn config_error(key: &'static str, reason: impl Into<String>) -> TrainError {
    TrainError::Config {
        key,
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.k == 0 || self.k > 16 {
            return Err(config_error("k", "must lie in 1..=16"));
        }
        if self.n == 0 {
            return Err(config_error("n", "must be positive"));
        }
        if self.taps == 0 {
            return Err(config_error("taps", "must be positive"));
        }
        if !(self.es.is_finite() && self.es > 0.0) {
            return Err(config_error("es", "must be positive"));
        }
        if !self.es_n0_db.is_finite() {
            return Err(config_error("es_n0_db", "must be finite"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(config_error("rho", "must lie in [0, 1]"));
        }
        if self.frame_len == 0 {
            return Err(config_error("frame_len", "must be positive"));
        }
        if self.adapt_blocks == 0 || self.adapt_blocks > self.frame_len {
            return Err(config_error("adapt_blocks", "must satisfy 1 <= adapt_blocks <= frame_len"));
        }
        for (key, v) in [("kappa", self.kappa), ("eta", self.eta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_error(key, "must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.sigma) {
            return Err(config_error("sigma", "must satisfy 0 <= sigma < 1"));
        }
        match self.transmitter {
            Transmitter::Neural if self.sigma == 0.0 => {
                return Err(config_error("sigma", "a trained encoder needs sigma > 0"));
            }
            Transmitter::Bpsk if self.k as usize != self.n => {
                return Err(config_error("transmitter", "BPSK needs k == n"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn n0(&self) -> f64 {
        snr_to_n0(self.es_n0_db, self.es)
    }

    /// The adaptation rule used inside training frames.
    pub fn adaptation(&self) -> Adaptation {
        let divisor = if self.normalize_by_pilots {
            self.adapt_blocks
        } else {
            self.frame_len
        };
        Adaptation {
            eta: self.eta,
            steps: self.adapt_steps,
            divisor: divisor as f64,
        }
    }
}

/// One transmission: message, transmitted codeword and what the receiver saw.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub message: usize,
    pub x: ComplexVec,
    pub y: ReceivedBlock,
}

/// `T` consecutive blocks sharing one channel realization.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    tau: u64,
    blocks: Vec<Block>,
    pilot_idx: Vec<usize>,
}

impl Frame {
    pub fn new(tau: u64, blocks: Vec<Block>, pilot_idx: Vec<usize>) -> Result<Self, TrainError> {
        if blocks.is_empty() {
            return Err(TrainError::Frame("no blocks".into()));
        }
        if pilot_idx.is_empty() {
            return Err(TrainError::EmptyPilots);
        }
        let mut seen = vec![false; blocks.len()];
        for &i in &pilot_idx {
            if i >= blocks.len() {
                return Err(TrainError::Frame(format!("pilot index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(TrainError::Frame(format!("pilot index {i} repeated")));
            }
        }
        Ok(Self {
            tau,
            blocks,
            pilot_idx,
        })
    }

    /// Frame whose first `adapt_blocks` blocks are the pilots.
    pub fn with_leading_pilots(tau: u64, blocks: Vec<Block>, adapt_blocks: usize) -> Result<Self, TrainError> {
        Self::new(tau, blocks, (0..adapt_blocks).collect())
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn pilot_idx(&self) -> &[usize] {
        &self.pilot_idx
    }

    pub fn messages(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.message).collect()
    }

    pub fn received(&self) -> Vec<ReceivedBlock> {
        self.blocks.iter().map(|b| b.y.clone()).collect()
    }

    pub fn pilot_messages(&self) -> Vec<usize> {
        self.pilot_idx.iter().map(|&i| self.blocks[i].message).collect()
    }

    pub fn pilot_received(&self) -> Vec<ReceivedBlock> {
        self.pilot_idx.iter().map(|&i| self.blocks[i].y.clone()).collect()
    }

    /// What the transmitter itself knows about the frame.
    pub fn transmitter_log(&self) -> TransmitterLog {
        TransmitterLog {
            tau: self.tau,
            messages: self.messages(),
            codewords: self.blocks.iter().map(|b| b.x.clone()).collect(),
        }
    }
}

/// Messages and transmitted codewords of one frame. Deliberately holds no
/// received samples: the transmitter never observes the channel output.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmitterLog {
    pub tau: u64,
    pub messages: Vec<usize>,
    pub codewords: Vec<ComplexVec>,
}

/// Per-block log-losses sent from receiver to transmitter at the end of a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackPacket {
    tau: u64,
    losses: Vec<f64>,
}

impl FeedbackPacket {
    pub fn new(tau: u64, losses: Vec<f64>, frame_len: usize) -> Result<Self, TrainError> {
        if in_test_phase() {
            return Err(TrainError::FeedbackInTestPhase);
        }
        if losses.len() != frame_len {
            return Err(TrainError::FeedbackLength {
                expected: frame_len,
                found: losses.len(),
            });
        }
        Ok(Self { tau, losses })
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }
}

thread_local! {
    static TEST_PHASE: Cell<bool> = const { Cell::new(false) };
}

/// While alive, the current thread is in the test phase and no feedback
/// packet can be created on it.
pub struct TestPhase {
    previous: bool,
    _not_send: PhantomData<*const ()>,
}

pub fn enter_test_phase() -> TestPhase {
    let previous = TEST_PHASE.with(|c| c.replace(true));
    TestPhase {
        previous,
        _not_send: PhantomData,
    }
}

pub fn in_test_phase() -> bool {
    TEST_PHASE.with(|c| c.get())
}

impl Drop for TestPhase {
    fn drop(&mut self) {
        TEST_PHASE.with(|c| c.set(self.previous));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn block(m: usize) -> Block {
        Block {
            message: m,
            x: vec![Complex64::new(1.0, 0.0)],
            y: ReceivedBlock {
                samples: vec![Complex64::new(0.5, 0.0)],
            },
        }
    }

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
        assert!((TrainConfig::default().n0() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn config_errors_name_the_key() {
        let bad = TrainConfig {
            adapt_blocks: 300,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(TrainError::Config { key, .. }) => assert_eq!(key, "adapt_blocks"),
            other => panic!("{other:?}"),
        }
        let bad = TrainConfig {
            sigma: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config { key: "sigma", .. })));
        let bad = TrainConfig {
            transmitter: Transmitter::Bpsk,
            k: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::Config { key: "transmitter", .. })));
    }

    #[test]
    fn adaptation_divisor() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.adaptation().divisor, 256.0);
        let cfg = TrainConfig {
            normalize_by_pilots: true,
            ..cfg
        };
        assert_eq!(cfg.adaptation().divisor, 8.0);
    }

    #[test]
    fn frame_pilot_checks() {
        let blocks: Vec<Block> = (0..4).map(block).collect();
        assert!(Frame::new(0, blocks.clone(), vec![0, 2]).is_ok());
        assert!(matches!(Frame::new(0, blocks.clone(), vec![]), Err(TrainError::EmptyPilots)));
        assert!(Frame::new(0, blocks.clone(), vec![1, 1]).is_err());
        assert!(Frame::new(0, blocks.clone(), vec![4]).is_err());
        let f = Frame::with_leading_pilots(3, blocks, 2).unwrap();
        assert_eq!(f.pilot_messages(), vec![0, 1]);
        assert_eq!(f.transmitter_log().messages, vec![0, 1, 2, 3]);
    }

    #[test]
    fn feedback_is_refused_in_test_phase() {
        assert!(FeedbackPacket::new(0, vec![0.1; 3], 3).is_ok());
        assert!(matches!(
            FeedbackPacket::new(0, vec![0.1; 2], 3),
            Err(TrainError::FeedbackLength { expected: 3, found: 2 })
        ));
        {
            let _guard = enter_test_phase();
            assert!(in_test_phase());
            {
                let _nested = enter_test_phase();
            }
            assert!(in_test_phase());
            assert!(matches!(
                FeedbackPacket::new(0, vec![0.1; 3], 3),
                Err(TrainError::FeedbackInTestPhase)
            ));
        }
        assert!(!in_test_phase());
        assert!(FeedbackPacket::new(0, vec![0.1; 3], 3).is_ok());
    }
}
