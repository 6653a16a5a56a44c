use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{bpsk_codebook, mmse_estimate, MlDecoder};
use crate::channel::{ChannelState, ComplexVec, ReceivedBlock};
use crate::link::{Checkpoint, DecoderModel, EncoderModel};
use crate::training::{
    adapt_decoder, enter_test_phase, train_decoder_from_scratch, Adaptation, TrainConfig, Trainer,
};

use super::{ExperimentConfig, HarnessError, Scheme};

/// Frozen models of one scheme after its training phase.
#[derive(Clone, Debug)]
pub struct TrainedSystem {
    pub scheme: Scheme,
    pub train: TrainConfig,
    pub frames_trained: u64,
    pub encoder: Option<EncoderModel>,
    pub decoder: Option<DecoderModel>,
}

impl TrainedSystem {
    /// Snapshot of a trainer's current models.
    pub fn from_trainer(scheme: Scheme, trainer: &Trainer) -> Self {
        Self {
            scheme,
            train: trainer.config().clone(),
            frames_trained: trainer.frames_done(),
            encoder: trainer.encoder().cloned(),
            decoder: Some(trainer.decoder().clone()),
        }
    }

    /// A scheme with no training phase.
    pub fn untrained(scheme: Scheme, train: &TrainConfig) -> Self {
        Self {
            scheme,
            train: train.clone(),
            frames_trained: 0,
            encoder: None,
            decoder: None,
        }
    }

    /// Codewords used at test time: the deterministic encoder, or BPSK.
    pub fn codebook(&self) -> Result<Vec<ComplexVec>, HarnessError> {
        match &self.encoder {
            Some(enc) => Ok(enc.codebook()?),
            None => Ok(bpsk_codebook(self.train.k, self.train.n, self.train.es)?),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "scheme": self.scheme,
            "frames_trained": self.frames_trained,
            "train": self.train,
        });
        let mut ck = Checkpoint::new(meta.to_string());
        if let Some(enc) = &self.encoder {
            ck = ck.with("encoder", enc.params().clone());
        }
        if let Some(dec) = &self.decoder {
            ck = ck.with("decoder", dec.params().clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, HarnessError> {
        #[derive(serde::Deserialize)]
        struct Meta {
            scheme: Scheme,
            frames_trained: u64,
            train: TrainConfig,
        }
        let meta: Meta = serde_json::from_str(&ck.metadata)?;
        let t = &meta.train;
        let encoder = match ck.get("encoder") {
            Ok(p) => Some(EncoderModel::from_params(t.k, t.n, t.es, t.sigma, p.clone())?),
            Err(_) => None,
        };
        let decoder = match ck.get("decoder") {
            Ok(p) => Some(DecoderModel::from_params(t.k, t.n, t.taps, p.clone())?),
            Err(_) => None,
        };
        if meta.scheme.training_mode().is_some() && decoder.is_none() {
            return Err(crate::link::CheckpointError::Missing("decoder".into()).into());
        }
        Ok(Self {
            scheme: meta.scheme,
            train: meta.train,
            frames_trained: meta.frames_trained,
            encoder,
            decoder,
        })
    }
}

/// One test frame: a fresh channel, `P` pilots and a batch of payload blocks.
#[derive(Clone, Debug)]
pub struct TestFrame {
    pub taps: ComplexVec,
    pub n0: f64,
    pub pilot_messages: Vec<usize>,
    pub pilot_codewords: Vec<ComplexVec>,
    pub pilot_received: Vec<ReceivedBlock>,
    pub payload_messages: Vec<usize>,
    pub payload_received: Vec<ReceivedBlock>,
}

/// Draws a test frame; pilot messages are distinct, payload messages uniform.
pub fn simulate_test_frame<R: Rng + ?Sized>(
    codebook: &[ComplexVec],
    train: &TrainConfig,
    pilots: usize,
    payload: usize,
    rng: &mut R,
) -> Result<TestFrame, HarnessError> {
    let card = codebook.len();
    let channel = ChannelState::stationary(train.taps, 0.0, train.frame_len, train.n0(), train.es, rng)?;
    let pilot_messages = sample(rng, card, pilots).into_vec();
    let pilot_codewords: Vec<ComplexVec> = pilot_messages.iter().map(|&m| codebook[m].clone()).collect();
    let pilot_received = pilot_codewords
        .iter()
        .map(|x| channel.transmit(x, rng))
        .collect::<Result<_, _>>()?;
    let payload_messages: Vec<usize> = (0..payload).map(|_| rng.random_range(0..card)).collect();
    let payload_received = payload_messages
        .iter()
        .map(|&m| channel.transmit(&codebook[m], rng))
        .collect::<Result<_, _>>()?;
    Ok(TestFrame {
        taps: channel.taps().to_vec(),
        n0: channel.n0(),
        pilot_messages,
        pilot_codewords,
        pilot_received,
        payload_messages,
        payload_received,
    })
}

/// Test-phase receiver: sees pilots and payload samples, returns payload decisions.
pub trait Receiver: Sync {
    fn decode(&self, frame: &TestFrame, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, HarnessError>;
}

/// The receiver of a trained scheme with its test-time settings.
pub struct SchemeReceiver<'a> {
    system: &'a TrainedSystem,
    codebook: Vec<ComplexVec>,
    rule: Adaptation,
    scratch_steps: usize,
}

impl<'a> SchemeReceiver<'a> {
    pub fn new(system: &'a TrainedSystem, cfg: &ExperimentConfig, pilots: usize) -> Result<Self, HarnessError> {
        let divisor = if system.train.normalize_by_pilots {
            pilots.max(1)
        } else {
            system.train.frame_len
        };
        Ok(Self {
            system,
            codebook: system.codebook()?,
            rule: Adaptation {
                eta: cfg.test_eta(),
                steps: cfg.test.adapt_steps,
                divisor: divisor as f64,
            },
            scratch_steps: cfg.test.scratch_steps,
        })
    }

    pub fn codebook(&self) -> &[ComplexVec] {
        &self.codebook
    }

    fn trained_decoder(&self) -> Result<&DecoderModel, HarnessError> {
        self.system.decoder.as_ref().ok_or_else(|| HarnessError::Config {
            key: "scheme".into(),
            reason: format!("{} has no trained decoder", self.system.scheme),
        })
    }
}

impl Receiver for SchemeReceiver<'_> {
    fn decode(&self, frame: &TestFrame, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, HarnessError> {
        let t = &self.system.train;
        let has_pilots = !frame.pilot_messages.is_empty();
        match self.system.scheme {
            Scheme::BpskMlMmse => {
                let pairs: Vec<_> = frame
                    .pilot_codewords
                    .iter()
                    .cloned()
                    .zip(frame.pilot_received.iter().cloned())
                    .collect();
                let h = mmse_estimate(&pairs, frame.n0, t.taps)?;
                let ml = MlDecoder::new(&h, &self.codebook)?;
                Ok(frame
                    .payload_received
                    .iter()
                    .map(|y| ml.decode(y))
                    .collect::<Result<_, _>>()?)
            }
            Scheme::BpskNeuralScratch => {
                let rule = Adaptation {
                    steps: self.scratch_steps,
                    ..self.rule
                };
                let dec = train_decoder_from_scratch(
                    (t.k, t.n, t.taps),
                    &frame.pilot_received,
                    &frame.pilot_messages,
                    &rule,
                    rng,
                )?;
                Ok(dec.decide(&frame.payload_received)?)
            }
            _ => {
                let dec = self.trained_decoder()?;
                let adapted;
                let dec = if has_pilots && self.rule.steps > 0 {
                    let phi = adapt_decoder(
                        dec,
                        dec.params(),
                        &frame.pilot_received,
                        &frame.pilot_messages,
                        &self.rule,
                    )?;
                    adapted = dec.with_params(phi)?;
                    &adapted
                } else {
                    dec
                };
                Ok(dec.decide(&frame.payload_received)?)
            }
        }
    }
}

/// Block error rate of one evaluation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlerEstimate {
    pub errors: u64,
    pub blocks: u64,
    pub bler: f64,
    /// Standard error of `bler`, from the spread of per-frame error rates.
    pub std_err: f64,
}

impl BlerEstimate {
    fn from_frames(per_frame: &[(u64, u64)]) -> Self {
        let errors: u64 = per_frame.iter().map(|f| f.0).sum();
        let blocks: u64 = per_frame.iter().map(|f| f.1).sum();
        let bler = if blocks == 0 { 0.0 } else { errors as f64 / blocks as f64 };
        // ratio estimator: residuals e_i - bler * b_i around the pooled rate
        let f = per_frame.len() as f64;
        let std_err = if per_frame.len() < 2 || blocks == 0 {
            0.0
        } else {
            let mean_b = blocks as f64 / f;
            let ss: f64 = per_frame
                .iter()
                .map(|&(e, b)| (e as f64 - bler * b as f64).powi(2))
                .sum();
            (ss / (f - 1.0)).sqrt() / (mean_b * f.sqrt())
        };
        Self {
            errors,
            blocks,
            bler,
            std_err,
        }
    }
}

/// Payload blocks of frame `i` when `total` blocks are split over `frames` frames.
pub fn payload_share(total: usize, frames: usize, i: usize) -> usize {
    total / frames + usize::from(i < total % frames)
}

/// Evaluates a receiver over `frames` test frames. Frame `i` draws from its
/// own stream of `seed`, so the result does not depend on the thread count.
pub fn evaluate_receiver<Rx: Receiver>(
    receiver: &Rx,
    codebook: &[ComplexVec],
    train: &TrainConfig,
    pilots: usize,
    payload_blocks: usize,
    frames: usize,
    seed: u64,
) -> Result<BlerEstimate, HarnessError> {
    let run_frame = |i: usize| -> Result<(u64, u64), HarnessError> {
        let _phase = enter_test_phase();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let payload = payload_share(payload_blocks, frames, i);
        if payload == 0 {
            return Ok((0, 0));
        }
        let frame = simulate_test_frame(codebook, train, pilots, payload, &mut rng)?;
        let decided = receiver.decode(&frame, &mut rng)?;
        let errors = decided
            .iter()
            .zip(&frame.payload_messages)
            .filter(|(a, b)| a != b)
            .count();
        Ok((errors as u64, payload as u64))
    };
    #[cfg(feature = "parallel")]
    let per_frame: Vec<(u64, u64)> = {
        use rayon::prelude::*;
        (0..frames).into_par_iter().map(run_frame).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let per_frame: Vec<(u64, u64)> = (0..frames).map(run_frame).collect::<Result<_, _>>()?;
    Ok(BlerEstimate::from_frames(&per_frame))
}

/// Test-phase BLER of a trained scheme at `pilots` pilots per frame.
pub fn evaluate_bler(
    cfg: &ExperimentConfig,
    system: &TrainedSystem,
    pilots: usize,
    seed: u64,
) -> Result<BlerEstimate, HarnessError> {
    if pilots == 0 && system.scheme.needs_pilots() {
        return Err(HarnessError::Config {
            key: "test.pilots".into(),
            reason: format!("scheme {} needs at least one pilot", system.scheme),
        });
    }
    let card = 1usize << system.train.k;
    if pilots > card {
        return Err(HarnessError::Config {
            key: "test.pilots".into(),
            reason: format!("P = {pilots} exceeds the {card} distinct messages"),
        });
    }
    let rx = SchemeReceiver::new(system, cfg, pilots)?;
    evaluate_receiver(
        &rx,
        rx.codebook(),
        &system.train,
        pilots,
        cfg.test.payload_blocks,
        cfg.test.test_frames,
        seed,
    )
}
