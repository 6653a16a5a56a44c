use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{bpsk_codebook, bpsk_encode};
use crate::channel::{ChannelState, ComplexVec, ReceivedBlock};
use crate::link::{DecoderModel, EncoderModel};

use super::adapt::{adapt_decoder, encoder_update, meta_step, meta_update, Adaptation};
use super::{Block, FeedbackPacket, Frame, TrainConfig, TrainError, Transmitter};

/// How the receiver learns from each frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingMode {
    /// Meta-train an initialization that is adapted on every frame's pilots.
    Meta,
    /// Train one decoder directly on all blocks, no per-frame adaptation.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameStats {
    pub tau: u64,
    pub mean_loss: f64,
}

/// Messages of one training frame: a random permutation of every message when
/// the frame holds exactly `2^k` blocks, i.i.d. uniform otherwise.
pub fn message_schedule<R: Rng + ?Sized>(cardinality: usize, frame_len: usize, rng: &mut R) -> Vec<usize> {
    if frame_len == cardinality {
        let mut all: Vec<usize> = (0..cardinality).collect();
        all.shuffle(rng);
        all
    } else {
        (0..frame_len).map(|_| rng.random_range(0..cardinality)).collect()
    }
}

/// Sequential online training over frames of a simulated fading link.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    mode: TrainingMode,
    encoder: Option<EncoderModel>,
    decoder: DecoderModel,
    channel: ChannelState,
    rng: ChaCha8Rng,
    tau: u64,
    history: Vec<FrameStats>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, mode: TrainingMode) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = match cfg.transmitter {
            Transmitter::Neural => Some(EncoderModel::new(cfg.k, cfg.n, cfg.es, cfg.sigma, &mut rng)?),
            Transmitter::Bpsk => None,
        };
        let decoder = DecoderModel::new(cfg.k, cfg.n, cfg.taps, &mut rng)?;
        let channel = ChannelState::stationary(cfg.taps, cfg.rho, cfg.frame_len, cfg.n0(), cfg.es, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            encoder,
            decoder,
            channel,
            rng,
            tau: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn mode(&self) -> TrainingMode {
        self.mode
    }

    /// The trained encoder, `None` for a fixed BPSK transmitter.
    pub fn encoder(&self) -> Option<&EncoderModel> {
        self.encoder.as_ref()
    }

    /// The meta-learned initialization (meta mode) or the trained decoder (joint mode).
    pub fn decoder(&self) -> &DecoderModel {
        &self.decoder
    }

    pub fn frames_done(&self) -> u64 {
        self.tau
    }

    pub fn history(&self) -> &[FrameStats] {
        &self.history
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            encoder: self.encoder,
            decoder: self.decoder,
            history: self.history,
        }
    }

    fn simulate_frame(&mut self) -> Result<Frame, TrainError> {
        let card = 1usize << self.cfg.k;
        let messages = message_schedule(card, self.cfg.frame_len, &mut self.rng);
        let codewords: Vec<ComplexVec> = match &self.encoder {
            Some(enc) => enc.sample_codewords(&messages, &mut self.rng)?,
            None => messages
                .iter()
                .map(|&m| bpsk_encode(m, self.cfg.k, self.cfg.n, self.cfg.es))
                .collect::<Result<_, _>>()?,
        };
        let mut blocks = Vec::with_capacity(messages.len());
        for (message, x) in messages.into_iter().zip(codewords) {
            let y = self.channel.transmit(&x, &mut self.rng)?;
            self.channel.advance(&mut self.rng);
            blocks.push(Block { message, x, y });
        }
        Frame::with_leading_pilots(self.tau, blocks, self.cfg.adapt_blocks)
    }

    /// Runs one frame: transmission, receiver update, feedback and encoder update.
    pub fn step(&mut self) -> Result<FrameStats, TrainError> {
        let frame = self.simulate_frame()?;
        let theta = self.decoder.params();
        let (losses, new_theta) = match self.mode {
            TrainingMode::Meta => {
                let rule = self.cfg.adaptation();
                let step = meta_step(&self.decoder, theta, &frame, &rule, self.cfg.first_order)?;
                let next = meta_update(theta, &step.gradient, self.cfg.kappa)?;
                (step.adapted_losses, next)
            }
            TrainingMode::Joint => {
                // mean-loss gradient times kappa is the (kappa/T)-scaled sum
                let rule = Adaptation {
                    eta: self.cfg.kappa,
                    steps: 1,
                    divisor: frame.len() as f64,
                };
                let (ys, ms) = (frame.received(), frame.messages());
                let losses = self.decoder.log_losses(&ys, &ms)?;
                let next = adapt_decoder(&self.decoder, theta, &ys, &ms, &rule)?;
                (losses, next)
            }
        };
        let feedback = FeedbackPacket::new(frame.tau(), losses, frame.len())?;
        if let Some(enc) = &self.encoder {
            let phi_t = encoder_update(enc, &frame.transmitter_log(), &feedback, self.cfg.kappa)?;
            self.encoder = Some(enc.with_params(phi_t)?);
        }
        self.decoder = self.decoder.with_params(new_theta)?;
        let losses = feedback.losses();
        let stats = FrameStats {
            tau: frame.tau(),
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        };
        self.history.push(stats);
        self.tau += 1;
        Ok(stats)
    }

    pub fn run(&mut self, frames: usize) -> Result<(), TrainError> {
        for _ in 0..frames {
            self.step()?;
        }
        Ok(())
    }

    /// Deterministic (`sigma = 0`) codebook of the current transmitter.
    pub fn codebook(&self) -> Result<Vec<ComplexVec>, TrainError> {
        match &self.encoder {
            Some(enc) => Ok(enc.codebook()?),
            None => Ok(bpsk_codebook(self.cfg.k, self.cfg.n, self.cfg.es)?),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub encoder: Option<EncoderModel>,
    pub decoder: DecoderModel,
    pub history: Vec<FrameStats>,
}

/// Encoder trained by policy gradients, decoder initialization meta-trained.
pub fn run_meta_training(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(cfg, TrainingMode::Meta)?;
    trainer.run(cfg.frames)?;
    Ok(trainer.into_outcome())
}

/// Encoder trained by policy gradients, one decoder trained directly on all blocks.
pub fn run_joint_training(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(cfg, TrainingMode::Joint)?;
    trainer.run(cfg.frames)?;
    Ok(trainer.into_outcome())
}

/// Fresh decoder trained only on the given pilots.
pub fn train_decoder_from_scratch<R: Rng + ?Sized>(
    arch: (u32, usize, usize),
    ys: &[ReceivedBlock],
    messages: &[usize],
    rule: &Adaptation,
    rng: &mut R,
) -> Result<DecoderModel, TrainError> {
    if ys.is_empty() {
        return Err(TrainError::EmptyPilots);
    }
    let (k, n, taps) = arch;
    let fresh = DecoderModel::new(k, n, taps, rng)?;
    let trained = adapt_decoder(&fresh, fresh.params(), ys, messages, rule)?;
    Ok(fresh.with_params(trained)?)
}
