use crate::autodiff::{apply_sgd, dot_params, DiffError, Graph, ParamVars, ParamVector};
use crate::channel::{ComplexVec, ReceivedBlock};
use crate::link::{cross_entropy, DecoderModel, EncoderModel};

use super::{FeedbackPacket, Frame, TrainError, TransmitterLog};

/// Inner SGD rule `phi <- phi - (eta / divisor) * grad(sum of pilot losses)`,
/// repeated `steps` times.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adaptation {
    pub eta: f64,
    pub steps: usize,
    pub divisor: f64,
}

impl Adaptation {
    pub fn step_size(&self) -> f64 {
        self.eta / self.divisor
    }
}

fn check_pilots(ys: &[ReceivedBlock], messages: &[usize]) -> Result<(), TrainError> {
    if ys.len() != messages.len() {
        return Err(TrainError::PilotCount {
            messages: messages.len(),
            blocks: ys.len(),
        });
    }
    if ys.is_empty() {
        return Err(TrainError::EmptyPilots);
    }
    Ok(())
}

fn check_layout(dec: &DecoderModel, p: &ParamVector) -> Result<(), TrainError> {
    if p.layout() != dec.params().layout() {
        return Err(DiffError::LayoutMismatch.into());
    }
    Ok(())
}

/// Summed pilot cross-entropy and its gradient at `p`.
fn loss_grad(
    dec: &DecoderModel,
    p: &ParamVector,
    ys: &[ReceivedBlock],
    messages: &[usize],
) -> Result<(f64, ParamVector), TrainError> {
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let loss = dec.batch_loss(&mut g, &vars, ys, messages)?;
    let grads = g.grad_params(loss, &vars);
    g.check_finite()?;
    Ok((g.value(loss).item(), grads.collect(&g)))
}

/// Per-block losses at `p` and the gradient of their mean.
fn outer_loss_grad(
    dec: &DecoderModel,
    p: &ParamVector,
    ys: &[ReceivedBlock],
    messages: &[usize],
) -> Result<(Vec<f64>, ParamVector), TrainError> {
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let logits = dec.forward(&mut g, &vars, ys)?;
    let per_block = cross_entropy(&mut g, logits, messages)?;
    let total = g.sum(per_block);
    let mean = g.scale(total, 1.0 / ys.len() as f64);
    let grads = g.grad_params(mean, &vars);
    g.check_finite()?;
    Ok((g.value(per_block).data().to_vec(), grads.collect(&g)))
}

/// Hessian of the summed pilot loss at `p`, applied to `v`.
fn pilot_hvp(
    dec: &DecoderModel,
    p: &ParamVector,
    v: &ParamVector,
    ys: &[ReceivedBlock],
    messages: &[usize],
) -> Result<ParamVector, TrainError> {
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let loss = dec.batch_loss(&mut g, &vars, ys, messages)?;
    let grads = g.grad_params(loss, &vars);
    let dir = v.bind_constant(&mut g);
    let inner = dot_params(&mut g, &grads, &dir);
    let hv = g.grad_params(inner, &vars);
    g.check_finite()?;
    Ok(hv.collect(&g))
}

/// Pilot-driven decoder adaptation. `theta` is left untouched.
pub fn adapt_decoder(
    dec: &DecoderModel,
    theta: &ParamVector,
    ys: &[ReceivedBlock],
    messages: &[usize],
    rule: &Adaptation,
) -> Result<ParamVector, TrainError> {
    check_pilots(ys, messages)?;
    check_layout(dec, theta)?;
    let lr = rule.step_size();
    let mut phi = theta.clone();
    for _ in 0..rule.steps {
        let (_, grad) = loss_grad(dec, &phi, ys, messages)?;
        phi = apply_sgd(&phi, &grad, lr)?;
    }
    Ok(phi)
}

/// Result of one meta-training evaluation on a frame.
#[derive(Clone, Debug)]
pub struct MetaStep {
    /// Gradient of the mean post-adaptation loss with respect to the initialization.
    pub gradient: ParamVector,
    /// Per-block losses of the adapted decoder, as sent over the feedback link.
    pub adapted_losses: Vec<f64>,
    pub adapted: ParamVector,
}

/// Adapts on the frame's pilots, scores every block of the frame with the
/// adapted decoder and returns the meta-gradient of the mean score.
///
/// With one adaptation step the Hessian term is applied in closed form,
/// `g - (eta/D) H g`; with more steps the adaptation is unrolled in the graph.
pub fn meta_step(
    dec: &DecoderModel,
    theta: &ParamVector,
    frame: &Frame,
    rule: &Adaptation,
    first_order: bool,
) -> Result<MetaStep, TrainError> {
    let pilot_ys = frame.pilot_received();
    let pilot_ms = frame.pilot_messages();
    let ys = frame.received();
    let ms = frame.messages();
    let adapted = adapt_decoder(dec, theta, &pilot_ys, &pilot_ms, rule)?;
    let (adapted_losses, g_out) = outer_loss_grad(dec, &adapted, &ys, &ms)?;
    let gradient = if first_order || rule.eta == 0.0 || rule.steps == 0 {
        g_out
    } else if rule.steps == 1 {
        let hv = pilot_hvp(dec, theta, &g_out, &pilot_ys, &pilot_ms)?;
        g_out.axpy(-rule.step_size(), &hv)?
    } else {
        meta_gradient_unrolled(dec, theta, frame, rule)?
    };
    Ok(MetaStep {
        gradient,
        adapted_losses,
        adapted,
    })
}

pub fn meta_gradient(
    dec: &DecoderModel,
    theta: &ParamVector,
    frame: &Frame,
    rule: &Adaptation,
    first_order: bool,
) -> Result<ParamVector, TrainError> {
    meta_step(dec, theta, frame, rule, first_order).map(|s| s.gradient)
}

/// Meta-gradient by differentiating one graph that contains the adaptation
/// steps followed by the outer loss.
pub fn meta_gradient_unrolled(
    dec: &DecoderModel,
    theta: &ParamVector,
    frame: &Frame,
    rule: &Adaptation,
) -> Result<ParamVector, TrainError> {
    check_layout(dec, theta)?;
    let pilot_ys = frame.pilot_received();
    let pilot_ms = frame.pilot_messages();
    let lr = rule.step_size();
    let mut g = Graph::new();
    let theta_vars = theta.bind(&mut g);
    let mut cur = theta_vars.clone();
    for _ in 0..rule.steps {
        let loss = dec.batch_loss(&mut g, &cur, &pilot_ys, &pilot_ms)?;
        let grads = g.grad_params(loss, &cur);
        let next = cur
            .vars()
            .iter()
            .zip(grads.vars())
            .map(|(&p, &d)| {
                let step = g.scale(d, -lr);
                g.add(p, step)
            })
            .collect();
        cur = ParamVars::from_vars(theta.layout().clone(), next);
    }
    let loss = dec.batch_loss(&mut g, &cur, &frame.received(), &frame.messages())?;
    let mean = g.scale(loss, 1.0 / frame.len() as f64);
    let grads = g.grad_params(mean, &theta_vars);
    g.check_finite()?;
    Ok(grads.collect(&g))
}

/// `theta - kappa * grad`.
pub fn meta_update(theta: &ParamVector, grad: &ParamVector, kappa: f64) -> Result<ParamVector, TrainError> {
    Ok(apply_sgd(theta, grad, kappa)?)
}

/// Score-function estimate `(1/T) sum_t loss_t grad log pi(x_t | m_t)`.
pub fn policy_gradient(
    enc: &EncoderModel,
    messages: &[usize],
    codewords: &[ComplexVec],
    losses: &[f64],
) -> Result<ParamVector, TrainError> {
    if losses.len() != messages.len() {
        return Err(TrainError::FeedbackLength {
            expected: messages.len(),
            found: losses.len(),
        });
    }
    let mut g = Graph::new();
    let vars = enc.params().bind(&mut g);
    let log_pi = enc.policy_log_prob(&mut g, &vars, messages, codewords)?;
    let scale = 1.0 / messages.len() as f64;
    let weights = crate::autodiff::Tensor::new(
        losses.len(),
        1,
        losses.iter().map(|l| l * scale).collect(),
    );
    let weights = g.constant(weights);
    let weighted = g.mul(log_pi, weights);
    let objective = g.sum(weighted);
    let grads = g.grad_params(objective, &vars);
    g.check_finite()?;
    Ok(grads.collect(&g))
}

/// One policy-gradient step on the encoder from the transmitter's own log
/// and the fed-back losses.
pub fn encoder_update(
    enc: &EncoderModel,
    log: &TransmitterLog,
    feedback: &FeedbackPacket,
    kappa: f64,
) -> Result<ParamVector, TrainError> {
    if log.tau != feedback.tau() {
        return Err(TrainError::FeedbackFrame {
            frame: log.tau,
            feedback: feedback.tau(),
        });
    }
    let grad = policy_gradient(enc, &log.messages, &log.codewords, feedback.losses())?;
    Ok(apply_sgd(enc.params(), &grad, kappa)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelState;
    use crate::training::Block;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_frame(enc: &EncoderModel, taps: usize, t: usize, t_u: usize, rng: &mut ChaCha8Rng) -> Frame {
        let st = ChannelState::stationary(taps, 0.0, t, 0.1, 1.0, rng).unwrap();
        let card = enc.space().cardinality();
        let blocks = (0..t)
            .map(|i| {
                let m = i % card;
                let x = enc.sample_codeword(m, rng).unwrap();
                let y = st.transmit(&x, rng).unwrap();
                Block { message: m, x, y }
            })
            .collect();
        Frame::with_leading_pilots(0, blocks, t_u).unwrap()
    }

    fn setup(seed: u64) -> (EncoderModel, DecoderModel, Frame) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderModel::new(2, 2, 1.0, 0.2, &mut rng).unwrap();
        let dec = DecoderModel::new(2, 2, 2, &mut rng).unwrap();
        let frame = toy_frame(&enc, 2, 4, 2, &mut rng);
        (enc, dec, frame)
    }

    fn rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
        let diff = a.axpy(-1.0, b).unwrap().norm();
        diff / a.norm().max(b.norm()).max(1e-300)
    }

    #[test]
    fn adapt_trivial_cases() {
        let (_, dec, frame) = setup(1);
        let theta = dec.params();
        let (ys, ms) = (frame.pilot_received(), frame.pilot_messages());
        let zero_eta = Adaptation { eta: 0.0, steps: 3, divisor: 4.0 };
        assert_eq!(&adapt_decoder(&dec, theta, &ys, &ms, &zero_eta).unwrap(), theta);
        let zero_steps = Adaptation { eta: 0.1, steps: 0, divisor: 4.0 };
        assert_eq!(&adapt_decoder(&dec, theta, &ys, &ms, &zero_steps).unwrap(), theta);
        assert!(matches!(
            adapt_decoder(&dec, theta, &[], &[], &zero_steps),
            Err(TrainError::EmptyPilots)
        ));
    }

    #[test]
    fn one_step_matches_direct_recomputation() {
        let (_, dec, frame) = setup(2);
        let theta = dec.params();
        let (ys, ms) = (frame.pilot_received(), frame.pilot_messages());
        let rule = Adaptation { eta: 0.3, steps: 1, divisor: 4.0 };
        let phi = adapt_decoder(&dec, theta, &ys, &ms, &rule).unwrap();
        let mut g = Graph::new();
        let vars = theta.bind(&mut g);
        let l = dec.batch_loss(&mut g, &vars, &ys, &ms).unwrap();
        let grad = g.grad_params(l, &vars).collect(&g);
        for ((p, t), d) in phi.values().iter().zip(theta.values()).zip(grad.values()) {
            assert!((p - (t - 0.3 / 4.0 * d)).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_form_equals_unrolled() {
        for seed in 0..5 {
            let (_, dec, frame) = setup(10 + seed);
            let rule = Adaptation { eta: 0.5, steps: 1, divisor: 4.0 };
            let a = meta_gradient(&dec, dec.params(), &frame, &rule, false).unwrap();
            let b = meta_gradient_unrolled(&dec, dec.params(), &frame, &rule).unwrap();
            assert!(rel_err(&a, &b) < 1e-8, "{}", rel_err(&a, &b));
        }
    }

    #[test]
    fn zero_eta_gives_plain_gradient() {
        let (_, dec, frame) = setup(3);
        let rule = Adaptation { eta: 0.0, steps: 1, divisor: 4.0 };
        let meta = meta_gradient(&dec, dec.params(), &frame, &rule, false).unwrap();
        let (_, plain) = outer_loss_grad(&dec, dec.params(), &frame.received(), &frame.messages()).unwrap();
        assert!(rel_err(&meta, &plain) < 1e-12);
    }

    #[test]
    fn first_order_difference_is_the_hessian_term() {
        let (_, dec, frame) = setup(4);
        let theta = dec.params();
        let rule = Adaptation { eta: 0.4, steps: 1, divisor: 4.0 };
        let exact = meta_gradient(&dec, theta, &frame, &rule, false).unwrap();
        let fo = meta_gradient(&dec, theta, &frame, &rule, true).unwrap();
        let hv = crate::autodiff::grad_of_grad_dot(
            |g, v| dec.batch_loss(g, v, &frame.pilot_received(), &frame.pilot_messages()).unwrap(),
            theta,
            &fo,
        )
        .unwrap();
        let expect = fo.axpy(-0.1, &hv).unwrap();
        assert!(rel_err(&exact, &expect) < 1e-10);
    }

    #[test]
    fn meta_gradient_is_continuous_in_eta() {
        let (_, dec, frame) = setup(5);
        let (_, plain) = outer_loss_grad(&dec, dec.params(), &frame.received(), &frame.messages()).unwrap();
        let dist = |eta: f64| {
            let rule = Adaptation { eta, steps: 1, divisor: 4.0 };
            let m = meta_gradient(&dec, dec.params(), &frame, &rule, false).unwrap();
            m.axpy(-1.0, &plain).unwrap().norm()
        };
        let (d3, d4) = (dist(1e-3), dist(1e-4));
        assert!(d3 > 0.0 && d4 > 0.0);
        // linear in eta: a tenfold smaller step gives a tenfold smaller gap
        assert!((d3 / d4 - 10.0).abs() < 0.1, "{d3} {d4}");
    }

    #[test]
    fn unrolled_two_steps_matches_finite_differences() {
        let (_, dec, frame) = setup(6);
        let theta = dec.params().clone();
        let rule = Adaptation { eta: 0.5, steps: 2, divisor: 4.0 };
        let analytic = meta_step(&dec, &theta, &frame, &rule, false).unwrap().gradient;
        let outer = |p: &ParamVector| {
            let phi = adapt_decoder(&dec, p, &frame.pilot_received(), &frame.pilot_messages(), &rule).unwrap();
            let d = dec.with_params(phi).unwrap();
            let l = d.log_losses(&frame.received(), &frame.messages()).unwrap();
            l.iter().sum::<f64>() / l.len() as f64
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let i = rng.random_range(0..theta.len());
            let h = 1e-5;
            let mut plus = theta.clone();
            plus.values_mut()[i] += h;
            let mut minus = theta.clone();
            minus.values_mut()[i] -= h;
            let fd = (outer(&plus) - outer(&minus)) / (2.0 * h);
            let a = analytic.values()[i];
            assert!((fd - a).abs() <= 1e-6 + 1e-4 * a.abs(), "{i}: {fd} vs {a}");
        }
    }

    #[test]
    fn encoder_update_examples() {
        let (enc, _, frame) = setup(8);
        let log = frame.transmitter_log();
        let zero = FeedbackPacket::new(0, vec![0.0; 4], 4).unwrap();
        assert_eq!(&encoder_update(&enc, &log, &zero, 0.1).unwrap(), enc.params());
        let fb = FeedbackPacket::new(0, vec![0.5, 1.0, 2.0, 0.1], 4).unwrap();
        assert_eq!(&encoder_update(&enc, &log, &fb, 0.0).unwrap(), enc.params());
        let other = FeedbackPacket::new(1, vec![0.5; 4], 4).unwrap();
        assert!(matches!(
            encoder_update(&enc, &log, &other, 0.1),
            Err(TrainError::FeedbackFrame { frame: 0, feedback: 1 })
        ));
    }

    #[test]
    fn single_block_update_matches_direct_recomputation() {
        let (enc, _, frame) = setup(9);
        let b = &frame.blocks()[1];
        let log = TransmitterLog {
            tau: 5,
            messages: vec![b.message],
            codewords: vec![b.x.clone()],
        };
        let fb = FeedbackPacket::new(5, vec![1.7], 1).unwrap();
        let updated = encoder_update(&enc, &log, &fb, 0.05).unwrap();
        let grad_log_pi = crate::autodiff::grad(
            |g, v| {
                let lp = enc.policy_log_prob(g, v, &[b.message], std::slice::from_ref(&b.x)).unwrap();
                g.sum(lp)
            },
            enc.params(),
        )
        .unwrap();
        for ((u, p), d) in updated.values().iter().zip(enc.params().values()).zip(grad_log_pi.values()) {
            assert!((u - (p - 0.05 * 1.7 * d)).abs() < 1e-13);
        }
    }

    #[test]
    fn encoder_update_ignores_received_samples() {
        let (enc, _, frame) = setup(11);
        let fb = FeedbackPacket::new(0, vec![0.3, 0.9, 0.2, 1.1], 4).unwrap();
        let before = encoder_update(&enc, &frame.transmitter_log(), &fb, 0.1).unwrap();
        let mut blocks = frame.blocks().to_vec();
        for b in &mut blocks {
            for s in &mut b.y.samples {
                *s = num_complex::Complex64::new(f64::NAN, f64::NAN);
            }
        }
        let scrambled = Frame::new(0, blocks, frame.pilot_idx().to_vec()).unwrap();
        let after = encoder_update(&enc, &scrambled.transmitter_log(), &fb, 0.1).unwrap();
        assert_eq!(before, after);
    }
}
