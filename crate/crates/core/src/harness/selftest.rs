//! Quick derived-oracle checks runnable from the command line.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad, Graph, ParamVars, ParamVector, Var};
use crate::baselines::{bpsk_block_error_awgn, bpsk_codebook, mmse_estimate, MlDecoder};
use crate::channel::{convolve, draw_stationary_taps, snr_to_n0, ChannelState, ReceivedBlock};
use crate::link::{DecoderModel, EncoderModel};
use crate::training::{adapt_decoder, meta_gradient, Adaptation, Block, Frame};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn central_difference<F: Fn(&ParamVector) -> f64>(f: F, p: &ParamVector, h: f64) -> ParamVector {
    let mut out = p.zeros_like();
    for i in 0..p.len() {
        let mut plus = p.clone();
        plus.values_mut()[i] += h;
        let mut minus = p.clone();
        minus.values_mut()[i] -= h;
        out.values_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    out
}

fn rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
    let num = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    num / a.norm().max(b.norm()).max(1e-12)
}

fn eval_scalar<F: Fn(&mut Graph, &ParamVars) -> Var>(f: F, p: &ParamVector) -> f64 {
    let mut g = Graph::new();
    let v = p.bind_constant(&mut g);
    let out = f(&mut g, &v);
    g.value(out).item()
}

fn random_blocks(n: usize, taps: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<ReceivedBlock> {
    let st = ChannelState::stationary(taps, 0.0, 1, 0.1, 1.0, rng).expect("valid channel");
    (0..count)
        .map(|_| {
            let x: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            st.transmit(&x, rng).expect("non-empty block")
        })
        .collect()
}

fn gradients(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let dec = DecoderModel::new(1, 1, 1, rng).expect("small decoder");
        let ys = random_blocks(1, 1, 3, rng);
        let ms: Vec<usize> = (0..3).map(|_| rng.random_range(0..2)).collect();
        let f = |g: &mut Graph, v: &ParamVars| dec.batch_loss(g, v, &ys, &ms).expect("valid batch");
        let a = grad(f, dec.params()).expect("finite gradient");
        let fd = central_difference(|p| eval_scalar(f, p), dec.params(), 1e-6);
        worst = worst.max(rel_err(&a, &fd));

        let enc = EncoderModel::new(1, 1, 1.0, 0.3, rng).expect("small encoder");
        let xs = enc.sample_codewords(&ms, rng).expect("codewords");
        let f = |g: &mut Graph, v: &ParamVars| {
            let lp = enc.policy_log_prob(g, v, &ms, &xs).expect("valid batch");
            g.sum(lp)
        };
        let a = grad(f, enc.params()).expect("finite gradient");
        let fd = central_difference(|p| eval_scalar(f, p), enc.params(), 1e-6);
        worst = worst.max(rel_err(&a, &fd));
    }
    Check {
        name: "gradients",
        passed: worst <= 1e-5,
        detail: format!("worst relative error {worst:.2e} (limit 1e-5)"),
    }
}

fn meta(rng: &mut ChaCha8Rng) -> Check {
    let enc = EncoderModel::new(2, 2, 1.0, 0.15, rng).expect("encoder");
    let dec = DecoderModel::new(2, 2, 2, rng).expect("decoder");
    let st = ChannelState::stationary(2, 0.0, 4, 0.1, 1.0, rng).expect("channel");
    let blocks = (0..4)
        .map(|m| {
            let x = enc.sample_codeword(m, rng).expect("codeword");
            let y = st.transmit(&x, rng).expect("block");
            Block { message: m, x, y }
        })
        .collect();
    let frame = Frame::with_leading_pilots(0, blocks, 2).expect("frame");
    let rule = Adaptation { eta: 0.1, steps: 1, divisor: 4.0 };
    let analytic = meta_gradient(&dec, dec.params(), &frame, &rule, false).expect("meta-gradient");
    let outer = |p: &ParamVector| {
        let phi = adapt_decoder(&dec, p, &frame.pilot_received(), &frame.pilot_messages(), &rule).expect("adapt");
        let d = dec.with_params(phi).expect("layout");
        let l = d.log_losses(&frame.received(), &frame.messages()).expect("losses");
        l.iter().sum::<f64>() / l.len() as f64
    };
    let fd = central_difference(outer, dec.params(), 1e-4);
    let err = rel_err(&analytic, &fd);
    Check {
        name: "meta_gradient",
        passed: err <= 1e-3,
        detail: format!("relative error {err:.2e} (limit 1e-3)"),
    }
}

fn bpsk(rng: &mut ChaCha8Rng) -> Check {
    let n0 = snr_to_n0(10.0, 1.0);
    let st = ChannelState::new(vec![Complex64::new(1.0, 0.0)], 0.0, 1, n0, 1.0).expect("channel");
    let book = bpsk_codebook(8, 8, 1.0).expect("codebook");
    let ml = MlDecoder::new(st.taps(), &book).expect("decoder");
    let trials = 200_000u64;
    let mut errors = 0u64;
    for _ in 0..trials {
        let m = rng.random_range(0..256);
        let y = st.transmit(&book[m], rng).expect("block");
        errors += u64::from(ml.decode(&y).expect("decision") != m);
    }
    let p = bpsk_block_error_awgn(10.0, 8);
    let bler = errors as f64 / trials as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    Check {
        name: "bpsk_ml",
        passed: (bler - p).abs() <= 3.0 * se,
        detail: format!("BLER {bler:.3e} vs analytic {p:.3e} (3 s.e. = {:.1e})", 3.0 * se),
    }
}

fn channel(rng: &mut ChaCha8Rng) -> Check {
    let (chains, steps, rho, taps) = (2000usize, 50usize, 0.5, 2usize);
    let mut var_sum = 0.0;
    let mut var_sq = 0.0;
    let mut corr_sum = 0.0;
    let mut corr_sq = 0.0;
    for _ in 0..chains {
        let mut st = ChannelState::stationary(taps, rho, 1, 0.1, 1.0, rng).expect("channel");
        for _ in 0..steps {
            st.advance(rng);
        }
        let before = st.taps()[0];
        st.advance(rng);
        let after = st.taps()[0];
        let v = before.norm_sqr();
        var_sum += v;
        var_sq += v * v;
        let c = (before.conj() * after).re;
        corr_sum += c;
        corr_sq += c * c;
    }
    let n = chains as f64;
    let (mv, mc) = (var_sum / n, corr_sum / n);
    let se_v = ((var_sq / n - mv * mv) / n).sqrt();
    let se_c = ((corr_sq / n - mc * mc) / n).sqrt();
    let target_v = 1.0 / taps as f64;
    let passed = (mv - target_v).abs() <= 3.0 * se_v && (mc - rho * target_v).abs() <= 3.0 * se_c;
    Check {
        name: "channel_statistics",
        passed,
        detail: format!("tap variance {mv:.4} (target {target_v}), lag-1 covariance {mc:.4} (target {})", rho * target_v),
    }
}

fn mmse(rng: &mut ChaCha8Rng) -> Check {
    let h = draw_stationary_taps(3, rng).expect("taps");
    let book = bpsk_codebook(8, 8, 1.0).expect("codebook");
    let x = book[rng.random_range(0..256)].clone();
    let y = ReceivedBlock { samples: convolve(&h, &x) };
    let est = mmse_estimate(&[(x, y)], 1e-12, 3).expect("estimate");
    let resid = est.iter().zip(&h).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    Check {
        name: "mmse_noiseless",
        passed: resid <= 1e-6,
        detail: format!("residual {resid:.2e} (limit 1e-6)"),
    }
}

/// Runs every check with its own stream of `seed`.
pub fn run_all(seed: u64) -> Vec<Check> {
    let checks: [fn(&mut ChaCha8Rng) -> Check; 5] = [gradients, meta, bpsk, channel, mmse];
    checks
        .iter()
        .enumerate()
        .map(|(i, check)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            check(&mut rng)
        })
        .collect()
}
