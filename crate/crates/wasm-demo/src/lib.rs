//! Browser bindings for a few small simulations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use metalink::baselines::{bpsk_block_error_awgn, bpsk_codebook, MlDecoder};
use metalink::channel::{snr_to_n0, ChannelState};
use metalink::training::{TrainConfig, Trainer, TrainingMode};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Per-frame tap powers `|h_l|^2`, frame-major (`frames x taps`).
#[wasm_bindgen]
pub fn fading_trajectory(taps: usize, rho: f64, frames: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = ChannelState::stationary(taps, rho, 1, 1.0, 1.0, &mut rng).map_err(js_err)?;
    let mut out = Vec::with_capacity(frames * taps);
    for _ in 0..frames {
        out.extend(st.taps().iter().map(|h| h.norm_sqr()));
        st.advance_frame(&mut rng);
    }
    Ok(out)
}

/// BPSK block error rate over `points` SNRs in `[lo_db, hi_db]`:
/// analytic values followed by Monte-Carlo ML estimates on an AWGN channel.
#[wasm_bindgen]
pub fn bpsk_bler_curve(bits: u32, lo_db: f64, hi_db: f64, points: usize, blocks: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let book = bpsk_codebook(bits, bits as usize, 1.0).map_err(js_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snrs: Vec<f64> = (0..points)
        .map(|i| lo_db + (hi_db - lo_db) * i as f64 / (points.max(2) - 1) as f64)
        .collect();
    let mut analytic = Vec::with_capacity(points);
    let mut simulated = Vec::with_capacity(points);
    for &db in &snrs {
        analytic.push(bpsk_block_error_awgn(db, bits));
        let st = ChannelState::new(vec![1.0.into()], 0.0, 1, snr_to_n0(db, 1.0), 1.0).map_err(js_err)?;
        let ml = MlDecoder::new(st.taps(), &book).map_err(js_err)?;
        let mut errors = 0usize;
        for i in 0..blocks {
            let m = i % book.len();
            let y = st.transmit(&book[m], &mut rng).map_err(js_err)?;
            errors += usize::from(ml.decode(&y).map_err(js_err)? != m);
        }
        simulated.push(errors as f64 / blocks.max(1) as f64);
    }
    analytic.extend(simulated);
    Ok(analytic)
}

/// Jointly trains a one-symbol autoencoder on a flat fading channel and
/// returns its constellation as interleaved (re, im) pairs.
#[wasm_bindgen]
pub fn train_constellation(bits: u32, frames: usize, kappa: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    let cfg = TrainConfig {
        k: bits,
        n: 1,
        taps: 1,
        es_n0_db: 15.0,
        frame_len: 32,
        adapt_blocks: 4,
        frames,
        kappa,
        rho: 0.99,
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&cfg, TrainingMode::Joint).map_err(js_err)?;
    trainer.run(frames).map_err(js_err)?;
    let book = trainer.codebook().map_err(js_err)?;
    Ok(book.iter().flat_map(|x| [x[0].re, x[0].im]).collect())
}
