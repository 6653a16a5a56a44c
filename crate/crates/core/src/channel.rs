//! Block-fading multipath channel with autoregressive Rayleigh taps.
//!
//! A block of `n` complex symbols passes through an `L`-tap linear
//! convolution plus circularly symmetric white Gaussian noise. Taps stay
//! constant for `frame_len` blocks and are refreshed at every frame
//! boundary as `h <- rho * h + sqrt(1 - rho^2) * innovation`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub type ComplexVec = Vec<Complex64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("channel needs at least one tap")]
    NoTaps,
    #[error("correlation must lie in [0, 1], got {0}")]
    InvalidRho(f64),
    #[error("frame length must be positive")]
    ZeroFrameLength,
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("cannot transmit an empty block")]
    EmptyBlock,
    #[error("expected {expected} taps, got {found}")]
    TapCount { expected: usize, found: usize },
}

/// Samples `CN(0, variance)`: real and imaginary parts each `N(0, variance / 2)`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// `L` i.i.d. taps from `CN(0, 1/L)`, the stationary law of the fading process.
pub fn draw_stationary_taps<R: Rng + ?Sized>(
    num_taps: usize,
    rng: &mut R,
) -> Result<ComplexVec, ChannelError> {
    if num_taps == 0 {
        return Err(ChannelError::NoTaps);
    }
    let var = 1.0 / num_taps as f64;
    Ok((0..num_taps).map(|_| complex_gaussian(rng, var)).collect())
}

/// Noise variance `N0` for a given `Es/N0` in dB.
pub fn snr_to_n0(es_n0_db: f64, es: f64) -> f64 {
    es / 10f64.powf(es_n0_db / 10.0)
}

/// Full linear convolution, length `taps.len() + x.len() - 1`.
pub fn convolve(taps: &[Complex64], x: &[Complex64]) -> ComplexVec {
    if taps.is_empty() || x.is_empty() {
        return Vec::new();
    }
    let mut y = vec![Complex64::new(0.0, 0.0); taps.len() + x.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        for (l, &h) in taps.iter().enumerate() {
            y[i + l] += h * xi;
        }
    }
    y
}

/// Received samples of one block, `n + L - 1` complex values.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceivedBlock {
    pub samples: ComplexVec,
}

impl ReceivedBlock {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Interleaved `[re0, im0, re1, im1, ...]`.
    pub fn to_reals(&self) -> Vec<f64> {
        complex_to_reals(&self.samples)
    }
}

pub fn complex_to_reals(v: &[Complex64]) -> Vec<f64> {
    v.iter().flat_map(|c| [c.re, c.im]).collect()
}

pub fn reals_to_complex(v: &[f64]) -> ComplexVec {
    assert!(v.len() % 2 == 0, "odd number of interleaved reals");
    v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

/// Current tap realization plus the parameters of its evolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelState {
    taps: ComplexVec,
    rho: f64,
    frame_len: usize,
    block_index: u64,
    n0: f64,
    es: f64,
}

impl ChannelState {
    pub fn new(
        taps: ComplexVec,
        rho: f64,
        frame_len: usize,
        n0: f64,
        es: f64,
    ) -> Result<Self, ChannelError> {
        if taps.is_empty() {
            return Err(ChannelError::NoTaps);
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(ChannelError::InvalidRho(rho));
        }
        if frame_len == 0 {
            return Err(ChannelError::ZeroFrameLength);
        }
        for (name, value) in [("n0", n0), ("es", es)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ChannelError::NonPositive { name, value });
            }
        }
        Ok(Self {
            taps,
            rho,
            frame_len,
            block_index: 0,
            n0,
            es,
        })
    }

    /// State at block 0 with taps from the stationary distribution.
    pub fn stationary<R: Rng + ?Sized>(
        num_taps: usize,
        rho: f64,
        frame_len: usize,
        n0: f64,
        es: f64,
        rng: &mut R,
    ) -> Result<Self, ChannelError> {
        let taps = draw_stationary_taps(num_taps, rng)?;
        Self::new(taps, rho, frame_len, n0, es)
    }

    pub fn taps(&self) -> &[Complex64] {
        &self.taps
    }

    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn block_index(&self) -> u64 {
        self.block_index
    }

    pub fn n0(&self) -> f64 {
        self.n0
    }

    pub fn es(&self) -> f64 {
        self.es
    }

    pub fn set_taps(&mut self, taps: ComplexVec) -> Result<(), ChannelError> {
        if taps.len() != self.taps.len() {
            return Err(ChannelError::TapCount {
                expected: self.taps.len(),
                found: taps.len(),
            });
        }
        self.taps = taps;
        Ok(())
    }

    /// Moves to the next block. Taps are refreshed only when the new block
    /// index starts a frame.
    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.block_index += 1;
        if self.block_index % self.frame_len as u64 == 0 {
            let var = 1.0 / self.taps.len() as f64;
            let keep = self.rho;
            let fresh = (1.0 - self.rho * self.rho).max(0.0).sqrt();
            for h in &mut self.taps {
                let innovation = complex_gaussian(rng, var);
                *h = keep * *h + fresh * innovation;
            }
        }
    }

    /// Advances to the first block of the next frame.
    pub fn advance_frame<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let into_frame = self.block_index % self.frame_len as u64;
        for _ in into_frame..self.frame_len as u64 {
            self.advance(rng);
        }
    }

    /// `y = h * x + w` with `w ~ CN(0, N0 I)`, full convolution length.
    pub fn transmit<R: Rng + ?Sized>(
        &self,
        x: &[Complex64],
        rng: &mut R,
    ) -> Result<ReceivedBlock, ChannelError> {
        if x.is_empty() {
            return Err(ChannelError::EmptyBlock);
        }
        let mut samples = convolve(&self.taps, x);
        for s in &mut samples {
            *s += complex_gaussian(rng, self.n0);
        }
        Ok(ReceivedBlock { samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn snr_examples() {
        assert!((snr_to_n0(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert_eq!(snr_to_n0(0.0, 1.0), 1.0);
        assert!((snr_to_n0(10.0, 2.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn stationary_tap_shapes_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(draw_stationary_taps(2, &mut rng).unwrap().len(), 2);
        assert_eq!(draw_stationary_taps(0, &mut rng), Err(ChannelError::NoTaps));

        let draws = 100_000;
        let mean_energy: f64 = (0..draws)
            .map(|_| draw_stationary_taps(1, &mut rng).unwrap()[0].norm_sqr())
            .sum::<f64>()
            / draws as f64;
        assert!((mean_energy - 1.0).abs() < 0.02, "{mean_energy}");

        let mut per_tap = [0.0; 3];
        for _ in 0..draws {
            let taps = draw_stationary_taps(3, &mut rng).unwrap();
            for (acc, h) in per_tap.iter_mut().zip(&taps) {
                *acc += h.norm_sqr();
            }
        }
        for acc in per_tap {
            let v = acc / draws as f64;
            assert!((v - 1.0 / 3.0).abs() < 0.01, "{v}");
        }
    }

    #[test]
    fn rho_one_keeps_taps_across_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut st = ChannelState::stationary(3, 1.0, 4, 0.1, 1.0, &mut rng).unwrap();
        let before = st.taps().to_vec();
        for _ in 0..12 {
            st.advance(&mut rng);
        }
        assert_eq!(st.taps(), &before[..]);
    }

    #[test]
    fn rho_zero_takes_the_innovation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = ChannelState::stationary(2, 0.0, 1, 0.1, 1.0, &mut rng).unwrap();
        let mut replay = rng.clone();
        st.advance(&mut rng);
        let innovation: Vec<_> = (0..2).map(|_| complex_gaussian(&mut replay, 0.5)).collect();
        assert_eq!(st.taps(), &innovation[..]);
    }

    #[test]
    fn taps_constant_inside_a_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = ChannelState::stationary(2, 0.5, 5, 0.1, 1.0, &mut rng).unwrap();
        let before = st.taps().to_vec();
        for _ in 0..4 {
            st.advance(&mut rng);
            assert_eq!(st.taps(), &before[..]);
        }
        st.advance(&mut rng);
        assert_ne!(st.taps(), &before[..]);
        assert_eq!(st.block_index(), 5);
    }

    #[test]
    fn advance_frame_lands_on_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut st = ChannelState::stationary(1, 0.5, 4, 0.1, 1.0, &mut rng).unwrap();
        st.advance(&mut rng);
        st.advance_frame(&mut rng);
        assert_eq!(st.block_index(), 4);
        st.advance_frame(&mut rng);
        assert_eq!(st.block_index(), 8);
    }

    #[test]
    fn transmit_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tiny = 1e-300;
        let st = ChannelState::new(vec![c(1.0, 0.0)], 0.0, 1, tiny, 1.0).unwrap();
        let x = vec![c(0.5, -1.0), c(1.2, 0.3)];
        let y = st.transmit(&x, &mut rng).unwrap();
        for (a, b) in y.samples.iter().zip(&x) {
            assert!((a - b).norm() < 1e-100);
        }

        let st = ChannelState::new(vec![c(0.0, 0.0); 3], 0.0, 1, tiny, 1.0).unwrap();
        let y = st.transmit(&x, &mut rng).unwrap();
        assert_eq!(y.len(), 4);
        assert!(y.samples.iter().all(|s| s.norm() < 1e-100));

        let (a, b) = (c(0.3, 0.4), c(-1.0, 2.0));
        let st = ChannelState::new(vec![a, b], 0.0, 1, tiny, 1.0).unwrap();
        let y = st.transmit(&[c(1.0, 0.0), c(0.0, 0.0)], &mut rng).unwrap();
        let expect = [a, b, c(0.0, 0.0)];
        for (s, e) in y.samples.iter().zip(&expect) {
            assert!((s - e).norm() < 1e-100);
        }
        assert_eq!(st.transmit(&[], &mut rng), Err(ChannelError::EmptyBlock));
    }

    #[test]
    fn transmit_is_reproducible() {
        let st = ChannelState::new(vec![c(0.6, 0.1), c(0.2, -0.3)], 0.5, 4, 0.1, 1.0).unwrap();
        let x = vec![c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0)];
        let a = st.transmit(&x, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = st.transmit(&x, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_states_are_rejected() {
        let t = vec![c(1.0, 0.0)];
        assert_eq!(
            ChannelState::new(t.clone(), 1.5, 1, 0.1, 1.0),
            Err(ChannelError::InvalidRho(1.5))
        );
        assert_eq!(
            ChannelState::new(t.clone(), 0.5, 0, 0.1, 1.0),
            Err(ChannelError::ZeroFrameLength)
        );
        assert!(ChannelState::new(t, 0.5, 1, 0.0, 1.0).is_err());
        assert_eq!(
            ChannelState::new(vec![], 0.5, 1, 0.1, 1.0),
            Err(ChannelError::NoTaps)
        );
    }

    #[test]
    fn interleave_round_trip() {
        let v = vec![c(1.0, 2.0), c(-3.0, 0.5)];
        assert_eq!(complex_to_reals(&v), vec![1.0, 2.0, -3.0, 0.5]);
        assert_eq!(reals_to_complex(&complex_to_reals(&v)), v);
    }
}
