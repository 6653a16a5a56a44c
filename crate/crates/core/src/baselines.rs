//! Classical reference receiver chain: BPSK mapping, pilot-based MMSE
//! channel estimation and exhaustive maximum-likelihood block decoding.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::channel::{convolve, ComplexVec, ReceivedBlock};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("BPSK carries one bit per channel use, so k must equal n (k = {k}, n = {n})")]
    RateMismatch { k: u32, n: usize },
    #[error("message {0} does not fit in k bits")]
    MessageOutOfRange(usize),
    #[error("at least one pilot is required")]
    NoPilots,
    #[error("pilot {index}: received length {found}, expected {expected}")]
    PilotLength {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("channel estimation system is singular")]
    Singular,
    #[error("empty codebook")]
    EmptyCodebook,
    #[error("received block length {found} does not match codebook ({expected})")]
    BlockLength { expected: usize, found: usize },
}

/// BPSK codeword: bit `i` of `m` (MSB first) drives channel use `i` to
/// `+sqrt(Es)` for 0 and `-sqrt(Es)` for 1 on the real axis.
pub fn bpsk_encode(m: usize, k: u32, n: usize, es: f64) -> Result<ComplexVec, BaselineError> {
    if k as usize != n {
        return Err(BaselineError::RateMismatch { k, n });
    }
    if k < usize::BITS && m >> k != 0 {
        return Err(BaselineError::MessageOutOfRange(m));
    }
    let amp = es.sqrt();
    Ok((0..n)
        .map(|i| {
            let bit = (m >> (n - 1 - i)) & 1;
            Complex64::new(if bit == 0 { amp } else { -amp }, 0.0)
        })
        .collect())
}

pub fn bpsk_codebook(k: u32, n: usize, es: f64) -> Result<Vec<ComplexVec>, BaselineError> {
    (0..1usize << k).map(|m| bpsk_encode(m, k, n, es)).collect()
}

/// `(n + L - 1) x L` Toeplitz matrix with `X h = conv(h, x)`.
pub fn convolution_matrix(x: &[Complex64], taps: usize) -> DMatrix<Complex64> {
    let rows = x.len() + taps - 1;
    DMatrix::from_fn(rows, taps, |i, j| {
        if i >= j && i - j < x.len() {
            x[i - j]
        } else {
            Complex64::new(0.0, 0.0)
        }
    })
}

fn normal_equations(
    pilots: &[(ComplexVec, ReceivedBlock)],
    taps: usize,
) -> Result<(DMatrix<Complex64>, DVector<Complex64>), BaselineError> {
    if pilots.is_empty() {
        return Err(BaselineError::NoPilots);
    }
    let mut gram = DMatrix::<Complex64>::zeros(taps, taps);
    let mut rhs = DVector::<Complex64>::zeros(taps);
    for (index, (x, y)) in pilots.iter().enumerate() {
        let expected = x.len() + taps - 1;
        if y.len() != expected {
            return Err(BaselineError::PilotLength {
                index,
                expected,
                found: y.len(),
            });
        }
        let xm = convolution_matrix(x, taps);
        let yv = DVector::from_column_slice(&y.samples);
        gram += xm.adjoint() * &xm;
        rhs += xm.adjoint() * yv;
    }
    Ok((gram, rhs))
}

/// Linear MMSE estimate of the taps under the prior `h ~ CN(0, I/L)`:
/// `(sum X^H X + N0 L I)^-1 sum X^H y`.
pub fn mmse_estimate(
    pilots: &[(ComplexVec, ReceivedBlock)],
    n0: f64,
    taps: usize,
) -> Result<ComplexVec, BaselineError> {
    let (mut gram, rhs) = normal_equations(pilots, taps)?;
    let ridge = Complex64::new(n0 * taps as f64, 0.0);
    for i in 0..taps {
        gram[(i, i)] += ridge;
    }
    let h = gram.lu().solve(&rhs).ok_or(BaselineError::Singular)?;
    Ok(h.iter().copied().collect())
}

/// Least-squares estimate (no prior), via the pseudo-inverse of the normal equations.
pub fn least_squares_estimate(
    pilots: &[(ComplexVec, ReceivedBlock)],
    taps: usize,
) -> Result<ComplexVec, BaselineError> {
    let (gram, rhs) = normal_equations(pilots, taps)?;
    let h = gram
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|_| BaselineError::Singular)?;
    Ok(h.iter().copied().collect())
}

/// Exhaustive ML decoder for a fixed channel estimate: the channel output of
/// every codeword is computed once.
#[derive(Clone, Debug)]
pub struct MlDecoder {
    outputs: Vec<ComplexVec>,
}

impl MlDecoder {
    pub fn new(h_hat: &[Complex64], codebook: &[ComplexVec]) -> Result<Self, BaselineError> {
        if codebook.is_empty() {
            return Err(BaselineError::EmptyCodebook);
        }
        Ok(Self {
            outputs: codebook.iter().map(|x| convolve(h_hat, x)).collect(),
        })
    }

    /// `argmin_m |y - h * x_m|^2`, lowest `m` on ties.
    pub fn decode(&self, y: &ReceivedBlock) -> Result<usize, BaselineError> {
        let expected = self.outputs[0].len();
        if y.len() != expected {
            return Err(BaselineError::BlockLength {
                expected,
                found: y.len(),
            });
        }
        let mut best = (0, f64::INFINITY);
        for (m, out) in self.outputs.iter().enumerate() {
            let d: f64 = out
                .iter()
                .zip(&y.samples)
                .map(|(a, b)| (b - a).norm_sqr())
                .sum();
            if d < best.1 {
                best = (m, d);
            }
        }
        Ok(best.0)
    }
}

pub fn ml_decode(
    h_hat: &[Complex64],
    y: &ReceivedBlock,
    codebook: &[ComplexVec],
) -> Result<usize, BaselineError> {
    MlDecoder::new(h_hat, codebook)?.decode(y)
}

/// Gaussian tail probability `Q(x) = P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Block error probability of uncoded BPSK over `bits` channel uses of a
/// unit-gain AWGN channel: `1 - (1 - Q(sqrt(2 Es/N0)))^bits`.
pub fn bpsk_block_error_awgn(es_n0_db: f64, bits: u32) -> f64 {
    let snr = 10f64.powf(es_n0_db / 10.0);
    let p_bit = q_function((2.0 * snr).sqrt());
    1.0 - (1.0 - p_bit).powi(bits as i32)
}
