use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{dense, glorot, normalize_rows, LinkError, MessageSpace};
use crate::autodiff::{Graph, Layout, ParamVars, ParamVector, Tensor, Var};
use crate::channel::{complex_to_reals, reals_to_complex, ComplexVec};

const NORM_FLOOR: f64 = 1e-12;

/// Neural transmitter: `one_hot(m) -> dense -> ELU -> dense -> power normalization`,
/// with a Gaussian exploration policy around the normalized codeword.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    space: MessageSpace,
    n: usize,
    hidden: usize,
    es: f64,
    sigma: f64,
    params: ParamVector,
}

impl EncoderModel {
    pub fn layout(k: u32, n: usize, hidden: usize) -> Arc<Layout> {
        let card = 1usize << k;
        Layout::builder()
            .segment("enc.w1", hidden, card)
            .segment("enc.b1", 1, hidden)
            .segment("enc.w2", 2 * n, hidden)
            .segment("enc.b2", 1, 2 * n)
            .build()
    }

    /// Fresh Glorot-initialized encoder with hidden width `2^k`.
    pub fn new<R: Rng + ?Sized>(
        k: u32,
        n: usize,
        es: f64,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self, LinkError> {
        let space = MessageSpace::new(k)?;
        let hidden = space.cardinality();
        let mut params = ParamVector::zeros(Self::layout(k, n, hidden));
        glorot(&mut params, "enc.w1", space.cardinality(), hidden, rng);
        glorot(&mut params, "enc.w2", hidden, 2 * n, rng);
        Self::from_params(k, n, es, sigma, params)
    }

    pub fn from_params(
        k: u32,
        n: usize,
        es: f64,
        sigma: f64,
        params: ParamVector,
    ) -> Result<Self, LinkError> {
        let space = MessageSpace::new(k)?;
        if n == 0 {
            return Err(LinkError::Dimensions("n must be positive".into()));
        }
        if !(es.is_finite() && es > 0.0) {
            return Err(LinkError::Dimensions(format!("Es must be positive, got {es}")));
        }
        if !(0.0..1.0).contains(&sigma) {
            return Err(LinkError::InvalidSigma(sigma));
        }
        let hidden = params
            .layout()
            .segment("enc.b1")
            .map(|s| s.cols)
            .ok_or_else(|| LinkError::Dimensions("missing enc.b1".into()))?;
        if **params.layout() != *Self::layout(k, n, hidden) {
            return Err(LinkError::Dimensions(
                "parameter layout does not match encoder shape".into(),
            ));
        }
        Ok(Self {
            space,
            n,
            hidden,
            es,
            sigma,
            params,
        })
    }

    /// Same architecture with different parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<Self, LinkError> {
        Self::from_params(self.space.bits(), self.n, self.es, self.sigma, params)
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self, LinkError> {
        Self::from_params(self.space.bits(), self.n, self.es, sigma, self.params.clone())
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn space(&self) -> MessageSpace {
        self.space
    }

    pub fn k(&self) -> u32 {
        self.space.bits()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn es(&self) -> f64 {
        self.es
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Normalized codewords for a batch of messages, `B x 2n` interleaved reals.
    pub fn forward(
        &self,
        graph: &mut Graph,
        vars: &ParamVars,
        messages: &[usize],
    ) -> Result<Var, LinkError> {
        let onehot = graph.constant(self.space.one_hot_batch(messages)?);
        let h = dense(graph, onehot, vars.get("enc.w1"), vars.get("enc.b1"));
        let h = graph.elu(h);
        let raw = dense(graph, h, vars.get("enc.w2"), vars.get("enc.b2"));
        let unit = normalize_rows(graph, raw, NORM_FLOOR * NORM_FLOOR);
        Ok(graph.scale(unit, (self.n as f64 * self.es).sqrt()))
    }

    fn forward_values(&self, messages: &[usize]) -> Result<Tensor, LinkError> {
        let mut graph = Graph::new();
        let vars = self.params.bind_constant(&mut graph);
        let x = self.forward(&mut graph, &vars, messages)?;
        Ok(graph.value(x).clone())
    }

    /// Deterministic codeword `f(s_m)`, satisfying `|x|^2 / n = Es`.
    pub fn encode(&self, m: usize) -> Result<ComplexVec, LinkError> {
        let t = self.forward_values(&[m])?;
        Ok(reals_to_complex(t.data()))
    }

    /// Deterministic codewords of every message, indexed by message.
    pub fn codebook(&self) -> Result<Vec<ComplexVec>, LinkError> {
        let all: Vec<usize> = (0..self.space.cardinality()).collect();
        let t = self.forward_values(&all)?;
        Ok((0..t.rows()).map(|r| reals_to_complex(t.row_slice(r))).collect())
    }

    /// Draws `x ~ N(sqrt(1 - sigma^2) f(s_m), sigma^2 I)` over the `2n` real dimensions.
    pub fn sample_codeword<R: Rng + ?Sized>(
        &self,
        m: usize,
        rng: &mut R,
    ) -> Result<ComplexVec, LinkError> {
        let mean = self.forward_values(&[m])?;
        Ok(self.perturb(mean.data(), rng))
    }

    /// Stochastic codewords for a batch of messages.
    pub fn sample_codewords<R: Rng + ?Sized>(
        &self,
        messages: &[usize],
        rng: &mut R,
    ) -> Result<Vec<ComplexVec>, LinkError> {
        let mean = self.forward_values(messages)?;
        Ok((0..mean.rows())
            .map(|r| self.perturb(mean.row_slice(r), rng))
            .collect())
    }

    fn perturb<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> ComplexVec {
        if self.sigma == 0.0 {
            return reals_to_complex(mean);
        }
        let shrink = (1.0 - self.sigma * self.sigma).sqrt();
        let reals: Vec<f64> = mean
            .iter()
            .map(|&f| {
                let z: f64 = rng.sample(StandardNormal);
                shrink * f + self.sigma * z
            })
            .collect();
        reals_to_complex(&reals)
    }

    /// Per-row `log pi(x | m)` of the Gaussian exploration policy, `B x 1`,
    /// differentiable through the encoder parameters `vars`.
    pub fn policy_log_prob(
        &self,
        graph: &mut Graph,
        vars: &ParamVars,
        messages: &[usize],
        codewords: &[ComplexVec],
    ) -> Result<Var, LinkError> {
        if self.sigma == 0.0 {
            return Err(LinkError::DegenerateDensity);
        }
        if messages.len() != codewords.len() {
            return Err(LinkError::InputLength {
                expected: messages.len(),
                found: codewords.len(),
            });
        }
        let mut data = Vec::with_capacity(codewords.len() * 2 * self.n);
        for x in codewords {
            if x.len() != self.n {
                return Err(LinkError::InputLength {
                    expected: self.n,
                    found: x.len(),
                });
            }
            data.extend(complex_to_reals(x));
        }
        let observed = graph.constant(Tensor::new(codewords.len(), 2 * self.n, data));
        let f = self.forward(graph, vars, messages)?;
        let var = self.sigma * self.sigma;
        let mean = graph.scale(f, (1.0 - var).sqrt());
        let diff = graph.sub(observed, mean);
        let sq = graph.mul(diff, diff);
        let quad = graph.row_sum(sq);
        let quad = graph.scale(quad, -0.5 / var);
        Ok(graph.add_scalar(quad, -(self.n as f64) * (2.0 * PI * var).ln()))
    }

    /// `log pi(x | m)` as a number.
    pub fn log_prob(&self, m: usize, x: &ComplexVec) -> Result<f64, LinkError> {
        let mut graph = Graph::new();
        let vars = self.params.bind_constant(&mut graph);
        let lp = self.policy_log_prob(&mut graph, &vars, &[m], std::slice::from_ref(x))?;
        Ok(graph.value(lp).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn energy(x: &ComplexVec) -> f64 {
        x.iter().map(|c| c.norm_sqr()).sum()
    }

    #[test]
    fn power_constraint_for_every_message() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, n, es) in &[(1u32, 1usize, 1.0), (3, 4, 2.5), (4, 4, 1.0), (8, 8, 1.0)] {
            let enc = EncoderModel::new(k, n, es, 0.15, &mut rng).unwrap();
            for x in enc.codebook().unwrap() {
                assert_eq!(x.len(), n);
                assert!((energy(&x) / n as f64 - es).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn constant_network_maps_all_messages_alike() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = EncoderModel::new(2, 3, 1.0, 0.0, &mut rng).unwrap();
        let mut p = enc.params().clone();
        p.segment_mut("enc.w2").unwrap().fill(0.0);
        p.segment_mut("enc.b2")
            .unwrap()
            .copy_from_slice(&[0.3, -0.1, 0.5, 0.2, -0.7, 0.4]);
        let enc = enc.with_params(p).unwrap();
        let book = enc.codebook().unwrap();
        for x in &book[1..] {
            assert_eq!(x, &book[0]);
        }
        assert!((energy(&book[0]) / 3.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn all_zero_output_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderModel::new(2, 2, 1.0, 0.0, &mut rng).unwrap();
        let p = enc.params().zeros_like();
        let enc = enc.with_params(p).unwrap();
        let x = enc.encode(0).unwrap();
        assert!(x.iter().all(|c| c.re.is_finite() && c.im.is_finite()));
    }

    #[test]
    fn encode_is_deterministic_and_checks_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = EncoderModel::new(3, 2, 1.0, 0.2, &mut rng).unwrap();
        assert_eq!(enc.encode(5).unwrap(), enc.encode(5).unwrap());
        assert!(matches!(
            enc.encode(8),
            Err(LinkError::MessageOutOfRange { message: 8, cardinality: 8 })
        ));
    }

    #[test]
    fn zero_sigma_sampling_is_the_codeword() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = EncoderModel::new(2, 2, 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(enc.sample_codeword(3, &mut rng).unwrap(), enc.encode(3).unwrap());
        assert!(matches!(
            enc.with_sigma(1.0),
            Err(LinkError::InvalidSigma(_))
        ));
    }

    #[test]
    fn sampling_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sigma = 0.15;
        let enc = EncoderModel::new(2, 2, 1.0, sigma, &mut rng).unwrap();
        let target: Vec<f64> = complex_to_reals(&enc.encode(1).unwrap())
            .iter()
            .map(|f| f * (1.0 - sigma * sigma).sqrt())
            .collect();
        let s = 100_000;
        let mut sum = vec![0.0; 4];
        let mut sum_sq = vec![0.0; 4];
        for _ in 0..s {
            let x = complex_to_reals(&enc.sample_codeword(1, &mut rng).unwrap());
            for d in 0..4 {
                sum[d] += x[d];
                sum_sq[d] += x[d] * x[d];
            }
        }
        let var = sigma * sigma;
        for d in 0..4 {
            let mean = sum[d] / s as f64;
            let sample_var = sum_sq[d] / s as f64 - mean * mean;
            // variance of the sample variance of a Gaussian is 2 sigma^4 / s
            let se_var = (2.0 * var * var / s as f64).sqrt();
            assert!((sample_var - var).abs() < 3.0 * se_var, "dim {d}: {sample_var}");
            let se_mean = (var / s as f64).sqrt();
            assert!((mean - target[d]).abs() < 3.0 * se_mean, "dim {d}: {mean}");
        }
    }

    #[test]
    fn log_prob_at_mean_and_isotropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sigma = 0.3;
        let enc = EncoderModel::new(2, 2, 1.0, sigma, &mut rng).unwrap();
        let shrink = (1.0 - sigma * sigma).sqrt();
        let mean: ComplexVec = enc.encode(2).unwrap().iter().map(|c| c * shrink).collect();
        let lp = enc.log_prob(2, &mean).unwrap();
        let expect = -2.0 * (2.0 * PI * sigma * sigma).ln();
        assert!((lp - expect).abs() < 1e-12);

        let mut a = mean.clone();
        a[0].re += 0.2;
        let mut b = mean.clone();
        b[1].im -= 0.2;
        assert!((enc.log_prob(2, &a).unwrap() - enc.log_prob(2, &b).unwrap()).abs() < 1e-12);

        let det = enc.with_sigma(0.0).unwrap();
        assert_eq!(det.log_prob(2, &mean), Err(LinkError::DegenerateDensity));
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = EncoderModel::new(2, 2, 1.0, 0.3, &mut rng).unwrap();
        let msgs = [0usize, 3, 1];
        let xs: Vec<ComplexVec> = msgs
            .iter()
            .map(|&m| enc.sample_codeword(m, &mut rng).unwrap())
            .collect();
        let f = |g: &mut Graph, v: &ParamVars| {
            let lp = enc.policy_log_prob(g, v, &msgs, &xs).unwrap();
            g.sum(lp)
        };
        let analytic = grad(f, enc.params()).unwrap();
        let h = 1e-6;
        let mut max_err: f64 = 0.0;
        let scale = analytic.norm();
        for i in 0..analytic.len() {
            let mut p = enc.params().clone();
            p.values_mut()[i] += h;
            let up: f64 = msgs
                .iter()
                .zip(&xs)
                .map(|(&m, x)| enc.with_params(p.clone()).unwrap().log_prob(m, x).unwrap())
                .sum();
            p.values_mut()[i] -= 2.0 * h;
            let down: f64 = msgs
                .iter()
                .zip(&xs)
                .map(|(&m, x)| enc.with_params(p.clone()).unwrap().log_prob(m, x).unwrap())
                .sum();
            let fd = (up - down) / (2.0 * h);
            max_err = max_err.max((fd - analytic.values()[i]).abs());
        }
        assert!(max_err / scale <= 1e-5, "{max_err} vs {scale}");
    }
}
