use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;

use super::{cross_entropy, dense, glorot, map_decision, normalize_rows, LinkError, MessageSpace};
use crate::autodiff::{BatchMats, Graph, Layout, ParamVars, ParamVector, Tensor, Var};
use crate::channel::ReceivedBlock;

const TAP_NORM_FLOOR: f64 = 1e-6;

/// Neural receiver with a radio-transformer front end.
///
/// An estimator sub-network predicts `L` complex taps from the received
/// block. The taps are normalized and used as a matched filter: the block is
/// correlated with them and truncated to `n` samples. The classifier sees
/// both the raw block and the filtered samples and outputs `2^k` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    space: MessageSpace,
    n: usize,
    taps: usize,
    hidden: usize,
    params: ParamVector,
}

impl DecoderModel {
    pub fn layout(k: u32, n: usize, taps: usize, hidden: usize) -> Arc<Layout> {
        let card = 1usize << k;
        let din = 2 * (n + taps - 1);
        Layout::builder()
            .segment("rtn.w1", hidden, din)
            .segment("rtn.b1", 1, hidden)
            .segment("rtn.w2", 2 * taps, hidden)
            .segment("rtn.b2", 1, 2 * taps)
            .segment("cls.w1y", hidden, din)
            .segment("cls.w1z", hidden, 2 * n)
            .segment("cls.b1", 1, hidden)
            .segment("cls.w2", card, hidden)
            .segment("cls.b2", 1, card)
            .build()
    }

    pub fn new<R: Rng + ?Sized>(
        k: u32,
        n: usize,
        taps: usize,
        rng: &mut R,
    ) -> Result<Self, LinkError> {
        let space = MessageSpace::new(k)?;
        if n == 0 || taps == 0 {
            return Err(LinkError::Dimensions("n and L must be positive".into()));
        }
        let hidden = space.cardinality();
        let din = 2 * (n + taps - 1);
        let mut p = ParamVector::zeros(Self::layout(k, n, taps, hidden));
        glorot(&mut p, "rtn.w1", din, hidden, rng);
        glorot(&mut p, "rtn.w2", hidden, 2 * taps, rng);
        glorot(&mut p, "cls.w1y", din + 2 * n, hidden, rng);
        glorot(&mut p, "cls.w1z", din + 2 * n, hidden, rng);
        glorot(&mut p, "cls.w2", hidden, space.cardinality(), rng);
        Self::from_params(k, n, taps, p)
    }

    pub fn from_params(
        k: u32,
        n: usize,
        taps: usize,
        params: ParamVector,
    ) -> Result<Self, LinkError> {
        let space = MessageSpace::new(k)?;
        if n == 0 || taps == 0 {
            return Err(LinkError::Dimensions("n and L must be positive".into()));
        }
        let hidden = params
            .layout()
            .segment("cls.b1")
            .map(|s| s.cols)
            .ok_or_else(|| LinkError::Dimensions("missing cls.b1".into()))?;
        if **params.layout() != *Self::layout(k, n, taps, hidden) {
            return Err(LinkError::Dimensions(
                "parameter layout does not match decoder shape".into(),
            ));
        }
        Ok(Self {
            space,
            n,
            taps,
            hidden,
            params,
        })
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self, LinkError> {
        Self::from_params(self.space.bits(), self.n, self.taps, params)
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

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Complex samples per received block, `n + L - 1`.
    pub fn block_len(&self) -> usize {
        self.n + self.taps - 1
    }

    fn received_tensor(&self, ys: &[ReceivedBlock]) -> Result<(Tensor, Rc<BatchMats>), LinkError> {
        let len = self.block_len();
        let din = 2 * len;
        let (zr, zc) = (2 * self.n, 2 * self.taps);
        let mut flat = Vec::with_capacity(ys.len() * din);
        let mut mats = vec![0.0; ys.len() * zr * zc];
        for (b, y) in ys.iter().enumerate() {
            if y.len() != len {
                return Err(LinkError::InputLength {
                    expected: len,
                    found: y.len(),
                });
            }
            flat.extend(y.to_reals());
            // z_i = sum_l conj(g_l) y_{i+l} written as a real 2n x 2L map of g.
            let m = &mut mats[b * zr * zc..(b + 1) * zr * zc];
            for i in 0..self.n {
                for l in 0..self.taps {
                    let s = y.samples[i + l];
                    m[(2 * i) * zc + 2 * l] = s.re;
                    m[(2 * i) * zc + 2 * l + 1] = s.im;
                    m[(2 * i + 1) * zc + 2 * l] = s.im;
                    m[(2 * i + 1) * zc + 2 * l + 1] = -s.re;
                }
            }
        }
        Ok((
            Tensor::new(ys.len(), din, flat),
            Rc::new(BatchMats::new(zr, zc, mats)),
        ))
    }

    /// Logits for a batch of received blocks, `B x 2^k`.
    pub fn forward(
        &self,
        graph: &mut Graph,
        vars: &ParamVars,
        ys: &[ReceivedBlock],
    ) -> Result<Var, LinkError> {
        let (input, corr) = self.received_tensor(ys)?;
        let y = graph.constant(input);
        let h = dense(graph, y, vars.get("rtn.w1"), vars.get("rtn.b1"));
        let h = graph.elu(h);
        let taps = dense(graph, h, vars.get("rtn.w2"), vars.get("rtn.b2"));
        let taps = normalize_rows(graph, taps, TAP_NORM_FLOOR * TAP_NORM_FLOOR);
        let z = graph.batch_matvec(taps, corr, false);

        let hy = graph.matmul_t(y, vars.get("cls.w1y"), false, true);
        let hz = graph.matmul_t(z, vars.get("cls.w1z"), false, true);
        let h = graph.add(hy, hz);
        let h = graph.add_bias(h, vars.get("cls.b1"));
        let h = graph.elu(h);
        Ok(dense(graph, h, vars.get("cls.w2"), vars.get("cls.b2")))
    }

    /// Summed cross-entropy over a batch, differentiable through `vars`.
    pub fn batch_loss(
        &self,
        graph: &mut Graph,
        vars: &ParamVars,
        ys: &[ReceivedBlock],
        messages: &[usize],
    ) -> Result<Var, LinkError> {
        let logits = self.forward(graph, vars, ys)?;
        let per_block = cross_entropy(graph, logits, messages)?;
        Ok(graph.sum(per_block))
    }

    fn eval_logits(&self, ys: &[ReceivedBlock]) -> Result<(Graph, Var), LinkError> {
        let mut graph = Graph::new();
        let vars = self.params.bind_constant(&mut graph);
        let logits = self.forward(&mut graph, &vars, ys)?;
        Ok((graph, logits))
    }

    /// Posterior estimate `p(m | y)` over all messages.
    pub fn decode_probs(&self, y: &ReceivedBlock) -> Result<Vec<f64>, LinkError> {
        let (mut graph, logits) = self.eval_logits(std::slice::from_ref(y))?;
        let p = graph.softmax(logits);
        Ok(graph.value(p).data().to_vec())
    }

    /// MAP decisions for a batch of blocks.
    pub fn decide(&self, ys: &[ReceivedBlock]) -> Result<Vec<usize>, LinkError> {
        if ys.is_empty() {
            return Ok(Vec::new());
        }
        let (graph, logits) = self.eval_logits(ys)?;
        let t = graph.value(logits);
        // argmax of the logits equals argmax of the softmax
        (0..t.rows()).map(|r| map_decision(t.row_slice(r))).collect()
    }

    /// Per-block `-log p(m | y)`.
    pub fn log_losses(&self, ys: &[ReceivedBlock], messages: &[usize]) -> Result<Vec<f64>, LinkError> {
        let (mut graph, logits) = self.eval_logits(ys)?;
        let l = cross_entropy(&mut graph, logits, messages)?;
        Ok(graph.value(l).data().to_vec())
    }
}
