//! Reverse-mode differentiation over small dense tensors.
//!
//! The engine records every operation in a [`Graph`]. Backward passes are
//! themselves recorded as graph operations, so a gradient can be
//! differentiated again. That is what the decoder meta-gradient needs: it
//! contains a Hessian-vector product of the pilot loss.
//!
//! ```
//! use metalink::autodiff::{grad, Layout, ParamVector};
//!
//! let layout = Layout::builder().segment("x", 1, 1).build();
//! let p = ParamVector::new(layout, vec![3.0]).unwrap();
//! let g = grad(|graph, vars| {
//!     let x = vars.get("x");
//!     graph.mul(x, x)
//! }, &p).unwrap();
//! assert_eq!(g.values(), &[6.0]);
//! ```

mod graph;
mod params;
mod tensor;

pub use graph::{BatchMats, Graph, Var};
pub use params::{Layout, LayoutBuilder, ParamVars, ParamVector, Segment};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("differentiated output must be a scalar, got a {rows}x{cols} tensor")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("parameter length mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("parameter vectors have different segment layouts")]
    LayoutMismatch,
    #[error("step size must be finite and non-negative, got {0}")]
    InvalidStep(f64),
}

impl Graph {
    /// Gradient nodes of `output` for every segment in `params`.
    pub fn grad_params(&mut self, output: Var, params: &ParamVars) -> ParamVars {
        let grads = self.backward(output, params.vars());
        ParamVars::from_vars(params.layout().clone(), grads)
    }

    /// Errors if any node value is NaN or infinite.
    pub fn check_finite(&self) -> Result<(), DiffError> {
        match self.first_non_finite() {
            Some(node) => Err(DiffError::NonFinite {
                node,
                op: self.op_name(Var(node)),
            }),
            None => Ok(()),
        }
    }
}

fn scalar_output(graph: &Graph, out: Var) -> Result<(), DiffError> {
    let (rows, cols) = graph.shape(out);
    if (rows, cols) != (1, 1) {
        return Err(DiffError::NonScalarOutput { rows, cols });
    }
    Ok(())
}

/// Value and gradient of the scalar function built by `f` at `p`.
pub fn value_and_grad<F>(f: F, p: &ParamVector) -> Result<(f64, ParamVector), DiffError>
where
    F: FnOnce(&mut Graph, &ParamVars) -> Var,
{
    let mut graph = Graph::new();
    let vars = p.bind(&mut graph);
    let out = f(&mut graph, &vars);
    scalar_output(&graph, out)?;
    graph.check_finite()?;
    let grads = graph.grad_params(out, &vars);
    graph.check_finite()?;
    Ok((graph.value(out).item(), grads.collect(&graph)))
}

/// Gradient of the scalar function built by `f`, same layout as `p`.
pub fn grad<F>(f: F, p: &ParamVector) -> Result<ParamVector, DiffError>
where
    F: FnOnce(&mut Graph, &ParamVars) -> Var,
{
    value_and_grad(f, p).map(|(_, g)| g)
}

/// Hessian-vector product `H(p) v`, computed as the gradient of
/// `<grad f(p), v>` with `v` held constant.
pub fn grad_of_grad_dot<F>(f: F, p: &ParamVector, v: &ParamVector) -> Result<ParamVector, DiffError>
where
    F: FnOnce(&mut Graph, &ParamVars) -> Var,
{
    if p.layout() != v.layout() {
        return Err(DiffError::LayoutMismatch);
    }
    let mut graph = Graph::new();
    let vars = p.bind(&mut graph);
    let out = f(&mut graph, &vars);
    scalar_output(&graph, out)?;
    let grads = graph.grad_params(out, &vars);
    let dir = v.bind_constant(&mut graph);
    let inner = dot_params(&mut graph, &grads, &dir);
    let hv = graph.grad_params(inner, &vars);
    graph.check_finite()?;
    Ok(hv.collect(&graph))
}

/// `sum_s <a_s, b_s>` over all segments, as a graph scalar.
pub fn dot_params(graph: &mut Graph, a: &ParamVars, b: &ParamVars) -> Var {
    let mut total: Option<Var> = None;
    for (&x, &y) in a.vars().iter().zip(b.vars()) {
        let d = graph.dot(x, y);
        total = Some(match total {
            None => d,
            Some(t) => graph.add(t, d),
        });
    }
    total.unwrap_or_else(|| graph.scalar(0.0))
}

/// `p - lr * g`, leaving `p` untouched.
pub fn apply_sgd(p: &ParamVector, g: &ParamVector, lr: f64) -> Result<ParamVector, DiffError> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(DiffError::InvalidStep(lr));
    }
    p.axpy(-lr, g)
}
