use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::DiffError;

/// One named block of a [`ParamVector`], e.g. a weight matrix or a bias row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered segment map shared by all vectors of one model shape.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

#[derive(Default)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    offset: usize,
}

impl LayoutBuilder {
    pub fn segment(mut self, name: impl Into<String>, rows: usize, cols: usize) -> Self {
        let name = name.into();
        assert!(
            self.segments.iter().all(|s| s.name != name),
            "duplicate segment {name}"
        );
        self.segments.push(Segment {
            name,
            offset: self.offset,
            rows,
            cols,
        });
        self.offset += rows * cols;
        self
    }

    pub fn build(self) -> Arc<Layout> {
        Arc::new(Layout {
            segments: self.segments,
        })
    }
}

/// Flat real parameter vector with a named segment map.
///
/// Vectors are values: every update returns a new vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self, DiffError> {
        if values.len() != layout.total_len() {
            return Err(DiffError::ShapeMismatch {
                expected: layout.total_len(),
                found: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total_len();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(Arc::clone(&self.layout))
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .segment(name)
            .map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.layout.segment(name)?.clone();
        Some(&mut self.values[s.offset..s.offset + s.len()])
    }

    fn check_same_shape(&self, other: &ParamVector) -> Result<(), DiffError> {
        if !Arc::ptr_eq(&self.layout, &other.layout) && self.layout != other.layout {
            return Err(DiffError::LayoutMismatch);
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64, DiffError> {
        self.check_same_shape(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &ParamVector) -> Result<ParamVector, DiffError> {
        self.check_same_shape(other)?;
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + alpha * b)
                .collect(),
            layout: Arc::clone(&self.layout),
        })
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        Self {
            values: self.values.iter().map(|v| alpha * v).collect(),
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Adds every segment to `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> ParamVars {
        self.bind_with(graph, true)
    }

    /// Adds every segment to `graph` as a constant.
    pub fn bind_constant(&self, graph: &mut Graph) -> ParamVars {
        self.bind_with(graph, false)
    }

    fn bind_with(&self, graph: &mut Graph, differentiable: bool) -> ParamVars {
        let vars = self
            .layout
            .segments()
            .iter()
            .map(|s| {
                let t = Tensor::new(
                    s.rows,
                    s.cols,
                    self.values[s.offset..s.offset + s.len()].to_vec(),
                );
                if differentiable {
                    graph.param(t)
                } else {
                    graph.constant(t)
                }
            })
            .collect();
        ParamVars {
            vars,
            layout: Arc::clone(&self.layout),
        }
    }
}

/// Graph nodes standing for the segments of a [`ParamVector`].
///
/// The nodes are leaves after [`ParamVector::bind`], but may be arbitrary
/// intermediate nodes, e.g. the adapted parameters `theta - eta * grad`.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    layout: Arc<Layout>,
}

impl ParamVars {
    pub fn from_vars(layout: Arc<Layout>, vars: Vec<Var>) -> Self {
        assert_eq!(layout.segments().len(), vars.len());
        Self { vars, layout }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Node for segment `name`. Panics if the layout has no such segment.
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .layout
            .position(name)
            .unwrap_or_else(|| panic!("no parameter segment named {name}"));
        self.vars[i]
    }

    /// Reads the current values of the nodes back into a flat vector.
    pub fn collect(&self, graph: &Graph) -> ParamVector {
        let mut values = Vec::with_capacity(self.layout.total_len());
        for (v, s) in self.vars.iter().zip(self.layout.segments()) {
            let t = graph.value(*v);
            debug_assert_eq!(t.shape(), (s.rows, s.cols));
            values.extend_from_slice(t.data());
        }
        ParamVector {
            values,
            layout: Arc::clone(&self.layout),
        }
    }
}
