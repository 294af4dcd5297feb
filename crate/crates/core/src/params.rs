//! Flat parameter storage with named, disjoint segments.
//!
//! The three networks live in one flat vector under the `theta.`, `phi.`
//! and `omega.` prefixes; optimizers and checkpoints operate on the flat
//! view while the tape sees one input node per segment.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::tape::{DiffError, NodeId, Tape};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
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

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All model parameters as one flat array of named matrix segments.
/// Segments are disjoint and cover the array by construction.
#[derive(Debug, Clone)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
    by_name: HashMap<String, usize>,
}

impl ParamVector {
    pub fn builder() -> ParamVectorBuilder {
        ParamVectorBuilder::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> &Segment {
        let i = self.by_name[name];
        &self.segments[i]
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        let seg = self.segment(name);
        &self.values[seg.range()]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let seg = self.segment(name).clone();
        &mut self.values[seg.range()]
    }

    pub fn matrix(&self, name: &str) -> Array2<f64> {
        let seg = self.segment(name);
        Array2::from_shape_vec((seg.rows, seg.cols), self.slice(name).to_vec()).unwrap()
    }

    /// All flat indices belonging to segments whose name starts with any of
    /// the given prefixes, in segment order.
    pub fn indices_with_prefix(&self, prefixes: &[&str]) -> Vec<usize> {
        let mut out = Vec::new();
        for seg in &self.segments {
            if prefixes.iter().any(|p| seg.name.starts_with(p)) {
                out.extend(seg.range());
            }
        }
        out
    }

    pub fn segments_with_prefix(&self, prefix: &str) -> Vec<&Segment> {
        self.segments
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Adds `scale * delta` to the coordinates listed in `indices`.
    pub fn axpy_at(&mut self, indices: &[usize], delta: &[f64], scale: f64) {
        assert_eq!(indices.len(), delta.len());
        for (&i, &d) in indices.iter().zip(delta) {
            self.values[i] += scale * d;
        }
    }
}

#[derive(Default)]
pub struct ParamVectorBuilder {
    values: Vec<f64>,
    segments: Vec<Segment>,
    by_name: HashMap<String, usize>,
}

impl ParamVectorBuilder {
    pub fn push(mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "segment data length for {name}");
        assert!(
            !self.by_name.contains_key(name),
            "duplicate segment name {name}"
        );
        let offset = self.values.len();
        self.by_name.insert(name.to_string(), self.segments.len());
        self.segments.push(Segment {
            name: name.to_string(),
            offset,
            rows,
            cols,
        });
        self.values.extend(data);
        self
    }

    pub fn build(self) -> ParamVector {
        ParamVector {
            values: self.values,
            segments: self.segments,
            by_name: self.by_name,
        }
    }
}

/// Tape input nodes for each parameter segment.
#[derive(Clone)]
pub struct ParamNodes {
    nodes: Vec<(String, NodeId)>,
    by_name: HashMap<String, NodeId>,
}

impl ParamNodes {
    pub fn from_params(tape: &mut Tape, params: &ParamVector) -> Self {
        let mut nodes = Vec::new();
        let mut by_name = HashMap::new();
        for seg in params.segments() {
            let id = tape.input(
                Array2::from_shape_vec((seg.rows, seg.cols), params.slice(&seg.name).to_vec())
                    .unwrap(),
            );
            nodes.push((seg.name.clone(), id));
            by_name.insert(seg.name.clone(), id);
        }
        ParamNodes { nodes, by_name }
    }

    /// Like `from_params`, but overriding the values of selected segments.
    pub fn from_params_with_overrides(
        tape: &mut Tape,
        params: &ParamVector,
        overrides: &HashMap<String, Vec<f64>>,
    ) -> Self {
        let mut nodes = Vec::new();
        let mut by_name = HashMap::new();
        for seg in params.segments() {
            let data = overrides
                .get(&seg.name)
                .cloned()
                .unwrap_or_else(|| params.slice(&seg.name).to_vec());
            let id = tape.input(Array2::from_shape_vec((seg.rows, seg.cols), data).unwrap());
            nodes.push((seg.name.clone(), id));
            by_name.insert(seg.name.clone(), id);
        }
        ParamNodes { nodes, by_name }
    }

    pub fn get(&self, name: &str) -> NodeId {
        self.by_name[name]
    }

    pub fn try_get(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(n, id)| (n.as_str(), *id))
    }

    /// Replaces the node a name resolves to (used for unrolled parameters).
    pub fn with_replacement(&self, name: &str, node: NodeId) -> ParamNodes {
        let mut nodes = self.nodes.clone();
        let mut by_name = self.by_name.clone();
        for (n, id) in nodes.iter_mut() {
            if n == name {
                *id = node;
            }
        }
        by_name.insert(name.to_string(), node);
        ParamNodes { nodes, by_name }
    }
}

/// A scalar loss built from tape primitives over the parameter nodes.
pub trait LossFn {
    fn build(&self, tape: &mut Tape, params: &ParamNodes) -> NodeId;
}

impl<F> LossFn for F
where
    F: Fn(&mut Tape, &ParamNodes) -> NodeId,
{
    fn build(&self, tape: &mut Tape, params: &ParamNodes) -> NodeId {
        self(tape, params)
    }
}

/// Evaluates the loss at the given parameters.
pub fn eval_loss(f: &dyn LossFn, params: &ParamVector) -> f64 {
    let mut tape = Tape::new();
    let nodes = ParamNodes::from_params(&mut tape, params);
    let out = f.build(&mut tape, &nodes);
    tape.scalar(out)
}

/// Backward pass on an existing tape, flattened to match the ParamVector
/// layout.
pub fn flat_grad(
    tape: &mut Tape,
    nodes: &ParamNodes,
    params: &ParamVector,
    out: NodeId,
) -> Result<Vec<f64>, DiffError> {
    let wrt: Vec<NodeId> = nodes.iter().map(|(_, id)| id).collect();
    let grads = tape.backward(out, &wrt)?;
    let mut flat = vec![0.0; params.len()];
    for ((name, _), gid) in nodes.iter().zip(&grads) {
        let seg = params.segment(name);
        let gv = tape.value(*gid);
        for (dst, src) in flat[seg.range()].iter_mut().zip(gv.iter()) {
            *dst = *src;
        }
    }
    Ok(flat)
}

/// Reverse-mode gradient of `f` with respect to every parameter, flattened
/// to match the ParamVector layout. Also returns the forward value.
pub fn grad(f: &dyn LossFn, params: &ParamVector) -> Result<(f64, Vec<f64>), DiffError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::from_params(&mut tape, params);
    let out = f.build(&mut tape, &nodes);
    let value = tape.scalar(out);
    let flat = flat_grad(&mut tape, &nodes, params, out)?;
    Ok((value, flat))
}

/// Central finite-difference gradient estimate, one coordinate at a time.
/// Independent oracle for `grad`; shares nothing with the backward pass.
pub fn finite_diff_grad(f: &dyn LossFn, params: &ParamVector, eps: f64) -> Vec<f64> {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut p = params.clone();
    let mut out = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = p.values()[i];
        p.values_mut()[i] = orig + eps;
        let hi = eval_loss(f, &p);
        p.values_mut()[i] = orig - eps;
        let lo = eval_loss(f, &p);
        p.values_mut()[i] = orig;
        out[i] = (hi - lo) / (2.0 * eps);
    }
    out
}
