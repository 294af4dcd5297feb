//! The three networks: feature extractor (theta), classifier head (phi)
//! and pairwise similarity network (omega), all expressed as tape programs
//! over a flat parameter vector.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::InputShape;
use crate::params::{ParamNodes, ParamVector, ParamVectorBuilder};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape mismatch: expected {expected} columns, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Mlp,
    TinyConv,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub input: InputShape,
    /// Hidden layer widths for the MLP, channel counts per block for the
    /// tiny conv net.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl BackboneSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, embed_dim: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::Mlp,
            input: InputShape::Vector { dim: input_dim },
            hidden,
            embed_dim,
        }
    }

    pub fn tiny_conv(channels: usize, height: usize, width: usize, blocks: Vec<usize>, embed_dim: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::TinyConv,
            input: InputShape::Image { channels, height, width },
            hidden: blocks,
            embed_dim,
        }
    }
}

/// Logit layout: first `known_classes` logits are the known classes, the
/// remaining `novel_classes` logits the novel block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub known_classes: usize,
    pub novel_classes: usize,
}

impl HeadSpec {
    pub fn total(&self) -> usize {
        self.known_classes + self.novel_classes
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimNetSpec {
    /// Width of the single hidden layer. Zero means a parameterless
    /// similarity net that always scores 0.5.
    pub hidden: usize,
    /// Feed L2-normalized embeddings to the similarity net instead of raw
    /// ones. Off by default.
    #[serde(default)]
    pub normalize_embeddings: bool,
}

impl Default for SimNetSpec {
    fn default() -> Self {
        SimNetSpec { hidden: 100, normalize_embeddings: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    pub simnet: SimNetSpec,
}

pub struct Model {
    pub spec: ModelSpec,
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl Model {
    pub fn new(spec: ModelSpec) -> Self {
        Model { spec }
    }

    /// Seeded fan-in-scaled uniform initialization of all segments.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamVector::builder();
        b = self.push_backbone(&mut rng, b);
        b = self.push_head(&mut rng, b);
        b = self.push_simnet(&mut rng, b);
        b.build()
    }

    /// Re-draws theta and phi only, keeping omega (stage-2 reinitializes
    /// the feature extractor and classifier but the similarity net is done).
    pub fn reinit_theta_phi(&self, params: &ParamVector, seed: u64) -> ParamVector {
        let fresh = self.init_params(seed);
        let mut out = params.clone();
        for seg in fresh.segments() {
            if seg.name.starts_with("theta.") || seg.name.starts_with("phi.") {
                out.slice_mut(&seg.name).copy_from_slice(fresh.slice(&seg.name));
            }
        }
        out
    }

    fn push_backbone(&self, rng: &mut ChaCha8Rng, mut b: ParamVectorBuilder) -> ParamVectorBuilder {
        match self.spec.backbone.kind {
            BackboneKind::Mlp => {
                let mut dims = vec![self.spec.backbone.input.dim()];
                dims.extend(&self.spec.backbone.hidden);
                dims.push(self.spec.backbone.embed_dim);
                for i in 0..dims.len() - 1 {
                    let (fi, fo) = (dims[i], dims[i + 1]);
                    b = b.push(&format!("theta.w{i}"), fi, fo, fan_in_uniform(rng, fi, fi * fo));
                    b = b.push(&format!("theta.b{i}"), 1, fo, fan_in_uniform(rng, fi, fo));
                }
            }
            BackboneKind::TinyConv => {
                let (c0, mut h, mut w) = match self.spec.backbone.input {
                    InputShape::Image { channels, height, width } => (channels, height, width),
                    InputShape::Vector { .. } => panic!("tiny-conv backbone needs image input"),
                };
                let mut cin = c0;
                for (i, &cout) in self.spec.backbone.hidden.iter().enumerate() {
                    let fi = cin * 9;
                    b = b.push(&format!("theta.conv{i}_w"), fi, cout, fan_in_uniform(rng, fi, fi * cout));
                    b = b.push(&format!("theta.conv{i}_b"), 1, cout, fan_in_uniform(rng, fi, cout));
                    cin = cout;
                    h /= 2;
                    w /= 2;
                }
                let flat = cin * h * w;
                b = b.push(
                    "theta.proj_w",
                    flat,
                    self.spec.backbone.embed_dim,
                    fan_in_uniform(rng, flat, flat * self.spec.backbone.embed_dim),
                );
                b = b.push(
                    "theta.proj_b",
                    1,
                    self.spec.backbone.embed_dim,
                    fan_in_uniform(rng, flat, self.spec.backbone.embed_dim),
                );
            }
        }
        b
    }

    fn push_head(&self, rng: &mut ChaCha8Rng, b: ParamVectorBuilder) -> ParamVectorBuilder {
        let d = self.spec.backbone.embed_dim;
        let c = self.spec.head.total();
        b.push("phi.w", d, c, fan_in_uniform(rng, d, d * c))
            .push("phi.b", 1, c, fan_in_uniform(rng, d, c))
    }

    fn push_simnet(&self, rng: &mut ChaCha8Rng, mut b: ParamVectorBuilder) -> ParamVectorBuilder {
        let h = self.spec.simnet.hidden;
        if h == 0 {
            return b;
        }
        let d2 = 2 * self.spec.backbone.embed_dim;
        b = b.push("omega.w0", d2, h, fan_in_uniform(rng, d2, d2 * h));
        b = b.push("omega.b0", 1, h, fan_in_uniform(rng, d2, h));
        b = b.push("omega.w1", h, 1, fan_in_uniform(rng, h, h));
        b = b.push("omega.b1", 1, 1, fan_in_uniform(rng, h, 1));
        b
    }

    fn affine(tape: &mut Tape, x: NodeId, w: NodeId, bias: NodeId) -> NodeId {
        let (n, _) = tape.shape(x);
        let xw = tape.matmul(x, w);
        let bm = tape.repeat_rows(bias, n);
        tape.add(xw, bm)
    }

    /// Feature extractor: batch matrix (n x input_dim) -> embeddings (n x d).
    pub fn embed(&self, tape: &mut Tape, nodes: &ParamNodes, x: NodeId) -> Result<NodeId, ModelError> {
        let (_, cols) = tape.shape(x);
        let expected = self.spec.backbone.input.dim();
        if cols != expected {
            return Err(ModelError::ShapeMismatch { expected, got: cols });
        }
        Ok(match self.spec.backbone.kind {
            BackboneKind::Mlp => {
                let mut cur = x;
                let n_layers = self.spec.backbone.hidden.len() + 1;
                for i in 0..n_layers {
                    let w = nodes.get(&format!("theta.w{i}"));
                    let bias = nodes.get(&format!("theta.b{i}"));
                    cur = Self::affine(tape, cur, w, bias);
                    if i + 1 < n_layers {
                        cur = tape.relu(cur);
                    }
                }
                cur
            }
            BackboneKind::TinyConv => self.embed_conv(tape, nodes, x),
        })
    }

    fn embed_conv(&self, tape: &mut Tape, nodes: &ParamNodes, x: NodeId) -> NodeId {
        let (batch, _) = tape.shape(x);
        let (c0, mut h, mut w) = match self.spec.backbone.input {
            InputShape::Image { channels, height, width } => (channels, height, width),
            InputShape::Vector { .. } => unreachable!(),
        };
        let mut cin = c0;
        let mut cur = x;
        for (i, &cout) in self.spec.backbone.hidden.iter().enumerate() {
            // 3x3 conv, stride 1, zero pad 1, via im2col + matmul
            let idx = im2col_indices(batch, cin, h, w);
            let patches = tape.gather(cur, Rc::new(idx), batch * h * w, cin * 9);
            let cw = nodes.get(&format!("theta.conv{i}_w"));
            let cb = nodes.get(&format!("theta.conv{i}_b"));
            let conv = Self::affine(tape, patches, cw, cb); // (b*h*w, cout)
            // back to channel-major rows: (b, cout*h*w)
            let idx = pixmajor_to_chw_indices(batch, cout, h, w);
            let chw = tape.gather(conv, Rc::new(idx), batch, cout * h * w);
            let act = tape.relu(chw);
            // 2x2 average pool
            let (h2, w2) = (h / 2, w / 2);
            let idx = pool_indices(batch, cout, h, w);
            let windows = tape.gather(act, Rc::new(idx), batch * cout * h2 * w2, 4);
            let sums = tape.sum_cols(windows); // (b*cout*h2*w2, 1)
            let pooled = tape.mul_scalar(sums, 0.25);
            let idx: Vec<i64> = (0..(batch * cout * h2 * w2) as i64).collect();
            cur = tape.gather(pooled, Rc::new(idx), batch, cout * h2 * w2);
            cin = cout;
            h = h2;
            w = w2;
        }
        let pw = nodes.get("theta.proj_w");
        let pb = nodes.get("theta.proj_b");
        Self::affine(tape, cur, pw, pb)
    }

    /// Classifier head: embeddings -> (logits, softmax probabilities).
    pub fn classify(&self, tape: &mut Tape, nodes: &ParamNodes, z: NodeId) -> (NodeId, NodeId) {
        let w = nodes.get("phi.w");
        let bias = nodes.get("phi.b");
        let logits = Self::affine(tape, z, w, bias);
        let probs = tape.softmax_rows(logits);
        (logits, probs)
    }

    /// Full forward pass: inputs -> (embeddings, logits, probabilities).
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        x: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId), ModelError> {
        let z = self.embed(tape, nodes, x)?;
        let (logits, probs) = self.classify(tape, nodes, z);
        Ok((z, logits, probs))
    }

    /// Symmetric pairwise similarity scores in (0,1) for a list of row
    /// pairs over the embedding matrix: 0.5 * (g(z_i || z_j) + g(z_j || z_i))
    /// with g a sigmoid MLP over the concatenated pair.
    pub fn pair_scores(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        z: NodeId,
        pairs: &[(usize, usize)],
    ) -> NodeId {
        let p = pairs.len();
        if self.spec.simnet.hidden == 0 {
            return tape.constant(ndarray::Array2::from_elem((p, 1), 0.5));
        }
        let z = if self.spec.simnet.normalize_embeddings {
            let (n, d) = tape.shape(z);
            let z2 = tape.mul(z, z);
            let sq = tape.sum_cols(z2);
            let norm = tape.sqrt(sq);
            let safe = tape.clamp_min(norm, 1e-12);
            let nm = tape.repeat_cols(safe, d);
            let _ = n;
            tape.div(z, nm)
        } else {
            z
        };
        let fwd = self.simnet_half(tape, nodes, z, pairs, false);
        let rev = self.simnet_half(tape, nodes, z, pairs, true);
        let sum = tape.add(fwd, rev);
        tape.mul_scalar(sum, 0.5)
    }

    fn simnet_half(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        z: NodeId,
        pairs: &[(usize, usize)],
        reversed: bool,
    ) -> NodeId {
        let d = self.spec.backbone.embed_dim;
        let p = pairs.len();
        // gather + concat in one indexed read: row p is z[i] || z[j]
        let mut idx = Vec::with_capacity(p * 2 * d);
        for &(i, j) in pairs {
            let (a, b) = if reversed { (j, i) } else { (i, j) };
            for c in 0..d {
                idx.push((a * d + c) as i64);
            }
            for c in 0..d {
                idx.push((b * d + c) as i64);
            }
        }
        let cat = tape.gather(z, Rc::new(idx), p, 2 * d);
        let w0 = nodes.get("omega.w0");
        let b0 = nodes.get("omega.b0");
        let h = Self::affine(tape, cat, w0, b0);
        let h = tape.relu(h);
        let w1 = nodes.get("omega.w1");
        let b1 = nodes.get("omega.b1");
        let out = Self::affine(tape, h, w1, b1);
        tape.sigmoid(out)
    }
}

fn im2col_indices(batch: usize, c: usize, h: usize, w: usize) -> Vec<i64> {
    let mut idx = Vec::with_capacity(batch * h * w * c * 9);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let sy = y as i64 + ky as i64 - 1;
                            let sx = x as i64 + kx as i64 - 1;
                            if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                idx.push((b * c * h * w + ci * h * w) as i64 + sy * w as i64 + sx);
                            } else {
                                idx.push(-1);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

fn pixmajor_to_chw_indices(batch: usize, c: usize, h: usize, w: usize) -> Vec<i64> {
    // source layout: ((b, y, x), co) row-major; target: (b, co*h*w)
    let mut idx = Vec::with_capacity(batch * c * h * w);
    for b in 0..batch {
        for co in 0..c {
            for y in 0..h {
                for x in 0..w {
                    idx.push(((b * h * w + y * w + x) * c + co) as i64);
                }
            }
        }
    }
    idx
}

fn pool_indices(batch: usize, c: usize, h: usize, w: usize) -> Vec<i64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(batch * c * h2 * w2 * 4);
    for b in 0..batch {
        for ci in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    for dy in 0..2usize {
                        for dx in 0..2usize {
                            idx.push(
                                (b * c * h * w + ci * h * w + (2 * y + dy) * w + (2 * x + dx))
                                    as i64,
                            );
                        }
                    }
                }
            }
        }
    }
    idx
}
