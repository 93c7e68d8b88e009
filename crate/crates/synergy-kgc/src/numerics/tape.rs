//! Reverse-mode differentiation on a linear tape.
//!
//! Operations evaluate eagerly as they are recorded; each node stores its
//! output value plus whatever the backward rule needs (softmax weights,
//! dropout masks, cached norms). A tape is consumed by at most one
//! [`Tape::backward`] pass, which walks the nodes in exact reverse order of
//! recording and accumulates parameter gradients into a [`ParamSet`].
//!
//! Parameter reads are memoized: requesting the same [`ParamId`] twice
//! returns the same node, so every use of a shared weight contributes to a
//! single accumulated gradient.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{KgcError, Result};
use crate::numerics::param::{ParamId, ParamSet};
use crate::numerics::tensor::Tensor;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    /// Leaf with no gradient flow.
    Const,
    /// Leaf backed by a parameter; backward accumulates into its grad buffer.
    Param(ParamId),
    /// `y = W x + b` with `W: [m, n]`, `x: [n]`, optional `b: [m]`.
    Affine {
        w: NodeId,
        x: NodeId,
        b: Option<NodeId>,
    },
    /// Elementwise sum of two same-shape tensors.
    Add { a: NodeId, b: NodeId },
    /// Vector concatenation `[a; b]`.
    Concat { a: NodeId, b: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    /// Softmax over a full vector.
    Softmax { x: NodeId },
    /// `y = gain * xhat + bias` with `xhat = (x - mean) / sqrt(var + eps)`,
    /// variance computed with `1/d` normalization.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: f64,
        inv_std: f64,
    },
    /// Inverted dropout; mask entries are `0` or `1 / (1 - p)`. Recorded only
    /// in training mode, evaluation reuses the input node untouched.
    Dropout { x: NodeId, mask: Vec<f64> },
    /// Cosine similarity of two vectors.
    Cosine {
        a: NodeId,
        b: NodeId,
        norm_a: f64,
        norm_b: f64,
    },
    /// All-pairs cosine matrix between row vectors and column vectors.
    CosineMatrix {
        rows: Vec<NodeId>,
        cols: Vec<NodeId>,
        row_norms: Vec<f64>,
        col_norms: Vec<f64>,
    },
    /// Multi-head scaled dot-product attention of one query over a member
    /// set that serves as both keys and values. `weights` caches the
    /// per-head softmax, flattened head-major.
    Attend {
        query: NodeId,
        members: Vec<NodeId>,
        heads: usize,
        scale: f64,
        weights: Vec<f64>,
    },
    /// `y = alpha * on + (1 - alpha) * off` with scalar `alpha`.
    GateBlend {
        alpha: NodeId,
        on: NodeId,
        off: NodeId,
    },
    /// Arithmetic mean of same-shape vectors.
    MeanVecs { xs: Vec<NodeId> },
    /// In-batch contrastive loss over a square score matrix. Row `i` treats
    /// entry `(i, i)` as the positive; the margin already entered the cached
    /// `probs` at forward time and the backward rule only needs `tau`.
    InfoNce {
        scores: NodeId,
        tau: f64,
        probs: Vec<f64>,
    },
    /// Squared Euclidean distance to a constant target.
    SqDistToConst { x: NodeId, target: Tensor },
    /// `y = sum_i weights_i * x_i` with constant weights.
    DotConst { x: NodeId, weights: Tensor },
    /// Weighted sum of scalar nodes with constant coefficients.
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(KgcError::Numeric(format!(
                "non-finite value produced by `{name}` at tape position {}",
                self.nodes.len()
            )));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    fn shape_err(op: &'static str, details: String) -> KgcError {
        KgcError::Shape { op, details }
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Const, value, "constant")
    }

    /// Reads a parameter onto the tape, memoized per [`ParamId`].
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.param_cache.get(&id) {
            return Ok(node);
        }
        let value = params.get(id).value.clone();
        let node = self.push(Op::Param(id), value, "param")?;
        self.param_cache.insert(id, node);
        Ok(node)
    }

    pub fn affine(&mut self, w: NodeId, x: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (wt, xt) = (self.value(w), self.value(x));
        if !wt.is_matrix() || wt.cols() != xt.len() {
            return Err(Self::shape_err(
                "affine",
                format!("W {:?} vs x {:?}", wt.shape(), xt.shape()),
            ));
        }
        let (m, n) = (wt.rows(), wt.cols());
        let mut out: Vec<f64> = (0..m)
            .map(|i| (0..n).map(|j| wt.at2(i, j) * xt.data()[j]).sum())
            .collect();
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != m {
                return Err(Self::shape_err(
                    "affine",
                    format!("bias {:?} vs output [{m}]", bt.shape()),
                ));
            }
            for (o, bv) in out.iter_mut().zip(bt.data()) {
                *o += bv;
            }
        }
        self.push(Op::Affine { w, x, b }, Tensor::vector(out), "affine")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0);
        self.push(Op::Add { a, b }, out, "add")
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        self.push(Op::Concat { a, b }, Tensor::vector(out), "concat")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Tanh { x }, Tensor::new(shape, out), "tanh")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Sigmoid { x }, Tensor::new(shape, out), "sigmoid")
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let out = stable_softmax(self.value(x).data());
        self.push(Op::Softmax { x }, Tensor::vector(out), "softmax")
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        let d = xt.len();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Self::shape_err(
                "layer_norm",
                format!(
                    "x [{d}] vs gain {:?} / bias {:?}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let mean = xt.data().iter().sum::<f64>() / d as f64;
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let gt = self.value(gain).data();
        let bt = self.value(bias).data();
        let out = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| gt[i] * (v - mean) * inv_std + bt[i])
            .collect();
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            },
            Tensor::vector(out),
            "layer_norm",
        )
    }

    /// Inverted dropout. In evaluation mode (`train == false`) or at `p == 0`
    /// this is an exact identity: the input node is returned unchanged and
    /// nothing is recorded.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(KgcError::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Dropout { x, mask }, Tensor::new(shape, out), "dropout")
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.len() != bt.len() {
            return Err(Self::shape_err(
                "cosine",
                format!("{:?} vs {:?}", at.shape(), bt.shape()),
            ));
        }
        let (norm_a, norm_b) = (at.norm(), bt.norm());
        if norm_a == 0.0 || norm_b == 0.0 {
            return Err(KgcError::Numeric(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let value = at.dot(bt) / (norm_a * norm_b);
        self.push(
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
            Tensor::scalar(value),
            "cosine",
        )
    }

    /// All-pairs cosine similarities; entry `(i, j)` compares `rows[i]`
    /// against `cols[j]`.
    pub fn cosine_matrix(&mut self, rows: &[NodeId], cols: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() || cols.is_empty() {
            return Err(Self::shape_err("cosine_matrix", "empty row or column set".into()));
        }
        let d = self.value(rows[0]).len();
        for &n in rows.iter().chain(cols) {
            if self.value(n).len() != d {
                return Err(Self::shape_err(
                    "cosine_matrix",
                    format!("mixed vector lengths {d} vs {}", self.value(n).len()),
                ));
            }
        }
        let row_norms: Vec<f64> = rows.iter().map(|&n| self.value(n).norm()).collect();
        let col_norms: Vec<f64> = cols.iter().map(|&n| self.value(n).norm()).collect();
        if row_norms.iter().chain(&col_norms).any(|&n| n == 0.0) {
            return Err(KgcError::Numeric(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let (m, n) = (rows.len(), cols.len());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ri = self.value(rows[i]);
            for j in 0..n {
                out[i * n + j] =
                    ri.dot(self.value(cols[j])) / (row_norms[i] * col_norms[j]);
            }
        }
        self.push(
            Op::CosineMatrix {
                rows: rows.to_vec(),
                cols: cols.to_vec(),
                row_norms,
                col_norms,
            },
            Tensor::matrix(m, n, out),
            "cosine_matrix",
        )
    }

    /// Scaled dot-product attention of `query` over `members`, which play
    /// the role of both keys and values. With a single head the scale is
    /// `sqrt(d)`; with `h > 1` heads the vectors are split into `h`
    /// contiguous slices and each head scales by `sqrt(d / h)`.
    pub fn attend(&mut self, query: NodeId, members: &[NodeId], heads: usize) -> Result<NodeId> {
        if members.is_empty() {
            return Err(Self::shape_err("attend", "empty member set".into()));
        }
        let d = self.value(query).len();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Self::shape_err(
                "attend",
                format!("dimension {d} not divisible into {heads} heads"),
            ));
        }
        for &m in members {
            if self.value(m).len() != d {
                return Err(Self::shape_err(
                    "attend",
                    format!("member length {} vs query {d}", self.value(m).len()),
                ));
            }
        }
        let head_dim = d / heads;
        let scale = if heads == 1 {
            (d as f64).sqrt()
        } else {
            (head_dim as f64).sqrt()
        };
        let n = members.len();
        let mut weights = vec![0.0; heads * n];
        let mut out = vec![0.0; d];
        for h in 0..heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            let q = &self.value(query).data()[lo..hi];
            let logits: Vec<f64> = members
                .iter()
                .map(|&m| {
                    let u = &self.value(m).data()[lo..hi];
                    q.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / scale
                })
                .collect();
            let w = stable_softmax(&logits);
            for (j, &member) in members.iter().enumerate() {
                let u = &self.value(member).data()[lo..hi];
                for (k, uv) in u.iter().enumerate() {
                    out[lo + k] += w[j] * uv;
                }
            }
            weights[h * n..(h + 1) * n].copy_from_slice(&w);
        }
        self.push(
            Op::Attend {
                query,
                members: members.to_vec(),
                heads,
                scale,
                weights,
            },
            Tensor::vector(out),
            "attend",
        )
    }

    /// Attention weights cached by an [`Tape::attend`] node, flattened
    /// head-major (`heads * members` entries).
    pub fn attention_weights(&self, node: NodeId) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attend { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn gate_blend(&mut self, alpha: NodeId, on: NodeId, off: NodeId) -> Result<NodeId> {
        if !self.value(alpha).is_scalar() {
            return Err(Self::shape_err(
                "gate_blend",
                format!("alpha shape {:?}", self.value(alpha).shape()),
            ));
        }
        if self.value(on).shape() != self.value(off).shape() {
            return Err(Self::shape_err(
                "gate_blend",
                format!(
                    "{:?} vs {:?}",
                    self.value(on).shape(),
                    self.value(off).shape()
                ),
            ));
        }
        let a = self.value(alpha).scalar_value();
        let out = self
            .value(on)
            .data()
            .iter()
            .zip(self.value(off).data())
            .map(|(x, y)| a * x + (1.0 - a) * y)
            .collect();
        let shape = self.value(on).shape().to_vec();
        self.push(
            Op::GateBlend { alpha, on, off },
            Tensor::new(shape, out),
            "gate_blend",
        )
    }

    pub fn mean_vecs(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Self::shape_err("mean_vecs", "empty input set".into()));
        }
        let shape = self.value(xs[0]).shape().to_vec();
        let mut out = Tensor::zeros(shape.clone());
        for &x in xs {
            if self.value(x).shape() != shape.as_slice() {
                return Err(Self::shape_err(
                    "mean_vecs",
                    format!("{:?} vs {:?}", shape, self.value(x).shape()),
                ));
            }
            out.add_scaled(self.value(x), 1.0 / xs.len() as f64);
        }
        self.push(Op::MeanVecs { xs: xs.to_vec() }, out, "mean_vecs")
    }

    /// In-batch contrastive loss over a square score matrix: the diagonal
    /// holds the positive scores. Each row is sharpened by `1/tau` with
    /// `margin` subtracted from the positive score first; the loss is the
    /// mean negative log probability of the positives.
    pub fn info_nce(&mut self, scores: NodeId, tau: f64, margin: f64) -> Result<NodeId> {
        let st = self.value(scores);
        if !st.is_matrix() || st.rows() != st.cols() {
            return Err(Self::shape_err(
                "info_nce",
                format!("expected square matrix, got {:?}", st.shape()),
            ));
        }
        if tau <= 0.0 {
            return Err(KgcError::Config(format!("temperature {tau} must be positive")));
        }
        let b = st.rows();
        let mut probs = vec![0.0; b * b];
        let mut loss = 0.0;
        for i in 0..b {
            let logits: Vec<f64> = (0..b)
                .map(|j| {
                    let s = st.at2(i, j);
                    if i == j {
                        (s - margin) / tau
                    } else {
                        s / tau
                    }
                })
                .collect();
            let p = stable_softmax(&logits);
            loss -= p[i].ln();
            probs[i * b..(i + 1) * b].copy_from_slice(&p);
        }
        loss /= b as f64;
        self.push(
            Op::InfoNce { scores, tau, probs },
            Tensor::scalar(loss),
            "info_nce",
        )
    }

    pub fn sq_dist_to_const(&mut self, x: NodeId, target: Tensor) -> Result<NodeId> {
        if self.value(x).shape() != target.shape() {
            return Err(Self::shape_err(
                "sq_dist_to_const",
                format!("{:?} vs {:?}", self.value(x).shape(), target.shape()),
            ));
        }
        let value = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        self.push(
            Op::SqDistToConst { x, target },
            Tensor::scalar(value),
            "sq_dist_to_const",
        )
    }

    pub fn dot_const(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        if self.value(x).len() != weights.len() {
            return Err(Self::shape_err(
                "dot_const",
                format!("{:?} vs {:?}", self.value(x).shape(), weights.shape()),
            ));
        }
        let value = self.value(x).dot(&weights);
        self.push(Op::DotConst { x, weights }, Tensor::scalar(value), "dot_const")
    }

    /// `sum_k coeff_k * term_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Self::shape_err("weighted_sum", "empty term list".into()));
        }
        let mut value = 0.0;
        for &(node, coeff) in terms {
            if !self.value(node).is_scalar() {
                return Err(Self::shape_err(
                    "weighted_sum",
                    format!("term shape {:?}", self.value(node).shape()),
                ));
            }
            value += coeff * self.value(node).scalar_value();
        }
        self.push(
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            Tensor::scalar(value),
            "weighted_sum",
        )
    }

    /// Runs the backward pass from `loss`, consuming the tape and
    /// accumulating parameter gradients into `params`.
    pub fn backward(self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Self::shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", loss_value.shape()),
            ));
        }
        if !loss_value.all_finite() {
            return Err(KgcError::Numeric("non-finite loss at backward".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(pid) => params.accumulate_grad(*pid, &g)?,
                Op::Affine { w, x, b } => {
                    let wt = self.value(*w);
                    let xt = self.value(*x);
                    let (m, n) = (wt.rows(), wt.cols());
                    let mut dw = Tensor::zeros(vec![m, n]);
                    let mut dx = Tensor::zeros(vec![n]);
                    for r in 0..m {
                        let gr = g.data()[r];
                        for c in 0..n {
                            dw.data_mut()[r * n + c] += gr * xt.data()[c];
                            dx.data_mut()[c] += wt.at2(r, c) * gr;
                        }
                    }
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *x, dx);
                    if let Some(b) = b {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Concat { a, b } => {
                    let la = self.value(*a).len();
                    let da = Tensor::vector(g.data()[..la].to_vec());
                    let db = Tensor::vector(g.data()[la..].to_vec());
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Tanh { x } => {
                    let y = &self.nodes[i].value;
                    let dx = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx));
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[i].value;
                    let dx = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx));
                }
                Op::Softmax { x } => {
                    let y = &self.nodes[i].value;
                    let inner: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                    let dx = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| yv * (gv - inner))
                        .collect();
                    acc(&mut grads, *x, Tensor::vector(dx));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    mean,
                    inv_std,
                } => {
                    let xt = self.value(*x);
                    let gt = self.value(*gain);
                    let d = xt.len();
                    let xhat: Vec<f64> =
                        xt.data().iter().map(|v| (v - mean) * inv_std).collect();
                    let dgain = g
                        .data()
                        .iter()
                        .zip(&xhat)
                        .map(|(gv, xh)| gv * xh)
                        .collect();
                    acc(&mut grads, *gain, Tensor::vector(dgain));
                    acc(&mut grads, *bias, g.clone());
                    let h: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(gt.data())
                        .map(|(gv, gn)| gv * gn)
                        .collect();
                    let mean_h = h.iter().sum::<f64>() / d as f64;
                    let mean_hx = h
                        .iter()
                        .zip(&xhat)
                        .map(|(hv, xh)| hv * xh)
                        .sum::<f64>()
                        / d as f64;
                    let dx = h
                        .iter()
                        .zip(&xhat)
                        .map(|(hv, xh)| inv_std * (hv - mean_h - xh * mean_hx))
                        .collect();
                    acc(&mut grads, *x, Tensor::vector(dx));
                }
                Op::Dropout { x, mask } => {
                    let dx = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(gv, mv)| gv * mv)
                        .collect();
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, Tensor::new(shape, dx));
                }
                Op::Cosine {
                    a,
                    b,
                    norm_a,
                    norm_b,
                } => {
                    let gv = g.scalar_value();
                    let c = self.nodes[i].value.scalar_value();
                    let at = self.value(*a);
                    let bt = self.value(*b);
                    let cross = norm_a * norm_b;
                    let da = bt
                        .data()
                        .iter()
                        .zip(at.data())
                        .map(|(bv, av)| gv * (bv / cross - c * av / (norm_a * norm_a)))
                        .collect();
                    let db = at
                        .data()
                        .iter()
                        .zip(bt.data())
                        .map(|(av, bv)| gv * (av / cross - c * bv / (norm_b * norm_b)))
                        .collect();
                    acc(&mut grads, *a, Tensor::vector(da));
                    acc(&mut grads, *b, Tensor::vector(db));
                }
                Op::CosineMatrix {
                    rows,
                    cols,
                    row_norms,
                    col_norms,
                } => {
                    let value = &self.nodes[i].value;
                    let d = self.value(rows[0]).len();
                    let n = cols.len();
                    let mut drows = vec![Tensor::zeros(vec![d]); rows.len()];
                    let mut dcols = vec![Tensor::zeros(vec![d]); cols.len()];
                    for (ri, &row) in rows.iter().enumerate() {
                        let rt = self.value(row);
                        for (ci, &col) in cols.iter().enumerate() {
                            let gij = g.data()[ri * n + ci];
                            if gij == 0.0 {
                                continue;
                            }
                            let ct = self.value(col);
                            let s = value.at2(ri, ci);
                            let cross = row_norms[ri] * col_norms[ci];
                            let rn2 = row_norms[ri] * row_norms[ri];
                            let cn2 = col_norms[ci] * col_norms[ci];
                            for k in 0..d {
                                drows[ri].data_mut()[k] +=
                                    gij * (ct.data()[k] / cross - s * rt.data()[k] / rn2);
                                dcols[ci].data_mut()[k] +=
                                    gij * (rt.data()[k] / cross - s * ct.data()[k] / cn2);
                            }
                        }
                    }
                    for (&row, dr) in rows.iter().zip(drows) {
                        acc(&mut grads, row, dr);
                    }
                    for (&col, dc) in cols.iter().zip(dcols) {
                        acc(&mut grads, col, dc);
                    }
                }
                Op::Attend {
                    query,
                    members,
                    heads,
                    scale,
                    weights,
                } => {
                    let d = self.value(*query).len();
                    let head_dim = d / heads;
                    let n = members.len();
                    let mut dq = Tensor::zeros(vec![d]);
                    let mut dmembers = vec![Tensor::zeros(vec![d]); n];
                    for h in 0..*heads {
                        let lo = h * head_dim;
                        let hi = lo + head_dim;
                        let gs = &g.data()[lo..hi];
                        let qs = &self.value(*query).data()[lo..hi];
                        let w = &weights[h * n..(h + 1) * n];
                        // a_j = <g, u_j> on this head's slice.
                        let a: Vec<f64> = members
                            .iter()
                            .map(|&m| {
                                let u = &self.value(m).data()[lo..hi];
                                gs.iter().zip(u).map(|(x, y)| x * y).sum::<f64>()
                            })
                            .collect();
                        let wa: f64 = w.iter().zip(&a).map(|(x, y)| x * y).sum();
                        for (j, &member) in members.iter().enumerate() {
                            let dz = w[j] * (a[j] - wa);
                            let u = &self.value(member).data()[lo..hi];
                            for k in 0..head_dim {
                                dq.data_mut()[lo + k] += dz * u[k] / scale;
                                dmembers[j].data_mut()[lo + k] +=
                                    dz * qs[k] / scale + w[j] * gs[k];
                            }
                        }
                    }
                    acc(&mut grads, *query, dq);
                    for (&member, dm) in members.iter().zip(dmembers) {
                        acc(&mut grads, member, dm);
                    }
                }
                Op::GateBlend { alpha, on, off } => {
                    let a = self.value(*alpha).scalar_value();
                    let dalpha: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*on).data().iter().zip(self.value(*off).data()))
                        .map(|(gv, (x, y))| gv * (x - y))
                        .sum();
                    let don = g.data().iter().map(|gv| gv * a).collect();
                    let doff = g.data().iter().map(|gv| gv * (1.0 - a)).collect();
                    let shape = g.shape().to_vec();
                    acc(&mut grads, *alpha, Tensor::scalar(dalpha));
                    acc(&mut grads, *on, Tensor::new(shape.clone(), don));
                    acc(&mut grads, *off, Tensor::new(shape, doff));
                }
                Op::MeanVecs { xs } => {
                    let mut dx = g.clone();
                    dx.scale(1.0 / xs.len() as f64);
                    for &x in xs {
                        acc(&mut grads, x, dx.clone());
                    }
                }
                Op::InfoNce { scores, tau, probs } => {
                    let b = self.value(*scores).rows();
                    let gv = g.scalar_value();
                    let mut ds = Tensor::zeros(vec![b, b]);
                    for r in 0..b {
                        for c in 0..b {
                            let delta = if r == c { 1.0 } else { 0.0 };
                            ds.set2(r, c, gv * (probs[r * b + c] - delta) / (b as f64 * tau));
                        }
                    }
                    acc(&mut grads, *scores, ds);
                }
                Op::SqDistToConst { x, target } => {
                    let gv = g.scalar_value();
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, t)| gv * 2.0 * (a - t))
                        .collect();
                    let shape = target.shape().to_vec();
                    acc(&mut grads, *x, Tensor::new(shape, dx));
                }
                Op::DotConst { x, weights } => {
                    let gv = g.scalar_value();
                    let mut dx = weights.clone();
                    dx.scale(gv);
                    acc(&mut grads, *x, dx);
                }
                Op::WeightedSum { terms } => {
                    let gv = g.scalar_value();
                    for &(node, coeff) in terms {
                        acc(&mut grads, node, Tensor::scalar(gv * coeff));
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(t) => t.add_scaled(&delta, 1.0),
        slot @ None => *slot = Some(delta),
    }
}

/// Max-subtracted softmax over a slice.
pub fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    fn params_with(values: &[(&str, Tensor)]) -> (ParamSet, Vec<ParamId>) {
        let mut ps = ParamSet::new();
        let ids = values
            .iter()
            .map(|(name, t)| ps.add(*name, t.clone(), true))
            .collect();
        (ps, ids)
    }

    #[test]
    fn affine_forward_and_backward_exact() {
        let (mut ps, ids) = params_with(&[
            ("w", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])),
            ("x", Tensor::vector(vec![1.0, 0.0, -1.0])),
            ("b", Tensor::vector(vec![10.0, 20.0])),
        ]);
        let mut tape = Tape::new();
        let w = tape.param(&ps, ids[0]).unwrap();
        let x = tape.param(&ps, ids[1]).unwrap();
        let b = tape.param(&ps, ids[2]).unwrap();
        let y = tape.affine(w, x, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[8.0, 18.0]);
        let loss = tape
            .dot_const(y, Tensor::vector(vec![1.0, -1.0]))
            .unwrap();
        assert_eq!(tape.value(loss).scalar_value(), -10.0);
        tape.backward(loss, &mut ps).unwrap();
        // dW = g x^T with g = [1, -1].
        assert_eq!(
            ps.get(ids[0]).grad.data(),
            &[1.0, 0.0, -1.0, -1.0, 0.0, 1.0]
        );
        // dx = W^T g.
        assert_eq!(ps.get(ids[1]).grad.data(), &[-3.0, -3.0, -3.0]);
        assert_eq!(ps.get(ids[2]).grad.data(), &[1.0, -1.0]);
    }

    #[test]
    fn param_nodes_are_memoized_and_grads_accumulate() {
        let (mut ps, ids) = params_with(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let a = tape.param(&ps, ids[0]).unwrap();
        let b = tape.param(&ps, ids[0]).unwrap();
        assert_eq!(a, b);
        let y = tape.add(a, b).unwrap();
        let loss = tape.dot_const(y, Tensor::vector(vec![3.0, 5.0])).unwrap();
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(ids[0]).grad.data(), &[6.0, 10.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = derive(3, Stream::Init, 0);
        for _ in 0..50 {
            let (ps, ids) =
                params_with(&[("x", Tensor::uniform(vec![7], -30.0, 30.0, &mut rng))]);
            let mut tape = Tape::new();
            let x = tape.param(&ps, ids[0]).unwrap();
            let y = tape.softmax(x).unwrap();
            let sum: f64 = tape.value(y).data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "softmax sum {sum}");
        }
    }

    #[test]
    fn cosine_identities() {
        let (ps, ids) = params_with(&[
            ("a", Tensor::vector(vec![2.0, 0.0, 0.0])),
            ("b", Tensor::vector(vec![0.0, 3.0, 0.0])),
            ("c", Tensor::vector(vec![5.0, 0.0, 0.0])),
        ]);
        let mut tape = Tape::new();
        let a = tape.param(&ps, ids[0]).unwrap();
        let b = tape.param(&ps, ids[1]).unwrap();
        let c = tape.param(&ps, ids[2]).unwrap();
        let orth = tape.cosine(a, b).unwrap();
        let par = tape.cosine(a, c).unwrap();
        let anti_in = tape.constant(Tensor::vector(vec![-1.0, 0.0, 0.0])).unwrap();
        let anti = tape.cosine(a, anti_in).unwrap();
        assert!(tape.value(orth).scalar_value().abs() < 1e-12);
        assert!((tape.value(par).scalar_value() - 1.0).abs() < 1e-12);
        assert!((tape.value(anti).scalar_value() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_numeric_error() {
        let (ps, ids) = params_with(&[
            ("a", Tensor::vector(vec![0.0, 0.0])),
            ("b", Tensor::vector(vec![1.0, 1.0])),
        ]);
        let mut tape = Tape::new();
        let a = tape.param(&ps, ids[0]).unwrap();
        let b = tape.param(&ps, ids[1]).unwrap();
        let err = tape.cosine(a, b).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn cosine_matrix_matches_pairwise_cosine() {
        let mut rng = derive(4, Stream::Init, 0);
        let (ps, ids) = params_with(&[
            ("r0", Tensor::uniform(vec![5], -1.0, 1.0, &mut rng)),
            ("r1", Tensor::uniform(vec![5], -1.0, 1.0, &mut rng)),
            ("c0", Tensor::uniform(vec![5], -1.0, 1.0, &mut rng)),
            ("c1", Tensor::uniform(vec![5], -1.0, 1.0, &mut rng)),
            ("c2", Tensor::uniform(vec![5], -1.0, 1.0, &mut rng)),
        ]);
        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = ids.iter().map(|&i| tape.param(&ps, i).unwrap()).collect();
        let m = tape.cosine_matrix(&nodes[..2], &nodes[2..]).unwrap();
        for (i, &r) in nodes[..2].iter().enumerate() {
            for (j, &c) in nodes[2..].iter().enumerate() {
                let pair = tape.cosine(r, c).unwrap();
                let got = tape.value(m).at2(i, j);
                assert!((got - tape.value(pair).scalar_value()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attend_single_member_returns_member() {
        let mut rng = derive(5, Stream::Init, 0);
        for heads in [1, 2, 4] {
            let (ps, ids) = params_with(&[
                ("q", Tensor::uniform(vec![8], -1.0, 1.0, &mut rng)),
                ("u", Tensor::uniform(vec![8], -1.0, 1.0, &mut rng)),
            ]);
            let mut tape = Tape::new();
            let q = tape.param(&ps, ids[0]).unwrap();
            let u = tape.param(&ps, ids[1]).unwrap();
            let out = tape.attend(q, &[u], heads).unwrap();
            assert_eq!(tape.value(out).data(), ps.get(ids[1]).value.data());
        }
    }

    #[test]
    fn attend_weights_sum_to_one_per_head() {
        let mut rng = derive(6, Stream::Init, 0);
        let (ps, ids) = params_with(&[
            ("q", Tensor::uniform(vec![8], -2.0, 2.0, &mut rng)),
            ("u0", Tensor::uniform(vec![8], -2.0, 2.0, &mut rng)),
            ("u1", Tensor::uniform(vec![8], -2.0, 2.0, &mut rng)),
            ("u2", Tensor::uniform(vec![8], -2.0, 2.0, &mut rng)),
        ]);
        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = ids.iter().map(|&i| tape.param(&ps, i).unwrap()).collect();
        let out = tape.attend(nodes[0], &nodes[1..], 4).unwrap();
        let w = tape.attention_weights(out).unwrap();
        assert_eq!(w.len(), 4 * 3);
        for h in 0..4 {
            let sum: f64 = w[h * 3..(h + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_eval_is_same_node_and_train_mask_values() {
        let (ps, ids) = params_with(&[("x", Tensor::vector(vec![1.0; 64]))]);
        let mut tape = Tape::new();
        let x = tape.param(&ps, ids[0]).unwrap();
        let mut rng = derive(7, Stream::Dropout, 0);
        let eval = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(eval, x);
        let train = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        assert_ne!(train, x);
        for v in tape.value(train).data() {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dropout_keeps_expectation() {
        let (ps, ids) = params_with(&[("x", Tensor::vector(vec![1.0; 100_000]))]);
        let mut tape = Tape::new();
        let x = tape.param(&ps, ids[0]).unwrap();
        let mut rng = derive(8, Stream::Dropout, 0);
        let y = tape.dropout(x, 0.1, true, &mut rng).unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "dropout mean {mean}");
    }

    #[test]
    fn info_nce_uniform_scores_give_ln_b() {
        for b in [2usize, 4, 8] {
            let scores = Tensor::matrix(b, b, vec![0.3; b * b]);
            let mut ps = ParamSet::new();
            let id = ps.add("s", scores, true);
            let mut tape = Tape::new();
            let s = tape.param(&ps, id).unwrap();
            let loss = tape.info_nce(s, 0.05, 0.0).unwrap();
            let expected = (b as f64).ln();
            assert!(
                (tape.value(loss).scalar_value() - expected).abs() < 1e-9,
                "b={b}"
            );
        }
    }

    #[test]
    fn info_nce_single_pair_is_zero() {
        let mut ps = ParamSet::new();
        let id = ps.add("s", Tensor::matrix(1, 1, vec![0.7]), true);
        let mut tape = Tape::new();
        let s = tape.param(&ps, id).unwrap();
        let loss = tape.info_nce(s, 0.05, 0.02).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);
    }

    #[test]
    fn info_nce_matches_hand_computation() {
        // B = 2: row losses written out directly from exp/ln.
        let (tau, margin) = (0.05, 0.02);
        let s = [[0.9, 0.1], [0.2, 0.8]];
        let mut expected = 0.0;
        for i in 0..2 {
            let z: Vec<f64> = (0..2)
                .map(|j| {
                    if i == j {
                        (s[i][j] - margin) / tau
                    } else {
                        s[i][j] / tau
                    }
                })
                .collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            expected -= (z[i].exp() / denom).ln();
        }
        expected /= 2.0;

        let mut ps = ParamSet::new();
        let id = ps.add(
            "s",
            Tensor::matrix(2, 2, vec![0.9, 0.1, 0.2, 0.8]),
            true,
        );
        let mut tape = Tape::new();
        let node = tape.param(&ps, id).unwrap();
        let loss = tape.info_nce(node, tau, margin).unwrap();
        assert!((tape.value(loss).scalar_value() - expected).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_matches_direct_computation() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let (ps, ids) = params_with(&[
            ("x", Tensor::vector(x.clone())),
            ("g", Tensor::vector(vec![1.0; 4])),
            ("b", Tensor::vector(vec![0.0; 4])),
        ]);
        let mut tape = Tape::new();
        let xn = tape.param(&ps, ids[0]).unwrap();
        let gn = tape.param(&ps, ids[1]).unwrap();
        let bn = tape.param(&ps, ids[2]).unwrap();
        let y = tape.layer_norm(xn, gn, bn).unwrap();
        let mean = 2.5;
        let var = 1.25;
        for (i, v) in tape.value(y).data().iter().enumerate() {
            let expect = (x[i] - mean) / (var + 1e-5f64).sqrt();
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sq_dist_gradient_is_exact() {
        let (mut ps, ids) = params_with(&[("x", Tensor::vector(vec![3.0, -1.0]))]);
        let mut tape = Tape::new();
        let x = tape.param(&ps, ids[0]).unwrap();
        let loss = tape
            .sq_dist_to_const(x, Tensor::vector(vec![1.0, 1.0]))
            .unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 8.0);
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(ids[0]).grad.data(), &[4.0, -4.0]);
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let (mut ps, ids) = params_with(&[("x", Tensor::vector(vec![2.0]))]);
        let mut tape = Tape::new();
        let x = tape.param(&ps, ids[0]).unwrap();
        let a = tape.dot_const(x, Tensor::vector(vec![1.0])).unwrap();
        let b = tape.sq_dist_to_const(x, Tensor::vector(vec![0.0])).unwrap();
        let total = tape.weighted_sum(&[(a, 1.0), (b, 0.1)]).unwrap();
        assert!((tape.value(total).scalar_value() - 2.4).abs() < 1e-15);
        tape.backward(total, &mut ps).unwrap();
        // d/dx (x + 0.1 x^2) = 1 + 0.2 x = 1.4.
        assert!((ps.get(ids[0]).grad.data()[0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn gate_blend_value_and_gradient() {
        let (mut ps, ids) = params_with(&[
            ("pre", Tensor::vector(vec![0.0])),
            ("on", Tensor::vector(vec![1.0, 2.0])),
            ("off", Tensor::vector(vec![3.0, 4.0])),
        ]);
        let mut tape = Tape::new();
        let pre = tape.param(&ps, ids[0]).unwrap();
        let alpha = tape.sigmoid(pre).unwrap();
        let on = tape.param(&ps, ids[1]).unwrap();
        let off = tape.param(&ps, ids[2]).unwrap();
        let y = tape.gate_blend(alpha, on, off).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
        let loss = tape.dot_const(y, Tensor::vector(vec![1.0, 1.0])).unwrap();
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(ids[1]).grad.data(), &[0.5, 0.5]);
        assert_eq!(ps.get(ids[2]).grad.data(), &[0.5, 0.5]);
        // dalpha = sum((on - off)) = -4, through sigmoid'(0) = 0.25 -> -1.
        assert!((ps.get(ids[0]).grad.data()[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn nodes_recorded_after_loss_do_not_affect_backward() {
        let (mut ps, ids) = params_with(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let x = tape.param(&ps, ids[0]).unwrap();
        let loss = tape.dot_const(x, Tensor::vector(vec![1.0, 1.0])).unwrap();
        let side = tape
            .sq_dist_to_const(x, Tensor::vector(vec![0.0, 0.0]))
            .unwrap();
        assert_eq!(tape.value(side).scalar_value(), 5.0);
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(ids[0]).grad.data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let err = tape
            .constant(Tensor::vector(vec![1.0, f64::INFINITY]))
            .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
