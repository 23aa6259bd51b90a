use super::conv::{self, ConvGeometry};
use super::{axis_extents, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    /// Batch statistics normalization over `[B, C, ...]`, channel axis 1.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Per-channel affine with fixed statistics (batch norm in eval mode).
    NormalizeFixed {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the convention for running estimates.
    pub var: Vec<f64>,
}

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Define-by-run gradient tape. Single-threaded; create one per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    ///
    /// `None` for nodes that do not require gradients or before backward ran;
    /// zeros for nodes the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.backward_done || !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape.clone();
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
        Some(Tensor { shape, data })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.push(value, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |p, q| p + q))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |p, q| p - q))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |p, q| p * q))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |v| v + c)
    }

    /// `x[b, ...] + bias[...]` for every index `b` of the leading axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || &xs[1..] != self.shape(bias) {
            return Err(Error::shape(format!(
                "bias {:?} does not match trailing dims of {:?}",
                self.shape(bias),
                xs
            )));
        }
        let b = &self.value(bias).data;
        let mut value = self.value(x).clone();
        for row in value.data.chunks_mut(b.len()) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let data = transpose_raw(&self.value(a).data, m, n);
        let value = Tensor {
            shape: vec![n, m],
            data,
        };
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = &self.value(x).data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat of no tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor { shape, data };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        if axis >= src_shape.len() || len == 0 || start + len > src_shape[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) of axis {axis} in {src_shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_extents(&src_shape, axis);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        let value = Tensor { shape, data };
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Cross-correlation (no kernel flip) with zero padding; see [`ConvGeometry`].
    pub fn conv(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let data = conv::forward(&geom, &self.value(input).data, &self.value(kernel).data);
        let value = Tensor {
            shape: geom.output_shape(),
            data,
        };
        Ok(self.push(value, Op::Conv { input, kernel, geom }, &[input, kernel]))
    }

    fn channel_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape(format!("batch norm needs [B, C, ...], got {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "affine params {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((s[0], c, s[2..].iter().product()))
    }

    /// Training-mode batch normalization over `[B, C, ...]` using batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (b, c, inner) = self.channel_layout(x, gamma, beta)?;
        if b < 2 {
            return Err(Error::shape(format!(
                "training-mode batch norm needs batch size >= 2, got {b}"
            )));
        }
        let n = (b * inner) as f64;
        let src = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let row = &src[(bi * c + ci) * inner..][..inner];
                mean[ci] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let row = &src[(bi * c + ci) * inner..][..inner];
                var[ci] += row.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                for k in off..off + inner {
                    xhat[k] = (src[k] - mean[ci]) * inv_std[ci];
                    data[k] = g[ci] * xhat[k] + bt[ci];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var: var.iter().map(|v| v * n / (n - 1.0)).collect(),
        };
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    /// Eval-mode batch normalization with fixed per-channel statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, inner) = self.channel_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("running statistics do not match channel count"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let src = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                for k in off..off + inner {
                    data[k] = g[ci] * (src[k] - mean[ci]) * inv_std[ci] + bt[ci];
                }
            }
        }
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        let op = Op::NormalizeFixed {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            inv_std,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    /// Row-wise normalization of an `[n, d]` matrix with affine `gamma`, `beta` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape(format!("layer norm over {s:?}")));
        }
        let (rows, d) = (s[0], s[1]);
        let src = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; src.len()];
        let mut data = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..][..d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            inv_std[r] = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let h = (row[j] - mean) * inv_std[r];
                xhat[r * d + j] = h;
                data[r * d + j] = g[j] * h + bt[j];
            }
        }
        let value = Tensor { shape: s, data };
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    /// `[B, C, ...] -> [B, C]` mean over all trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape(format!("global pool needs [B, C, ...], got {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let data = self
            .value(x)
            .data
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let value = Tensor {
            shape: vec![s[0], s[1]],
            data,
        };
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data.iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy of probabilities `p` against `targets`.
    ///
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the gradient is taken at
    /// the clamped point and passed straight through the clamp.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let probs = &self.value(p).data;
        if probs.len() != targets.len() {
            return Err(Error::shape(format!(
                "bce: {} probabilities vs {} labels",
                probs.len(),
                targets.len()
            )));
        }
        let n = probs.len() as f64;
        let loss = probs
            .iter()
            .zip(targets)
            .map(|(&q, &y)| {
                let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        let op = Op::Bce {
            p,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    /// Populates gradients of the scalar `loss` for every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let mut acc = Accumulator {
            nodes,
            grads: &mut self.grads,
        };
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = acc.grads[i].take() else {
                continue;
            };
            acc.propagate(node, &g);
            acc.grads[i] = Some(g);
        }
        Ok(())
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> Accumulator<'a> {
    fn value(&self, v: Var) -> &'a [f64] {
        &self.nodes[v.0].value.data
    }

    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add_to(&mut self, v: Var, g: impl Iterator<Item = f64>) {
        if let Some(s) = self.slot(v) {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    fn propagate(&mut self, node: &Node, g: &[f64]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.add_to(a, g.iter().copied());
                self.add_to(b, g.iter().copied());
            }
            &Op::Sub(a, b) => {
                self.add_to(a, g.iter().copied());
                self.add_to(b, g.iter().map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                self.add_to(a, g.iter().zip(vb).map(|(g, y)| g * y));
                self.add_to(b, g.iter().zip(va).map(|(g, x)| g * x));
            }
            &Op::Scale(a, f) => self.add_to(a, g.iter().map(|v| v * f)),
            &Op::AddScalar(a) | &Op::Reshape(a) => self.add_to(a, g.iter().copied()),
            &Op::AddBias(x, bias) => {
                self.add_to(x, g.iter().copied());
                if let Some(s) = self.slot(bias) {
                    let width = s.len();
                    for row in g.chunks(width) {
                        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(self.value(b), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.add_to(a, da.into_iter());
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(self.value(a), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.add_to(b, db.into_iter());
                }
            }
            &Op::Transpose(a) => {
                let (n, m) = (out.shape[0], out.shape[1]);
                self.add_to(a, transpose_raw(g, n, m).into_iter());
            }
            &Op::Relu(a) => {
                let x = self.value(a);
                self.add_to(a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }));
            }
            &Op::Sigmoid(a) => {
                self.add_to(a, g.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)));
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(&out.shape, axis);
                let y = &out.data;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.add_to(x, dx.into_iter());
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_extents(&out.shape, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &p in parts {
                        let chunk = self.nodes[p.0].value.shape[*axis] * inner;
                        if let Some(s) = self.slot(p) {
                            let dst = &mut s[o * chunk..(o + 1) * chunk];
                            dst.iter_mut()
                                .zip(&g[offset..offset + chunk])
                                .for_each(|(a, b)| *a += b);
                        }
                        offset += chunk;
                    }
                }
            }
            &Op::Slice { x, axis, start } => {
                let full = self.nodes[x.0].value.shape[axis];
                let (outer, len, inner) = axis_extents(&out.shape, axis);
                if let Some(s) = self.slot(x) {
                    for o in 0..outer {
                        let from = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        s[from..from + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Conv {
                input,
                kernel,
                geom,
            } => {
                let (input, kernel) = (*input, *kernel);
                let want_in = self.nodes[input.0].requires_grad;
                let want_k = self.nodes[kernel.0].requires_grad;
                let mut gi = want_in.then(|| vec![0.0; self.nodes[input.0].value.numel()]);
                let mut gk = want_k.then(|| vec![0.0; self.nodes[kernel.0].value.numel()]);
                conv::backward(
                    geom,
                    self.value(input),
                    self.value(kernel),
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    self.add_to(input, gi.into_iter());
                }
                if let Some(gk) = gk {
                    self.add_to(kernel, gk.into_iter());
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = &out.shape;
                let (b, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let n = (b * inner) as f64;
                let gam = self.value(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * inner;
                        for k in off..off + inner {
                            dgamma[ci] += g[k] * xhat[k];
                            dbeta[ci] += g[k];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    // dx = inv_std/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)), dxhat = g*gamma
                    let mut dx = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * inner;
                            let (sum_d, sum_dx) = (dbeta[ci] * gam[ci], dgamma[ci] * gam[ci]);
                            for k in off..off + inner {
                                let d = g[k] * gam[ci];
                                dx[k] = inv_std[ci] / n * (n * d - sum_d - xhat[k] * sum_dx);
                            }
                        }
                    }
                    self.add_to(*x, dx.into_iter());
                }
                self.add_to(*gamma, dgamma.into_iter());
                self.add_to(*beta, dbeta.into_iter());
            }
            Op::NormalizeFixed {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = &out.shape;
                let (b, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let gam = self.value(*gamma);
                let xs = self.value(*x);
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * inner;
                        for k in off..off + inner {
                            dx[k] = g[k] * gam[ci] * inv_std[ci];
                            dgamma[ci] += g[k] * (xs[k] - mean[ci]) * inv_std[ci];
                            dbeta[ci] += g[k];
                        }
                    }
                }
                self.add_to(*x, dx.into_iter());
                self.add_to(*gamma, dgamma.into_iter());
                self.add_to(*beta, dbeta.into_iter());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, d) = (out.shape[0], out.shape[1]);
                let gam = self.value(*gamma);
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for j in 0..d {
                        let k = r * d + j;
                        let dh = g[k] * gam[j];
                        sum_d += dh;
                        sum_dx += dh * xhat[k];
                        dgamma[j] += g[k] * xhat[k];
                        dbeta[j] += g[k];
                    }
                    let nd = d as f64;
                    for j in 0..d {
                        let k = r * d + j;
                        let dh = g[k] * gam[j];
                        dx[k] = inv_std[r] / nd * (nd * dh - sum_d - xhat[k] * sum_dx);
                    }
                }
                self.add_to(*x, dx.into_iter());
                self.add_to(*gamma, dgamma.into_iter());
                self.add_to(*beta, dbeta.into_iter());
            }
            &Op::GlobalAvgPool(x) => {
                let inner = self.nodes[x.0].value.numel() / g.len();
                let scale = 1.0 / inner as f64;
                self.add_to(
                    x,
                    g.iter().flat_map(|&v| std::iter::repeat_n(v * scale, inner)),
                );
            }
            &Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.add_to(x, std::iter::repeat_n(g[0], n));
            }
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                self.add_to(x, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::Bce { p, targets } => {
                let n = targets.len() as f64;
                let probs = self.value(*p);
                let grads = probs.iter().zip(targets).map(|(&q, &y)| {
                    let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    -g[0] / n * (y / q - (1.0 - y) / (1.0 - q))
                });
                self.add_to(*p, grads);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}
