//! Append-only computation tape.
//!
//! Every primitive appends one node holding its output value, the handles of
//! its inputs and whatever it must remember for the backward pass. Because a
//! node can only reference nodes that already exist, the tape is always in
//! topological order and the backward sweep is a single reverse scan.

use crate::error::{AutodiffError, Result};
use crate::tensor::{split_axis, Tensor};

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

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
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddAlong {
        x: Var,
        b: Var,
        axis: usize,
    },
    MulAlong {
        x: Var,
        s: Var,
        axis: usize,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Pow {
        x: Var,
        p: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Conv3x3 {
        x: Var,
        k: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Single-threaded recorder of differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("primitive produced a consistent shape")
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value of `x` into a fresh constant leaf; gradient
    /// flow through the copy is cut.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
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

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra ------------------------------------------------

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
            return Err(mismatch());
        };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), m, k, n, &mut out);
        Ok(self.push(tensor(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Batched `[b×m×k]·[b×k×n] → [b×m×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "batch_matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        let (&[batch, m, k], &[batch2, k2, n]) = (av.shape(), bv.shape()) else {
            return Err(mismatch());
        };
        if k != k2 || batch != batch2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            matmul_into(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(
            tensor(vec![batch, m, n], out),
            Op::BatchMatMul(a, b),
            &[a, b],
        ))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = tensor(av.shape().to_vec(), data);
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds the vector `b` along `axis` of `x`, broadcasting over the rest.
    pub fn add_along(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (outer, n, inner) = split_axis(xv.shape(), axis)?;
        if bv.len() != n || bv.rank() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_along",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = xv.data().to_vec();
        for o in 0..outer {
            for (j, &bj) in bv.data().iter().enumerate() {
                let base = (o * n + j) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bj);
            }
        }
        let value = tensor(xv.shape().to_vec(), data);
        Ok(self.push(value, Op::AddAlong { x, b, axis }, &[x, b]))
    }

    /// Multiplies `x` by the vector `s` along `axis`.
    pub fn mul_along(&mut self, x: Var, s: Var, axis: usize) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (outer, n, inner) = split_axis(xv.shape(), axis)?;
        if sv.len() != n || sv.rank() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_along",
                lhs: xv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let mut data = xv.data().to_vec();
        for o in 0..outer {
            for (j, &sj) in sv.data().iter().enumerate() {
                let base = (o * n + j) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v *= sj);
            }
        }
        let value = tensor(xv.shape().to_vec(), data);
        Ok(self.push(value, Op::MulAlong { x, s, axis }, &[x, s]))
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| scale * v + shift).collect();
        let value = tensor(xv.shape().to_vec(), data);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = tensor(xv.shape().to_vec(), data);
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Pow { x, p })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Pow { x, p: 2.0 })
    }

    // ---- normalizations ------------------------------------------------

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let data = softmax_along(xv, axis, false)?;
        let value = tensor(xv.shape().to_vec(), data);
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let data = softmax_along(xv, axis, true)?;
        let value = tensor(xv.shape().to_vec(), data);
        Ok(self.push(value, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = *xv
            .shape()
            .last()
            .ok_or(AutodiffError::InvalidAxis { axis: 0, rank: 0 })?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = tensor(xv.shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // ---- reductions ----------------------------------------------------

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(xv.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv.data()[base + i];
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let value = tensor(shape, out);
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    // ---- shape manipulation --------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Output element `i` is `x.data[indices[i]]`; output takes `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(AutodiffError::IndexOutOfRange {
                index: bad,
                len: xv.len(),
            });
        }
        let data = indices.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { x, indices }, &[x]))
    }

    /// Flat gather returning a rank-1 tensor.
    pub fn select(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let n = indices.len();
        self.gather(x, indices, vec![n])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(AutodiffError::InvalidAxis { axis: p, rank });
            }
            seen[p] = true;
        }
        if perm.len() != rank {
            return Err(AutodiffError::InvalidAxis {
                axis: perm.len(),
                rank,
            });
        }
        let mut in_strides = vec![1; rank];
        for a in (0..rank.saturating_sub(1)).rev() {
            in_strides[a] = in_strides[a + 1] * shape[a + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let len: usize = shape.iter().product();
        let mut indices = Vec::with_capacity(len);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..len {
            indices.push(offset);
            for a in (0..rank).rev() {
                counter[a] += 1;
                offset += strides[a];
                if counter[a] < out_shape[a] {
                    break;
                }
                offset -= strides[a] * out_shape[a];
                counter[a] = 0;
            }
        }
        self.gather(x, indices, out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(AutodiffError::InvalidAxis { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Takes `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if len == 0 || start + len > n {
            return Err(AutodiffError::IndexOutOfRange {
                index: start + len,
                len: n,
            });
        }
        let mut indices = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            indices.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, indices, out_shape)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or(AutodiffError::InvalidShape {
                shape: Vec::new(),
                len: 0,
            })?
            .to_owned();
        let base_shape = self.value(first).shape().to_vec();
        let (outer, _, inner) = split_axis(&base_shape, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.value(v).shape()[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = tensor(shape, out);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    // ---- convolution ---------------------------------------------------

    /// 3×3 cross-correlation with zero padding 1 and stride 1:
    /// `[C_in×H×W] ⋆ [C_out×C_in×3×3] → [C_out×H×W]`.
    pub fn conv2d_3x3(&mut self, x: Var, k: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "conv2d_3x3",
            lhs: xv.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        };
        let (&[cin, h, w], &[cout, cin2, 3, 3]) = (xv.shape(), kv.shape()) else {
            return Err(mismatch());
        };
        if cin != cin2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; cout * h * w];
        let (xd, kd) = (xv.data(), kv.data());
        for o in 0..cout {
            for c in 0..cin {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let kval = kd[((o * cin + c) * 3 + dy) * 3 + dx];
                        for_each_tap(h, w, dy, dx, |oi, ii| {
                            out[o * h * w + oi] += kval * xd[c * h * w + ii];
                        });
                    }
                }
            }
        }
        let value = tensor(vec![cout, h, w], out);
        Ok(self.push(value, Op::Conv3x3 { x, k }, &[x, k]))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`. Every node that
    /// requires a gradient and reaches `loss` receives one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| tensor(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_grad_lhs(g, bv.data(), m, k, n, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_grad_rhs(av.data(), g, m, k, n, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                if let Some(ga) = self.slot(grads, *a) {
                    for s in 0..batch {
                        matmul_grad_lhs(
                            &g[s * m * n..(s + 1) * m * n],
                            &bv.data()[s * k * n..(s + 1) * k * n],
                            m,
                            k,
                            n,
                            &mut ga[s * m * k..(s + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for s in 0..batch {
                        matmul_grad_rhs(
                            &av.data()[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[s * k * n..(s + 1) * k * n],
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] / bv[j];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for j in 0..g.len() {
                        gb[j] -= g[j] * out[j] / bv[j];
                    }
                }
            }
            Op::AddAlong { x, b, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("checked");
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for o in 0..outer {
                        for (j, gbj) in gb.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            *gbj += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::MulAlong { x, s, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("checked");
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for (j, &sj) in sv.iter().enumerate() {
                            let base = (o * n + j) * inner;
                            for t in base..base + inner {
                                gx[t] += g[t] * sj;
                            }
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    for o in 0..outer {
                        for (j, gsj) in gs.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            for t in base..base + inner {
                                *gsj += g[t] * xv[t];
                            }
                        }
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g, *scale);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * out[j];
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] / xv[j];
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        let sign = if xv[j] > 0.0 {
                            1.0
                        } else if xv[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[j] += g[j] * sign;
                    }
                }
            }
            Op::Pow { x, p } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * p * xv[j].powf(p - 1.0);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("checked");
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for t in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + t;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("checked");
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for t in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + t;
                            let total: f64 = (0..n).map(|j| g[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += g[idx(j)] - out[idx(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::SumAxis { x, axis } => {
                let shape = self.value(*x).shape().to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis).expect("checked");
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for t in 0..inner {
                                gx[base + t] += g[o * inner + t];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::Gather { x, indices } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (j, &src) in indices.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis).expect("checked");
                let mut offset = 0;
                for &v in inputs {
                    let n = self.value(v).shape()[*axis];
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            axpy(&mut gv[dst..dst + n * inner], &g[src..src + n * inner], 1.0);
                        }
                    }
                    offset += n;
                }
            }
            Op::Conv3x3 { x, k } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (cin, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let cout = kv.shape()[0];
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..cout {
                        for c in 0..cin {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let kval = kv.data()[((o * cin + c) * 3 + dy) * 3 + dx];
                                    for_each_tap(h, w, dy, dx, |oi, ii| {
                                        gx[c * h * w + ii] += kval * g[o * h * w + oi];
                                    });
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = self.slot(grads, *k) {
                    for o in 0..cout {
                        for c in 0..cin {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let mut acc = 0.0;
                                    for_each_tap(h, w, dy, dx, |oi, ii| {
                                        acc += g[o * h * w + oi] * xv.data()[c * h * w + ii];
                                    });
                                    gk[((o * cin + c) * 3 + dy) * 3 + dx] += acc;
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let c = gv.len();
                let rows = g.len() / c;
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let row = r * c..(r + 1) * c;
                        let dh: Vec<f64> =
                            g[row.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh
                            .iter()
                            .zip(&xhat[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            gx[r * c + j] +=
                                rstd[r] * (dh[j] - mean_dh - xhat[r * c + j] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// dA += dC·Bᵀ
fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, ga: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            ga[i * k + t] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// dB += Aᵀ·dC
fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, gb: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &mut gb[t * n..(t + 1) * n];
            for (o, &gv) in brow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Visits every (output, input) flat pixel pair for kernel tap (dy, dx)
/// under zero padding 1.
#[inline]
fn for_each_tap(h: usize, w: usize, dy: usize, dx: usize, mut f: impl FnMut(usize, usize)) {
    let y0 = if dy == 0 { 1 } else { 0 };
    let y1 = if dy == 2 { h - 1 } else { h };
    let x0 = if dx == 0 { 1 } else { 0 };
    let x1 = if dx == 2 { w - 1 } else { w };
    for y in y0..y1 {
        let iy = y + dy - 1;
        for x in x0..x1 {
            f(y * w + x, iy * w + x + dx - 1);
        }
    }
}

fn softmax_along(x: &Tensor, axis: usize, log: bool) -> Result<Vec<f64>> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for t in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + t;
            let max = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..n).map(|j| (d[idx(j)] - max).exp()).sum();
            for j in 0..n {
                out[idx(j)] = if log {
                    d[idx(j)] - max - total.ln()
                } else {
                    (d[idx(j)] - max).exp() / total
                };
            }
        }
    }
    Ok(out)
}
