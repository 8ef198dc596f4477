//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for every forward pass. Each call appends a node
//! holding its output value and the inputs it needs for its backward rule, so
//! node order is already a topological order and `backward` is one reverse
//! sweep. Leaves created from tensors with `requires_grad` receive their
//! gradient in the tensor's `grad` buffer; repeated `backward` calls add to it.

use super::tensor::{
    self, last_dim, layer_norm_rows, matmul_a_bt, matmul_at_b, matmul_dims, matmul_raw,
    ConvGeometry, Pointwise, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Pointwise(Var, Pointwise),
    Ln(Var),
    Abs(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Powf(Var, f64),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geo: ConvGeometry,
        cols: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of every matmul and convolution recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Inserts a tensor; it is differentiable iff `requires_grad` is set on it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.macs += (m * k * n) as u64;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(&shape, out).expect("same shape"), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a 1-D `bias` broadcast along every axis of `x` except `axis`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.value(bias).numel() != shape[axis] {
            return Err(Error::dim(format!(
                "bias of {:?} along axis {axis} of {shape:?}",
                self.shape(bias)
            )));
        }
        let (extent, inner) = (shape[axis], shape[axis + 1..].iter().product::<usize>());
        let b = self.data(bias);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % extent])
            .collect();
        let ng = self.ng(&[x, bias]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias { x, bias, axis }, ng))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&shape, out).expect("same shape"), op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn pointwise(&mut self, op: Pointwise, x: Var) -> Var {
        self.map(x, Op::Pointwise(x, op), |v| op.apply(v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.pointwise(Pointwise::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.pointwise(Pointwise::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.pointwise(Pointwise::Relu, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, Op::Ln(x), f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), f64::abs)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// `x^p` for `x > 0`.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.map(x, Op::Powf(x, p), |v| v.powf(p))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let y = tensor::softmax_lastdim(self.value(x));
        let ng = self.ng(&[x]);
        self.push(y, Op::Softmax(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::dim(format!(
                "layer_norm affine params must have {n} values"
            )));
        }
        let (normed, rstd) = layer_norm_rows(self.data(x), n);
        let (g, b) = (self.data(gain), self.data(bias));
        let out = normed
            .chunks(n)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((v, g), b)| v * g + b))
            .collect();
        let ng = self.ng(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            rstd,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, ng))
    }

    /// `x[C,H,W] * kernel[O,C,P,P]` with zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(kernel), stride, pad)?;
        let o = self.shape(kernel)[0];
        let cols = geo.im2col(self.data(x));
        let out = matmul_a_bt(
            self.data(kernel),
            &cols,
            o,
            geo.patch_len(),
            geo.positions(),
        );
        self.macs += (o * geo.patch_len() * geo.positions()) as u64;
        let ng = self.ng(&[x, kernel]);
        let value = Tensor::new(&[o, geo.out_height, geo.out_width], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                geo,
                cols,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!(
                "transpose expects a matrix, got {shape:?}"
            )));
        }
        let (r, c) = (shape[0], shape[1]);
        let d = self.data(x);
        let out = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), ng))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow [{start},{}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(&new_shape, out)?,
            Op::Narrow { x, axis, start },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat of {base:?} and {s:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.ng(parts);
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, ng))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("gather index {bad} out of {n}")));
        }
        let d = self.data(x);
        let out = index.iter().map(|&i| d[i]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index }, ng))
    }

    /// Propagates `∂loss/∂·` to every differentiable leaf, adding into its `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let t = &mut self.nodes[i].value;
                match &mut t.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    None => t.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(contrib),
            }
        };
        let elementwise = |x: Var, f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..self.value(x).numel()).map(|j| g[j] * f(j)).collect()
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k, n) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*b)[1]);
                if self.nodes[a.0].needs_grad {
                    send(*a, matmul_a_bt(g, self.data(*b), m, n, k));
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, matmul_at_b(self.data(*a), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                send(*a, g.iter().zip(db).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::AddBias { x, bias, axis } => {
                let shape = self.shape(*x);
                let (extent, inner) = (shape[*axis], shape[axis + 1..].iter().product::<usize>());
                let mut db = vec![0.0; extent];
                for (j, gv) in g.iter().enumerate() {
                    db[(j / inner) % extent] += gv;
                }
                send(*x, g.to_vec());
                send(*bias, db);
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => send(*x, g.to_vec()),
            Op::Pointwise(x, op) => send(*x, elementwise(*x, &|j| op.derivative(y[j]))),
            Op::Ln(x) => {
                let d = self.data(*x);
                send(*x, elementwise(*x, &|j| 1.0 / d[j]));
            }
            Op::Abs(x) => {
                let d = self.data(*x);
                send(*x, elementwise(*x, &|j| sign(d[j])));
            }
            Op::Clamp { x, lo, hi } => {
                let d = self.data(*x);
                send(
                    *x,
                    elementwise(*x, &|j| if d[j] < *lo || d[j] > *hi { 0.0 } else { 1.0 }),
                );
            }
            Op::Powf(x, p) => {
                let d = self.data(*x);
                send(*x, elementwise(*x, &|j| p * d[j].powf(p - 1.0)));
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Softmax(x) => {
                let n = last_dim(node.value.shape());
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let n = last_dim(node.value.shape());
                let gw = self.data(*gain);
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; y.len()];
                for (r, ((xh, gr), dr)) in normed
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(dx.chunks_mut(n))
                    .enumerate()
                {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..n {
                        dgain[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gw[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= n as f64;
                    mean_dxh_xh /= n as f64;
                    for j in 0..n {
                        let dxh = gr[j] * gw[j];
                        dr[j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                send(*x, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::Conv2d {
                x,
                kernel,
                geo,
                cols,
            } => {
                let o = self.shape(*kernel)[0];
                let (plen, pos) = (geo.patch_len(), geo.positions());
                if self.nodes[kernel.0].needs_grad {
                    // g[o, pos] · cols[pos, plen]
                    send(*kernel, matmul_raw(g, cols, o, pos, plen));
                }
                if self.nodes[x.0].needs_grad {
                    let dcols = matmul_at_b(g, self.data(*kernel), o, pos, plen);
                    send(*x, geo.col2im(&dcols));
                }
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                send(*x, (0..r * c).map(|j| g[(j % r) * c + j / r]).collect());
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let len = node.value.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                send(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut grads: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(self.value(*p).numel()))
                    .collect();
                let mut cursor = 0;
                for _ in 0..outer {
                    for (k, p) in parts.iter().enumerate() {
                        let chunk = self.shape(*p)[*axis] * inner;
                        grads[k].extend_from_slice(&g[cursor..cursor + chunk]);
                        cursor += chunk;
                    }
                }
                for (p, d) in parts.iter().zip(grads) {
                    send(*p, d);
                }
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (gv, &j) in g.iter().zip(index) {
                    dx[j] += gv;
                }
                send(*x, dx);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
