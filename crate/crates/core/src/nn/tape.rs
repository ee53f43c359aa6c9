use std::hash::{DefaultHasher, Hash, Hasher};

use super::conv::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ConcatChannels(Var, Var),
    Sum(Var),
    /// Scalar whose derivative with respect to `input` was computed alongside
    /// its value.
    Linearized {
        input: Var,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode gradient tape.
///
/// Every operation appends a node holding its output value, so nodes are in
/// topological order by construction. [`Tape::backward`] walks them once in
/// reverse. A tape is meant to live for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    /// Gradient accumulated by the last [`Tape::backward`] call, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient matches shape"))
    }

    fn shape4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(format!("{what} expects a rank-4 tensor, got {s:?}"))),
        }
    }

    /// Hash of every ReLU input sign and max-pool argmax on the tape. Two
    /// forward passes with equal signatures lie in the same piecewise-smooth
    /// region, where finite differences are valid.
    pub fn region_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Zero-padded ("same") cross-correlation plus bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape4(input, "conv2d input")?;
        let [f, kc, kh, kw] = self.shape4(kernel, "conv2d kernel")?;
        if kc != c || kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "kernel {:?} incompatible with input {:?}",
                self.shape(kernel),
                self.shape(input)
            )));
        }
        if self.shape(bias) != [f] {
            return Err(Error::shape(format!("bias {:?} for {f} filters", self.shape(bias))));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape(format!("stride {stride} not supported")));
        }
        let geometry = ConvGeometry::new([n, c, h, w], f, kh, stride);
        let out = conv::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(geometry.out_shape(), out)?;
        let rg = self.requires_grad(input) || self.requires_grad(kernel) || self.requires_grad(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            rg,
        ))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape4(input, "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("max_pool2 needs even sides, got {h}x{w}")));
        }
        let (out, argmax) = conv::max_pool2(self.value(input).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape4(input, "upsample2")?;
        let out = conv::upsample2(self.value(input).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Upsample2 { input }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.requires_grad(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.requires_grad(x);
        self.push(value, Op::Tanh(x), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `[N, Ca, H, W]` ++ `[N, Cb, H, W]` -> `[N, Ca + Cb, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.shape4(a, "concat")?;
        let [nb, cb, hb, wb] = self.shape4(b, "concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(da.len() + db.len());
        for i in 0..n {
            data.extend_from_slice(&da[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&db[i * sb..(i + 1) * sb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Records a scalar `value` computed outside the tape from `input`,
    /// together with its derivative `local_grad` (same length as `input`).
    pub fn linearized_scalar(&mut self, input: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(input).numel() {
            return Err(Error::shape(format!(
                "local gradient of length {} for input of {} values",
                local_grad.len(),
                self.value(input).numel()
            )));
        }
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::scalar(value), Op::Linearized { input, local_grad }, rg))
    }

    /// Back-propagates from a scalar `loss`, overwriting the gradients of any
    /// previous call. Gradients from multiple uses of a value add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let out = conv::conv2d_backward(
                    geometry,
                    val(*input),
                    val(*kernel),
                    g,
                    rg(*input),
                    rg(*kernel),
                    rg(*bias),
                );
                if let Some(d) = out.input {
                    accumulate(grads, *input, &d);
                }
                if let Some(d) = out.kernel {
                    accumulate(grads, *kernel, &d);
                }
                if let Some(d) = out.bias {
                    accumulate(grads, *bias, &d);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let acc = slot(grads, *input, val(*input).len());
                for (&idx, &d) in argmax.iter().zip(g) {
                    acc[idx] += d;
                }
            }
            Op::Upsample2 { input } => {
                let [n, c, h, w] = self.shape4(*input, "upsample2").expect("recorded rank 4");
                let d = conv::upsample2_backward(g, n * c, h, w);
                accumulate(grads, *input, &d);
            }
            Op::Relu(x) => {
                let d = zip_map(g, val(*x), |g, x| if x > 0.0 { g } else { 0.0 });
                accumulate(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(g, node.value.data(), |g, y| g * y * (1.0 - y));
                accumulate(grads, *x, &d);
            }
            Op::Tanh(x) => {
                let d = zip_map(g, node.value.data(), |g, y| g * (1.0 - y * y));
                accumulate(grads, *x, &d);
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
                if rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = zip_map(g, val(*b), |g, y| g * y);
                    accumulate(grads, *a, &d);
                }
                if rg(*b) {
                    let d = zip_map(g, val(*a), |g, x| g * x);
                    accumulate(grads, *b, &d);
                }
            }
            Op::ConcatChannels(a, b) => {
                let [n, ca, h, w] = self.shape4(*a, "concat").expect("recorded rank 4");
                let cb = self.shape(*b)[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                if rg(*a) {
                    let d: Vec<f64> = (0..n)
                        .flat_map(|i| g[i * (sa + sb)..i * (sa + sb) + sa].iter().copied())
                        .collect();
                    accumulate(grads, *a, &d);
                }
                if rg(*b) {
                    let d: Vec<f64> = (0..n)
                        .flat_map(|i| g[i * (sa + sb) + sa..(i + 1) * (sa + sb)].iter().copied())
                        .collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Sum(x) => {
                let acc = slot(grads, *x, val(*x).len());
                acc.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Linearized { input, local_grad } => {
                let acc = slot(grads, *input, local_grad.len());
                for (a, &l) in acc.iter_mut().zip(local_grad) {
                    *a += g[0] * l;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        empty => *empty = Some(d.to_vec()),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
