//! Wengert tape: eager forward evaluation, reverse-mode backward pass.

use crate::tensor::Tensor;
use crate::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize, F),
    MulScalar(usize, F),
    Matmul(usize, usize),
    Transpose(usize),
    Conv2d { input: usize, weight: usize, stride: usize, pad: usize },
    Upsample2x(usize),
    AddBiasChannel { input: usize, bias: usize },
    ConcatChannels(Vec<usize>),
    ConcatRows(Vec<usize>),
    SelectRows { input: usize, indices: Vec<usize> },
    BroadcastRows(usize),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Softplus(usize),
    Abs(usize),
    SoftmaxRows(usize),
    MaxLastDim { input: usize, argmax: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Computation tape. Operations evaluate eagerly; `backward` walks the tape
/// in reverse. One graph per forward pass; drop it to free intermediates.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Adjoints produced by [`Graph::backward`], indexed by `Var`.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient with respect to `v`, if it was reached by backprop.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: F) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Value copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn val(&self, id: usize) -> &Tensor<F> {
        &self.nodes[id].value
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a.0).zip_map(self.val(b.0), |x, y| x + y);
        let r = self.req(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a.0).zip_map(self.val(b.0), |x, y| x - y);
        let r = self.req(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a.0).zip_map(self.val(b.0), |x, y| x * y);
        let r = self.req(&[a.0, b.0]);
        self.push(v, Op::Mul(a.0, b.0), r)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a.0).zip_map(self.val(b.0), |x, y| x / y);
        let r = self.req(&[a.0, b.0]);
        self.push(v, Op::Div(a.0, b.0), r)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(|x| -x);
        let r = self.req(&[a.0]);
        self.push(v, Op::Neg(a.0), r)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let v = self.val(a.0).map(|x| x + c);
        let r = self.req(&[a.0]);
        self.push(v, Op::AddScalar(a.0, c), r)
    }

    pub fn mul_scalar(&mut self, a: Var, c: F) -> Var {
        let v = self.val(a.0).map(|x| x * c);
        let r = self.req(&[a.0]);
        self.push(v, Op::MulScalar(a.0, c), r)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(|x| if x > F::zero() { x } else { F::zero() });
        let r = self.req(&[a.0]);
        self.push(v, Op::Relu(a.0), r)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(sigmoid_stable);
        let r = self.req(&[a.0]);
        self.push(v, Op::Sigmoid(a.0), r)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(|x| x.tanh());
        let r = self.req(&[a.0]);
        self.push(v, Op::Tanh(a.0), r)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(|x| x.exp());
        let r = self.req(&[a.0]);
        self.push(v, Op::Exp(a.0), r)
    }

    /// Natural log; caller guarantees strictly positive inputs.
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(|x| x.ln());
        let r = self.req(&[a.0]);
        self.push(v, Op::Ln(a.0), r)
    }

    /// Square root; caller guarantees strictly positive inputs.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(|x| x.sqrt());
        let r = self.req(&[a.0]);
        self.push(v, Op::Sqrt(a.0), r)
    }

    /// `ln(1 + e^x)`, evaluated in the overflow-safe form.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(softplus_stable);
        let r = self.req(&[a.0]);
        self.push(v, Op::Softplus(a.0), r)
    }

    /// |x|; subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.val(a.0).map(|x| x.abs());
        let r = self.req(&[a.0]);
        self.push(v, Op::Abs(a.0), r)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_kernel(self.val(a.0), self.val(b.0));
        let r = self.req(&[a.0, b.0]);
        self.push(v, Op::Matmul(a.0, b.0), r)
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Var {
        let v = transpose_kernel(self.val(a.0));
        let r = self.req(&[a.0]);
        self.push(v, Op::Transpose(a.0), r)
    }

    // ---- convolution and spatial ops ---------------------------------------

    /// 2-D convolution: input `[Cin,H,W]`, weight `[Cout,Cin,K,K]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Var {
        let v = conv2d_forward(self.val(input.0), self.val(weight.0), stride, pad);
        let r = self.req(&[input.0, weight.0]);
        self.push(v, Op::Conv2d { input: input.0, weight: weight.0, stride, pad }, r)
    }

    /// Nearest-neighbor x2 upsample of `[C,H,W]`.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let v = upsample2x_kernel(self.val(a.0));
        let r = self.req(&[a.0]);
        self.push(v, Op::Upsample2x(a.0), r)
    }

    /// Adds a per-channel bias `[C]` to `[C,H,W]`.
    pub fn add_bias_channel(&mut self, input: Var, bias: Var) -> Var {
        let x = self.val(input.0);
        let b = self.val(bias.0);
        let (c, h, w) = dims3(x.shape());
        assert_eq!(b.shape(), &[c], "bias must be [C]");
        let mut out = x.clone();
        let plane = h * w;
        for ch in 0..c {
            let bv = b.data()[ch];
            for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
                *v += bv;
            }
        }
        let r = self.req(&[input.0, bias.0]);
        self.push(out, Op::AddBiasChannel { input: input.0, bias: bias.0 }, r)
    }

    /// Concatenates `[Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (_, h, w) = dims3(self.val(parts[0].0).shape());
        let mut data = Vec::new();
        let mut c_total = 0usize;
        for p in parts {
            let t = self.val(p.0);
            let (c, th, tw) = dims3(t.shape());
            assert_eq!((th, tw), (h, w), "concat_channels spatial mismatch");
            c_total += c;
            data.extend_from_slice(t.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let r = self.req(&ids);
        self.push(Tensor::new(&[c_total, h, w], data), Op::ConcatChannels(ids), r)
    }

    /// Concatenates 2-D `[mi,n]` tensors along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = dims2(self.val(parts[0].0).shape()).1;
        let mut data = Vec::new();
        let mut m_total = 0usize;
        for p in parts {
            let t = self.val(p.0);
            let (m, tn) = dims2(t.shape());
            assert_eq!(tn, n, "concat_rows width mismatch");
            m_total += m;
            data.extend_from_slice(t.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let r = self.req(&ids);
        self.push(Tensor::new(&[m_total, n], data), Op::ConcatRows(ids), r)
    }

    /// Gathers rows of a 2-D tensor: `[m,n]` with k indices -> `[k,n]`.
    pub fn select_rows(&mut self, input: Var, indices: &[usize]) -> Var {
        let t = self.val(input.0);
        let (m, n) = dims2(t.shape());
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            assert!(i < m, "row index {} out of range {}", i, m);
            data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let r = self.req(&[input.0]);
        self.push(
            Tensor::new(&[indices.len(), n], data),
            Op::SelectRows { input: input.0, indices: indices.to_vec() },
            r,
        )
    }

    /// Repeats a `[1,n]` row to `[rows,n]`.
    pub fn broadcast_rows(&mut self, input: Var, rows: usize) -> Var {
        let t = self.val(input.0);
        let (m, n) = dims2(t.shape());
        assert_eq!(m, 1, "broadcast_rows expects [1,n]");
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let r = self.req(&[input.0]);
        self.push(Tensor::new(&[rows, n], data), Op::BroadcastRows(input.0), r)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Var {
        let v = self.val(input.0).reshape(shape);
        let r = self.req(&[input.0]);
        self.push(v, Op::Reshape(input.0), r)
    }

    // ---- reductions and row ops --------------------------------------------

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, input: Var) -> Var {
        let t = self.val(input.0);
        let (m, n) = dims2(t.shape());
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut denom = F::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                data[i * n + j] = data[i * n + j] / denom;
            }
        }
        let r = self.req(&[input.0]);
        self.push(Tensor::new(&[m, n], data), Op::SoftmaxRows(input.0), r)
    }

    /// Max over the last axis; `[.., C] -> [..]`. Ties resolve to the lowest index.
    pub fn max_lastdim(&mut self, input: Var) -> Var {
        let t = self.val(input.0);
        let shape = t.shape().to_vec();
        let c = *shape.last().expect("max_lastdim needs at least 1 axis");
        let rows = t.len() / c;
        let mut vals = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &t.data()[i * c..(i + 1) * c];
            let mut best = 0usize;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            vals.push(row[best]);
            argmax.push(best);
        }
        let out_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let r = self.req(&[input.0]);
        self.push(Tensor::new(&out_shape, vals), Op::MaxLastDim { input: input.0, argmax }, r)
    }

    /// Sum of all elements -> `[1]`.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let s = self.val(input.0).data().iter().fold(F::zero(), |a, &b| a + b);
        let r = self.req(&[input.0]);
        self.push(Tensor::scalar(s), Op::SumAll(input.0), r)
    }

    /// Mean of all elements -> `[1]`.
    pub fn mean_all(&mut self, input: Var) -> Var {
        let t = self.val(input.0);
        let n = F::from_f64_lossy(t.len() as f64);
        let s = t.data().iter().fold(F::zero(), |a, &b| a + b) / n;
        let r = self.req(&[input.0]);
        self.push(Tensor::scalar(s), Op::MeanAll(input.0), r)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a `[1]`-shaped loss node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.nodes[loss.0].value.shape(), &[1], "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Tensor<F>>], id: usize, delta: Tensor<F>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.val(*b), |x, y| x * y);
                let gb = g.zip_map(self.val(*a), |x, y| x * y);
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let bv = self.val(*b);
                let ga = g.zip_map(bv, |x, y| x / y);
                let out = &self.nodes[id].value;
                // d(a/b)/db = -out/b
                let mut gb = g.zip_map(out, |x, o| x * o);
                gb = gb.zip_map(bv, |x, y| -(x / y));
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::Neg(a) => self.add_grad(grads, *a, g.map(|x| -x)),
            Op::AddScalar(a, _) => self.add_grad(grads, *a, g.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.add_grad(grads, *a, g.map(|x| x * c));
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.val(*a), |x, v| if v > F::zero() { x } else { F::zero() });
                self.add_grad(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[id].value;
                let ga = g.zip_map(out, |x, s| x * s * (F::one() - s));
                self.add_grad(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let out = &self.nodes[id].value;
                let ga = g.zip_map(out, |x, t| x * (F::one() - t * t));
                self.add_grad(grads, *a, ga);
            }
            Op::Exp(a) => {
                let out = &self.nodes[id].value;
                let ga = g.zip_map(out, |x, e| x * e);
                self.add_grad(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = g.zip_map(self.val(*a), |x, v| x / v);
                self.add_grad(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let out = &self.nodes[id].value;
                let half = F::from_f64_lossy(0.5);
                let ga = g.zip_map(out, |x, s| x * half / s);
                self.add_grad(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.val(*a), |x, v| x * sigmoid_stable(v));
                self.add_grad(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.val(*a), |x, v| {
                    if v > F::zero() {
                        x
                    } else if v < F::zero() {
                        -x
                    } else {
                        F::zero()
                    }
                });
                self.add_grad(grads, *a, ga);
            }
            Op::Matmul(a, b) => {
                let av = self.val(*a);
                let bv = self.val(*b);
                // dA = g . B^T ; dB = A^T . g
                let bt = transpose_kernel(bv);
                let at = transpose_kernel(av);
                self.add_grad(grads, *a, matmul_kernel(g, &bt));
                self.add_grad(grads, *b, matmul_kernel(&at, g));
            }
            Op::Transpose(a) => self.add_grad(grads, *a, transpose_kernel(g)),
            Op::Conv2d { input, weight, stride, pad } => {
                let (gi, gw) =
                    conv2d_backward(self.val(*input), self.val(*weight), g, *stride, *pad);
                self.add_grad(grads, *input, gi);
                self.add_grad(grads, *weight, gw);
            }
            Op::Upsample2x(a) => {
                let (c, h2, w2) = dims3(g.shape());
                let (h, w) = (h2 / 2, w2 / 2);
                let mut gi = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            let gv = g.data()[(ch * h2 + y) * w2 + x];
                            gi.data_mut()[(ch * h + y / 2) * w + x / 2] += gv;
                        }
                    }
                }
                self.add_grad(grads, *a, gi);
            }
            Op::AddBiasChannel { input, bias } => {
                self.add_grad(grads, *input, g.clone());
                let (c, h, w) = dims3(g.shape());
                let plane = h * w;
                let mut gb = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let s = g.data()[ch * plane..(ch + 1) * plane]
                        .iter()
                        .fold(F::zero(), |acc, &x| acc + x);
                    gb.data_mut()[ch] = s;
                }
                self.add_grad(grads, *bias, gb);
            }
            Op::ConcatChannels(ids) => {
                let (_, h, w) = dims3(g.shape());
                let plane = h * w;
                let mut offset = 0usize;
                for &pid in ids {
                    let (c, _, _) = dims3(self.val(pid).shape());
                    let part = Tensor::new(
                        &[c, h, w],
                        g.data()[offset..offset + c * plane].to_vec(),
                    );
                    self.add_grad(grads, pid, part);
                    offset += c * plane;
                }
            }
            Op::ConcatRows(ids) => {
                let (_, n) = dims2(g.shape());
                let mut offset = 0usize;
                for &pid in ids {
                    let (m, _) = dims2(self.val(pid).shape());
                    let part = Tensor::new(&[m, n], g.data()[offset..offset + m * n].to_vec());
                    self.add_grad(grads, pid, part);
                    offset += m * n;
                }
            }
            Op::SelectRows { input, indices } => {
                let (m, n) = dims2(self.val(*input).shape());
                let mut gi = Tensor::zeros(&[m, n]);
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        gi.data_mut()[i * n + j] += g.data()[k * n + j];
                    }
                }
                self.add_grad(grads, *input, gi);
            }
            Op::BroadcastRows(a) => {
                let (rows, n) = dims2(g.shape());
                let mut gi = Tensor::zeros(&[1, n]);
                for i in 0..rows {
                    for j in 0..n {
                        gi.data_mut()[j] += g.data()[i * n + j];
                    }
                }
                self.add_grad(grads, *a, gi);
            }
            Op::Reshape(a) => {
                let gi = g.reshape(self.val(*a).shape());
                self.add_grad(grads, *a, gi);
            }
            Op::SoftmaxRows(a) => {
                let out = &self.nodes[id].value;
                let (m, n) = dims2(out.shape());
                let mut gi = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let s = &out.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot =
                        s.iter().zip(gr).fold(F::zero(), |acc, (&sv, &gv)| acc + sv * gv);
                    for j in 0..n {
                        gi.data_mut()[i * n + j] = s[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(grads, *a, gi);
            }
            Op::MaxLastDim { input, argmax } => {
                let t = self.val(*input);
                let c = *t.shape().last().unwrap();
                let mut gi = Tensor::zeros(t.shape());
                for (row, &am) in argmax.iter().enumerate() {
                    gi.data_mut()[row * c + am] = g.data()[row];
                }
                self.add_grad(grads, *input, gi);
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.add_grad(grads, *a, Tensor::full(self.val(*a).shape(), gv));
            }
            Op::MeanAll(a) => {
                let n = F::from_f64_lossy(self.val(*a).len() as f64);
                let gv = g.item() / n;
                self.add_grad(grads, *a, Tensor::full(self.val(*a).shape(), gv));
            }
        }
    }
}

// ---- scalar helpers ---------------------------------------------------------

fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus_stable<F: Scalar>(x: F) -> F {
    // max(x,0) + ln(1 + e^{-|x|})
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

// ---- kernels ------------------------------------------------------------------

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected 2-D, got {:?}", shape);
    (shape[0], shape[1])
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected 3-D, got {:?}", shape);
    (shape[0], shape[1], shape[2])
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected 4-D, got {:?}", shape);
    (shape[0], shape[1], shape[2], shape[3])
}

fn matmul_kernel<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = dims2(a.shape());
    let (k2, n) = dims2(b.shape());
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    let mut out = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = ad[i * k + l];
            if av == F::zero() {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

fn transpose_kernel<F: Scalar>(a: &Tensor<F>) -> Tensor<F> {
    let (m, n) = dims2(a.shape());
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn conv2d_forward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let (cin, h, w) = dims3(input.shape());
    let (cout, cin_w, kh, kw) = dims4(weight.shape());
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut out = vec![F::zero(); cout * oh * ow];
    let id = input.data();
    let wd = weight.data();
    for oc in 0..cout {
        for ic in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[((oc * cin + ic) * kh + ky) * kw + kx];
                    if wv == F::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &id[(ic * h + iy as usize) * w..(ic * h + iy as usize + 1) * w];
                        let out_row = &mut out[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out_row[ox] += wv * in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out)
}

fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    gout: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> (Tensor<F>, Tensor<F>) {
    let (cin, h, w) = dims3(input.shape());
    let (cout, _, kh, kw) = dims4(weight.shape());
    let (_, oh, ow) = dims3(gout.shape());
    let mut gi = vec![F::zero(); cin * h * w];
    let mut gw = vec![F::zero(); weight.len()];
    let id = input.data();
    let wd = weight.data();
    let gd = gout.data();
    for oc in 0..cout {
        for ic in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((oc * cin + ic) * kh + ky) * kw + kx;
                    let wv = wd[widx];
                    let mut wacc = F::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_base = (ic * h + iy as usize) * w;
                        let g_base = (oc * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let gv = gd[g_base + ox];
                            wacc += gv * id[in_base + ix as usize];
                            gi[in_base + ix as usize] += gv * wv;
                        }
                    }
                    gw[widx] += wacc;
                }
            }
        }
    }
    (Tensor::new(&[cin, h, w], gi), Tensor::new(weight.shape(), gw))
}

fn upsample2x_kernel<F: Scalar>(input: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = dims3(input.shape());
    let mut out = vec![F::zero(); c * 4 * h * w];
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                out[(ch * h2 + y) * w2 + x] = input.data()[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    Tensor::new(&[c, h2, w2], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_mul_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(vec![2.0, 3.0]));
        let b = g.leaf(Tensor::from_vec(vec![5.0, 7.0]));
        let p = g.mul(a, b);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(a).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn constant_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0]));
        let c = g.constant(Tensor::from_vec(vec![4.0]));
        let p = g.mul(a, c);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(a).unwrap().data(), &[4.0]);
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn max_lastdim_tie_breaks_low() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 0.5, 2.0, 2.0]));
        let m = g.max_lastdim(a);
        assert_eq!(g.value(m).data(), &[1.0, 2.0]);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        // first of the tied entries receives the gradient
        assert_eq!(grads.wrt(a).unwrap().data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn detach_stops_flow() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(vec![3.0]));
        let d = g.detach(a);
        let p = g.mul(a, d);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        // d(a * const(3))/da = 3, not 2a = 6
        assert_eq!(grads.wrt(a).unwrap().data(), &[3.0]);
    }
}
