//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in construction
//! order. Because a node can only reference nodes created before it, the
//! recording order is already topological and [`Tape::backward`] simply walks
//! it in reverse. Parameters are not copied onto the tape: parameter leaves
//! borrow the flat parameter buffer and their gradients land in a flat buffer
//! with the same layout.

use rand::Rng;

use super::kernels::{gemm, Transpose};
use super::{check_shape, MatmulPlan, ParamSpec, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

enum Op {
    Leaf,
    Param { offset: usize },
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Add(Var, Var),
    /// `b` matches the trailing axes of `a` and is repeated over the rest.
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Softmax { x: Var, outer: usize, dim: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Elementwise multiply by a fixed mask that already includes the
    /// survivor scale.
    Dropout { x: Var, mask: Vec<f64> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node<'p>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<f64>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::variable`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.leaves.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    /// Flat gradient buffer laid out like the parameter buffer.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }
}

impl<'p> Tape<'p> {
    /// New tape whose parameter leaves read from `params`.
    pub fn new(params: &'p [f64]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    /// Tape without parameters.
    pub fn detached() -> Tape<'static> {
        Tape {
            params: &[],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Differentiable leaf; its gradient is available from [`Gradients::grad`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Leaf reading the parameter described by `spec` from the bound buffer.
    pub fn param(&mut self, spec: &ParamSpec) -> Var {
        let slice = &self.params[spec.range()];
        self.nodes.push(Node {
            shape: spec.shape.clone(),
            value: Value::Borrowed(slice),
            op: Op::Param { offset: spec.offset },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product over the last two axes. Leading axes must either match
    /// or `b` must be a plain matrix shared by every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, Transpose::No)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, Transpose::Yes)
    }

    fn matmul_t(&mut self, a: Var, b: Var, tb: Transpose) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b), tb)?;
        let mut out = vec![0.0; plan.out_len()];
        plan.forward(self.value(a), self.value(b), &mut out);
        let rg = self.rg(a) || self.rg(b);
        let shape = plan.out_shape.clone();
        Ok(self.push(shape, out, Op::MatMul { a, b, plan }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{} of {:?} and {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
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

    /// `x · weight + bias` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_broadcast(xw, bias)
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("broadcast add of {:?} and {:?}", sa, sb)));
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks(bv.len())
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = sa.to_vec();
        Ok(self.push(shape, out, Op::AddBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Numerically stabilised softmax along `axis`. Slices that are entirely
    /// `-inf` produce all-zero output.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {} for shape {:?}", axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).to_vec();
        softmax_in_place(&mut out, outer, dim, inner);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, dim, inner }, rg))
    }

    /// Layer normalisation over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "layer norm over {:?} with gain {:?} and bias {:?}",
                shape,
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xs.len() / n;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. With `rng = None` (evaluation) or `rate == 0` this
    /// is the identity and records nothing.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {} outside [0, 1)", rate)));
        }
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(x),
        };
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {:?}", self.shape(x), shape)));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![m], Op::Mean(x), rg)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrad = vec![0.0; self.params.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Param { offset } => {
                    for (p, d) in pgrad[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *p += d;
                    }
                }
                Op::MatMul { a, b, plan } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (plan.m, plan.k, plan.n);
                    if self.rg(*a) {
                        let mut da = vec![0.0; av.len()];
                        for s in 0..plan.batch {
                            let bs = if plan.shared_rhs { 0 } else { s * k * n };
                            // dA = dC · op(B)ᵀ
                            let tb = match plan.trans_b {
                                Transpose::No => Transpose::Yes,
                                Transpose::Yes => Transpose::No,
                            };
                            gemm(
                                &g[s * m * n..(s + 1) * m * n],
                                Transpose::No,
                                &bv[bs..bs + k * n],
                                tb,
                                &mut da[s * m * k..(s + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; bv.len()];
                        for s in 0..plan.batch {
                            let bs = if plan.shared_rhs { 0 } else { s * k * n };
                            let (ga, aa) = (&g[s * m * n..(s + 1) * m * n], &av[s * m * k..(s + 1) * m * k]);
                            match plan.trans_b {
                                // dB = Aᵀ · dC
                                Transpose::No => gemm(aa, Transpose::Yes, ga, Transpose::No, &mut db[bs..bs + k * n], k, m, n),
                                // dBᵀ-stored = dCᵀ · A
                                Transpose::Yes => gemm(ga, Transpose::Yes, aa, Transpose::No, &mut db[bs..bs + k * n], n, m, k),
                            }
                        }
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, b.0, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, a.0, g);
                    }
                }
                Op::AddBroadcast(a, b) => {
                    if self.rg(*b) {
                        let bl = self.value(*b).len();
                        let mut db = vec![0.0; bl];
                        for chunk in g.chunks(bl) {
                            for (d, x) in db.iter_mut().zip(chunk) {
                                *d += x;
                            }
                        }
                        accumulate(&mut grads, b.0, db);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, a.0, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, b.0, g.iter().map(|x| -x).collect());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, a.0, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let d = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, a.0, d);
                    }
                    if self.rg(*b) {
                        let d = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, b.0, d);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, a.0, g.iter().map(|x| x * c).collect()),
                Op::Relu(a) => {
                    let d = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a.0, d);
                }
                Op::Abs(a) => {
                    let d = g.iter().zip(self.value(*a)).map(|(x, v)| x * sign(*v)).collect();
                    accumulate(&mut grads, a.0, d);
                }
                Op::Square(a) => {
                    let d = g.iter().zip(self.value(*a)).map(|(x, v)| 2.0 * v * x).collect();
                    accumulate(&mut grads, a.0, d);
                }
                Op::Softmax { x, outer, dim, inner } => {
                    let y = node.value.as_slice();
                    let mut d = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let idx = |j: usize| o * dim * inner + j * inner + c;
                            let dot: f64 = (0..*dim).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*dim {
                                d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let n = gv.len();
                    let rows = xhat.len() / n;
                    if self.rg(*gain) || self.rg(*bias) {
                        let mut dg = vec![0.0; n];
                        let mut db = vec![0.0; n];
                        for r in 0..rows {
                            for j in 0..n {
                                dg[j] += g[r * n + j] * xhat[r * n + j];
                                db[j] += g[r * n + j];
                            }
                        }
                        if self.rg(*gain) {
                            accumulate(&mut grads, gain.0, dg);
                        }
                        if self.rg(*bias) {
                            accumulate(&mut grads, bias.0, db);
                        }
                    }
                    if self.rg(*x) {
                        let mut dx = vec![0.0; xhat.len()];
                        let nf = n as f64;
                        for r in 0..rows {
                            let gr = &g[r * n..(r + 1) * n];
                            let hr = &xhat[r * n..(r + 1) * n];
                            let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                dx[r * n + j] = inv_std[r] / nf * (nf * dh[j] - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads, x.0, g.iter().zip(mask).map(|(a, b)| a * b).collect());
                }
                Op::Reshape(x) => accumulate(&mut grads, x.0, g),
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, x.0, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, x.0, vec![g[0] / n as f64; n]);
                }
            }
        }
        Ok(Gradients {
            leaves,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            params: pgrad,
        })
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

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contrib: Vec<f64>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

pub(crate) fn softmax_in_place(data: &mut [f64], outer: usize, dim: usize, inner: usize) {
    for o in 0..outer {
        for c in 0..inner {
            let idx = |j: usize| o * dim * inner + j * inner + c;
            let max = (0..dim).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                for j in 0..dim {
                    data[idx(j)] = 0.0;
                }
                continue;
            }
            let mut total = 0.0;
            for j in 0..dim {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                total += e;
            }
            for j in 0..dim {
                data[idx(j)] /= total;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn product_rule_for_scalars() {
        let mut tape = Tape::detached();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.variable(Tensor::scalar(-2.0));
        let z = tape.mul(x, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-2.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[3.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::detached();
        let x = tape.variable(Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        let total = tape.sum(s);
        let g = tape.backward(total).unwrap().grad(x).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15), "{:?}", g.data());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = x*x + 3x  =>  d/dx = 2x + 3
        let mut tape = Tape::detached();
        let x = tape.variable(Tensor::scalar(1.5));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let loss = tape.add(sq, lin).unwrap();
        let g = tape.backward(loss).unwrap().grad(x).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::detached();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn softmax_special_values() {
        let mut tape = Tape::detached();
        let u = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let su = tape.softmax(u, 0).unwrap();
        for v in tape.value(su) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in [-700.0, 0.0, 5.0, 800.0] {
            let x = tape.constant(Tensor::vector(vec![c, c + 2f64.ln()]));
            let s = tape.softmax(x, 0).unwrap();
            let v = tape.value(s);
            assert!((v[0] - 1.0 / 3.0).abs() < 1e-12 && (v[1] - 2.0 / 3.0).abs() < 1e-12, "{c}: {v:?}");
        }
        let inf = tape.constant(Tensor::vector(vec![f64::NEG_INFINITY; 3]));
        let s = tape.softmax(inf, 0).unwrap();
        assert_eq!(tape.value(s), &[0.0, 0.0, 0.0]);
        let sentinel = tape.constant(Tensor::vector(vec![-1e30, 1.0, 2.0]));
        let s = tape.softmax(sentinel, 0).unwrap();
        assert!(tape.value(s)[0] <= 1e-300);
    }

    #[test]
    fn softmax_direct_formula() {
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.softmax(x, 0).unwrap();
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in tape.value(s).iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 5.0, -2.0, 0.0, 0.5, 3.0]).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s);
        for c in 0..3 {
            assert!((v[c] + v[3 + c] - 1.0).abs() < 1e-12);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::detached();
        let g = tape.constant(Tensor::full(vec![3], 1.0));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let c = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);

        let g2 = tape.constant(Tensor::full(vec![2], 1.0));
        let b2 = tape.constant(Tensor::zeros(vec![2]));
        let x = tape.constant(Tensor::vector(vec![-1.0, 1.0]));
        let y = tape.layer_norm(x, g2, b2, 1e-5).unwrap();
        // var = 1, so the eps shifts the result by ~5e-6 only
        for (v, w) in tape.value(y).iter().zip([-1.0, 1.0]) {
            assert!((v - w).abs() < 1e-5);
        }

        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let var: f64 = 2.0 / 3.0;
        for (i, v) in tape.value(y).iter().enumerate() {
            let want = (i as f64 + 1.0 - 2.0) / (var + 1e-5).sqrt();
            assert!((v - want).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_modes() {
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::full(vec![10], 2.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(tape.dropout(x, 0.0, Some(&mut rng)).unwrap(), x);
        assert_eq!(tape.dropout::<ChaCha8Rng>(x, 0.5, None).unwrap(), x);
        assert!(tape.dropout(x, 1.0, Some(&mut rng)).is_err());
        assert!(tape.dropout(x, -0.1, Some(&mut rng)).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 1_000_000;
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::full(vec![n], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let y = tape.dropout(x, 0.1, Some(&mut rng)).unwrap();
        let v = tape.value(y);
        let mean = v.iter().sum::<f64>() / n as f64;
        let zeros = v.iter().filter(|&&e| e == 0.0).count() as f64 / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!((zeros - 0.1).abs() < 0.01 * 0.1, "{zeros}");
    }

    #[test]
    fn linear_composition_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = random(&mut rng, 6);
        let wv = random(&mut rng, 6);
        let bv = random(&mut rng, 2);
        let mut tape = Tape::detached();
        let x = tape.constant(Tensor::matrix(2, 3, xv.clone()).unwrap());
        let w = tape.constant(Tensor::matrix(3, 2, wv.clone()).unwrap());
        let b = tape.constant(Tensor::vector(bv.clone()));
        let xw = tape.matmul(x, w).unwrap();
        let y = tape.add_broadcast(xw, b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|p| xv[i * 3 + p] * wv[p * 2 + j]).sum::<f64>() + bv[j];
                assert!((tape.value(y)[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    /// Gradient of every op against central differences.
    #[test]
    fn ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = random(&mut rng, 2 * 3 * 4);
        let b0 = random(&mut rng, 2 * 4 * 3);
        let g0 = random(&mut rng, 3);
        let w0 = random(&mut rng, 3 * 4);

        let eval = |p: &[f64]| -> (f64, Vec<f64>) {
            let (a, rest) = p.split_at(24);
            let (b, rest) = rest.split_at(24);
            let (gain, w) = rest.split_at(3);
            let mut tape = Tape::detached();
            let av = tape.variable(Tensor::new(vec![2, 3, 4], a.to_vec()).unwrap());
            let bv = tape.variable(Tensor::new(vec![2, 4, 3], b.to_vec()).unwrap());
            let gv = tape.variable(Tensor::vector(gain.to_vec()));
            let wv = tape.variable(Tensor::matrix(4, 3, w.to_vec()).unwrap());
            let ab = tape.matmul(av, bv).unwrap();
            let bias = tape.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
            let ln = tape.layer_norm(ab, gv, bias, 1e-5).unwrap();
            let sm = tape.softmax(ln, 1).unwrap();
            let sh = tape.add_broadcast(sm, bias).unwrap();
            let r = tape.relu(sh);
            let sq = tape.square(r);
            let abt = tape.matmul_bt(sq, wv).unwrap(); // [2,3,4]
            let sub = tape.sub(abt, av).unwrap();
            let ab2 = tape.abs(sub);
            let sc = tape.scale(ab2, 0.7);
            let res = tape.reshape(sc, vec![24]).unwrap();
            let loss = tape.mean(res);
            let grads = tape.backward(loss).unwrap();
            let mut flat = Vec::new();
            for v in [av, bv, gv, wv] {
                flat.extend(grads.grad(v).unwrap().into_data());
            }
            (tape.value(loss)[0], flat)
        };
        let mut point = a0.clone();
        point.extend(&b0);
        point.extend(&g0);
        point.extend(&w0);
        let (_, auto) = eval(&point);
        let numeric = finite_diff_gradient(|p| eval(p).0, &point, 1e-5);
        for (i, (a, n)) in auto.iter().zip(&numeric).enumerate() {
            assert!(
                crate::tensor::relative_error(*a, *n) < 1e-4,
                "coordinate {i}: auto {a} numeric {n}"
            );
        }
    }

    #[test]
    fn param_leaves_accumulate_into_flat_buffer() {
        use crate::tensor::{Init, ParamSet};
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let a = ps.add("a", vec![2], Init::Ones, &mut rng);
        let b = ps.add("b", vec![2], Init::Zeros, &mut rng);
        let data = ps.data().to_vec();
        let mut tape = Tape::new(&data);
        let av = tape.param(ps.spec(a));
        let av2 = tape.param(ps.spec(a));
        let bv = tape.param(ps.spec(b));
        let s = tape.add(av, av2).unwrap();
        let s = tape.add(s, bv).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.params(), &[2.0, 2.0, 1.0, 1.0]);
    }
}
