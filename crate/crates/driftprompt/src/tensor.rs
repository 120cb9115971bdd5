//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a cheap handle onto shared storage. Operations on tensors
//! whose inputs require gradients record a node holding the input handles and
//! a local-gradient closure; [`Tensor::backward`] topologically orders those
//! nodes and walks them once in reverse, accumulating gradients into every
//! tensor that requires them. The graph is rebuilt on every forward pass and
//! freed when the output handles drop, so long-lived parameters can be reused
//! across training steps. Graphs are single-threaded; build one per thread.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Handle onto a shared tensor value, its gradient, and its graph node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

struct Inner {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node: Option<Node>,
}

/// One recorded operation: the tensors it consumed plus a closure that maps
/// the output gradient (and output value) to input-gradient contributions.
struct Node {
    inputs: Vec<Tensor>,
    backward: Box<dyn Fn(&[f64], &[f64])>,
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Leaf tensor from row-major data. Shape entries must be positive and
    /// their product must equal `data.len()`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "new",
                detail: format!("shape entries must be positive, got {shape:?}"),
            });
        }
        if product(shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "new",
                detail: format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    product(shape),
                    data.len()
                ),
            });
        }
        Ok(Self::from_parts(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf: `new` with `requires_grad` set.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::from_parts(vec![0.0; product(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::from_parts(vec![v], vec![1], false, None)
    }

    fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                data,
                shape,
                requires_grad,
                grad: None,
                node,
            })),
        }
    }

    fn ptr(&self) -> *const () {
        Rc::as_ptr(&self.inner) as *const ()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Copy of the tensor's value.
    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Copy of the accumulated gradient, if any has been propagated here.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.borrow_mut().requires_grad = v;
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                detail: format!("expected one element, shape is {:?}", inner.shape),
            });
        }
        Ok(inner.data[0])
    }

    /// Overwrite the value in place. Length must match.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::InvalidShape {
                op: "set_data",
                detail: format!("expected {} elements, got {}", inner.data.len(), data.len()),
            });
        }
        inner.data = data;
        Ok(())
    }

    /// Replace the gradient outright (mainly for tests and optimizers).
    pub fn set_grad(&self, grad: Vec<f64>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if grad.len() != inner.data.len() {
            return Err(Error::InvalidShape {
                op: "set_grad",
                detail: format!("expected {} elements, got {}", inner.data.len(), grad.len()),
            });
        }
        inner.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Constant copy that is cut off from the graph.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Self::from_parts(inner.data.clone(), inner.shape.clone(), false, None)
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    pub(crate) fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.inner.borrow_mut().data)
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let n = inner.data.len();
        debug_assert_eq!(delta.len(), n);
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Build an op output: records a node when any input requires a gradient,
    /// otherwise returns a plain constant.
    fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[f64], &[f64]) + 'static,
    ) -> Tensor {
        let tracked = inputs.iter().any(Tensor::requires_grad);
        if tracked {
            Self::from_parts(
                data,
                shape,
                true,
                Some(Node {
                    inputs,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::from_parts(data, shape, false, None)
        }
    }

    /// Reverse-mode sweep from a scalar loss. Seeds d(loss)/d(loss) = 1 and
    /// visits every recorded node exactly once in reverse topological order.
    /// Op outputs get fresh gradients each sweep; leaf gradients persist, so
    /// repeated calls without `zero_grad` accumulate one full gradient per
    /// call, and a tensor consumed by several ops receives the sum of all
    /// contributions.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(Error::NonScalarLoss {
                    shape: inner.shape.clone(),
                });
            }
        }

        // Iterative post-order DFS; inputs finish before their consumers.
        enum Phase {
            Enter,
            Exit,
        }
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<*const ()> = HashSet::new();
        let mut stack: Vec<(Tensor, Phase)> = vec![(self.clone(), Phase::Enter)];
        while let Some((t, phase)) = stack.pop() {
            match phase {
                Phase::Enter => {
                    if !seen.insert(t.ptr()) {
                        continue;
                    }
                    let inputs: Vec<Tensor> = {
                        let inner = t.inner.borrow();
                        inner
                            .node
                            .as_ref()
                            .map(|n| n.inputs.clone())
                            .unwrap_or_default()
                    };
                    stack.push((t, Phase::Exit));
                    for c in inputs {
                        if !seen.contains(&c.ptr()) {
                            stack.push((c, Phase::Enter));
                        }
                    }
                }
                Phase::Exit => {
                    if t.inner.borrow().node.is_some() {
                        order.push(t);
                    }
                }
            }
        }

        for t in &order {
            t.inner.borrow_mut().grad = None;
        }
        self.accumulate_grad(&[1.0]);

        for t in order.iter().rev() {
            let grad = match t.inner.borrow().grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let inner = t.inner.borrow();
            if let Some(node) = &inner.node {
                (node.backward)(&grad, &inner.data);
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("data", &inner.data)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Matrix multiplication kernels (all accumulate into the output buffer).

fn mm_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// How the leading (batch) dims of the two matmul operands line up.
enum BatchPairing {
    Paired(usize),
    BroadcastRhs(usize),
    BroadcastLhs(usize),
}

impl Tensor {
    /// Batched matrix product over the two trailing axes. Leading axes must
    /// match exactly, or be absent on one side, in which case that side is
    /// broadcast across the other's batches.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (la, lb) = (self.shape(), rhs.shape());
        if la.len() < 2 || lb.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: la,
                rhs: lb,
            });
        }
        let (m, k) = (la[la.len() - 2], la[la.len() - 1]);
        let (k2, n) = (lb[lb.len() - 2], lb[lb.len() - 1]);
        let lead_a = &la[..la.len() - 2];
        let lead_b = &lb[..lb.len() - 2];
        let pairing = if k != k2 {
            None
        } else if lead_a == lead_b {
            Some(BatchPairing::Paired(product(lead_a)))
        } else if lead_b.is_empty() {
            Some(BatchPairing::BroadcastRhs(product(lead_a)))
        } else if lead_a.is_empty() {
            Some(BatchPairing::BroadcastLhs(product(lead_b)))
        } else {
            None
        };
        let pairing = pairing.ok_or(Error::ShapeMismatch {
            op: "matmul",
            lhs: la.clone(),
            rhs: lb.clone(),
        })?;

        let (batches, a_step, b_step) = match pairing {
            BatchPairing::Paired(b) => (b.max(1), m * k, k * n),
            BatchPairing::BroadcastRhs(b) => (b.max(1), m * k, 0),
            BatchPairing::BroadcastLhs(b) => (b.max(1), 0, k * n),
        };
        let mut out_shape: Vec<usize> = if a_step == 0 { lead_b.to_vec() } else { lead_a.to_vec() };
        out_shape.push(m);
        out_shape.push(n);

        let mut out = vec![0.0; batches * m * n];
        {
            let ai = self.inner.borrow();
            let bi = rhs.inner.borrow();
            for t in 0..batches {
                mm_nn_acc(
                    &ai.data[t * a_step..t * a_step + m * k],
                    &bi.data[t * b_step..t * b_step + k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }

        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                let (mut da, mut db) = (vec![0.0; a.numel()], vec![0.0; b.numel()]);
                {
                    let ai = a.inner.borrow();
                    let bi = b.inner.borrow();
                    for t in 0..batches {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        // dA = dC * B^T, dB = A^T * dC; broadcast sides sum over batches.
                        mm_nt_acc(
                            gs,
                            &bi.data[t * b_step..t * b_step + k * n],
                            &mut da[t * a_step..t * a_step + m * k],
                            m,
                            n,
                            k,
                        );
                        mm_tn_acc(
                            &ai.data[t * a_step..t * a_step + m * k],
                            gs,
                            &mut db[t * b_step..t * b_step + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                a.accumulate_grad(&da);
                b.accumulate_grad(&db);
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops with trailing-shape broadcast.

/// Which operand (if any) is the broadcast, smaller one.
enum Fit {
    Same,
    RhsSmall,
    LhsSmall,
}

fn broadcast_fit(op: &'static str, a: &[usize], b: &[usize]) -> Result<Fit> {
    if a == b {
        Ok(Fit::Same)
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(Fit::RhsSmall)
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(Fit::LhsSmall)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

impl Tensor {
    fn binary_op(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        dfda: fn(f64, f64) -> f64,
        dfdb: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let fit = broadcast_fit(op, &sa, &sb)?;
        let (out_shape, small_is_rhs) = match fit {
            Fit::Same | Fit::RhsSmall => (sa.clone(), true),
            Fit::LhsSmall => (sb.clone(), false),
        };
        let total = product(&out_shape);
        let small_n = if small_is_rhs { product(&sb) } else { product(&sa) };

        let mut out = vec![0.0; total];
        {
            let ai = self.inner.borrow();
            let bi = rhs.inner.borrow();
            for (i, o) in out.iter_mut().enumerate() {
                let (av, bv) = if small_is_rhs {
                    (ai.data[i], bi.data[i % small_n])
                } else {
                    (ai.data[i % small_n], bi.data[i])
                };
                *o = f(av, bv);
            }
        }

        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), rhs.clone()],
            move |g, _| {
                let (mut da, mut db) = (vec![0.0; a.numel()], vec![0.0; b.numel()]);
                {
                    let ai = a.inner.borrow();
                    let bi = b.inner.borrow();
                    for (i, &gv) in g.iter().enumerate() {
                        let (ia, ib) = if small_is_rhs {
                            (i, i % small_n)
                        } else {
                            (i % small_n, i)
                        };
                        let (av, bv) = (ai.data[ia], bi.data[ib]);
                        da[ia] += gv * dfda(av, bv);
                        db[ib] += gv * dfdb(av, bv);
                    }
                }
                a.accumulate_grad(&da);
                b.accumulate_grad(&db);
            },
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_op(rhs, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_op(rhs, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_op(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    fn unary_op(
        &self,
        f: impl Fn(f64) -> f64,
        // gradient as a function of (input, output) per element
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let shape = self.shape();
        let out: Vec<f64> = self.with_data(|d| d.iter().map(|&x| f(x)).collect());
        let x = self.clone();
        Tensor::from_op(out, shape, vec![self.clone()], move |g, out_data| {
            let dx: Vec<f64> = {
                let xi = x.inner.borrow();
                g.iter()
                    .zip(xi.data.iter().zip(out_data))
                    .map(|(&gv, (&xv, &ov))| gv * df(xv, ov))
                    .collect()
            };
            x.accumulate_grad(&dx);
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary_op(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary_op(move |x| x + c, |_, _| 1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary_op(|x| x.max(0.0), |_, o| if o > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary_op(stable_sigmoid, |_, o| o * (1.0 - o))
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Axis-structured ops.

/// Split a shape around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = product(&shape[..axis]);
    let len = shape[axis];
    let inner = product(&shape[axis + 1..]);
    (outer, len, inner)
}

impl Tensor {
    /// Max-stabilized softmax along `axis`; each lane sums to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; product(&shape)];
        self.with_data(|d| {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        max = max.max(d[base + j * inner]);
                    }
                    let mut sum = 0.0;
                    for j in 0..len {
                        let e = (d[base + j * inner] - max).exp();
                        out[base + j * inner] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        out[base + j * inner] /= sum;
                    }
                }
            }
        });

        let x = self.clone();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            move |g, s| {
                // dx_j = s_j * (g_j - sum_k g_k s_k) per lane
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += g[idx] * s[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] = s[idx] * (g[idx] - dot);
                        }
                    }
                }
                x.accumulate_grad(&dx);
            },
        ))
    }

    /// Layer normalization over the trailing axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape();
        let d = *shape.last().ok_or(Error::InvalidShape {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape(),
            });
        }
        let rows = product(&shape) / d;
        let mut out = vec![0.0; product(&shape)];
        {
            let xi = self.inner.borrow();
            let gi = gamma.inner.borrow();
            let bi = beta.inner.borrow();
            for r in 0..rows {
                let xrow = &xi.data[r * d..(r + 1) * d];
                let mean = xrow.iter().sum::<f64>() / d as f64;
                let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    let xhat = (xrow[j] - mean) * inv;
                    out[r * d + j] = gi.data[j] * xhat + bi.data[j];
                }
            }
        }

        let (x, ga, be) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, _| {
                let mut dx = vec![0.0; x.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                {
                    let xi = x.inner.borrow();
                    let gi = ga.inner.borrow();
                    for r in 0..rows {
                        let xrow = &xi.data[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = xrow.iter().sum::<f64>() / d as f64;
                        let var =
                            xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xrow[j] - mean) * inv;
                            let dxhat = grow[j] * gi.data[j];
                            dgamma[j] += grow[j] * xhat;
                            dbeta[j] += grow[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..d {
                            let xhat = (xrow[j] - mean) * inv;
                            let dxhat = grow[j] * gi.data[j];
                            dx[r * d + j] = inv
                                * (dxhat - sum_dxhat / d as f64 - xhat * sum_dxhat_xhat / d as f64);
                        }
                    }
                }
                x.accumulate_grad(&dx);
                ga.accumulate_grad(&dgamma);
                be.accumulate_grad(&dbeta);
            },
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if product(new_shape) != self.numel() || new_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "reshape",
                detail: format!("cannot reshape {:?} into {:?}", self.shape(), new_shape),
            });
        }
        let x = self.clone();
        Ok(Tensor::from_op(
            self.data(),
            new_shape.to_vec(),
            vec![self.clone()],
            move |g, _| x.accumulate_grad(g),
        ))
    }

    /// Transpose two axes (copying permutation).
    pub fn swap_axes(&self, ax0: usize, ax1: usize) -> Result<Tensor> {
        let shape = self.shape();
        let rank = shape.len();
        if ax0 >= rank || ax1 >= rank {
            return Err(Error::InvalidAxis {
                op: "swap_axes",
                axis: ax0.max(ax1),
                rank,
            });
        }
        let mut out_shape = shape.clone();
        out_shape.swap(ax0, ax1);
        let out = permute_swap(&self.inner.borrow().data, &shape, ax0, ax1);
        let x = self.clone();
        let in_shape = out_shape.clone();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            move |g, _| {
                // swapping the same axes again inverts the permutation
                let dx = permute_swap(g, &in_shape, ax0, ax1);
                x.accumulate_grad(&dx);
            },
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidShape {
            op: "concat",
            detail: "empty input list".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            let mut expect = base.clone();
            expect[axis] = s.get(axis).copied().unwrap_or(0);
            if s != expect {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s,
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);

        let mut out = vec![0.0; product(&out_shape)];
        let mut lens = Vec::with_capacity(parts.len());
        {
            let mut offset = 0;
            for p in parts {
                let len = p.shape()[axis];
                p.with_data(|d| {
                    for o in 0..outer {
                        let src = &d[o * len * inner..(o + 1) * len * inner];
                        let dst_base = o * axis_total * inner + offset * inner;
                        out[dst_base..dst_base + len * inner].copy_from_slice(src);
                    }
                });
                lens.push(len);
                offset += len;
            }
        }

        let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let inputs = handles.clone();
        Ok(Tensor::from_op(out, out_shape, inputs, move |g, _| {
            let mut offset = 0;
            for (p, &len) in handles.iter().zip(&lens) {
                let mut dp = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src_base = o * axis_total * inner + offset * inner;
                    dp[o * len * inner..(o + 1) * len * inner]
                        .copy_from_slice(&g[src_base..src_base + len * inner]);
                }
                p.accumulate_grad(&dp);
                offset += len;
            }
        }))
    }

    /// Contiguous sub-range `start..end` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "slice_axis",
                axis,
                rank: shape.len(),
            });
        }
        if start >= end || end > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice_axis",
                detail: format!(
                    "range {start}..{end} invalid for axis {axis} of extent {}",
                    shape[axis]
                ),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let take = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = take;
        let mut out = vec![0.0; outer * take * inner];
        self.with_data(|d| {
            for o in 0..outer {
                let src_base = o * len * inner + start * inner;
                out[o * take * inner..(o + 1) * take * inner]
                    .copy_from_slice(&d[src_base..src_base + take * inner]);
            }
        });
        let x = self.clone();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            move |g, _| {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst_base = o * len * inner + start * inner;
                    dx[dst_base..dst_base + take * inner]
                        .copy_from_slice(&g[o * take * inner..(o + 1) * take * inner]);
                }
                x.accumulate_grad(&dx);
            },
        ))
    }

    /// Tile the tensor `b` times along a new leading axis.
    pub fn broadcast_batch(&self, b: usize) -> Result<Tensor> {
        if b == 0 {
            return Err(Error::InvalidShape {
                op: "broadcast_batch",
                detail: "batch extent must be positive".into(),
            });
        }
        let shape = self.shape();
        let n = self.numel();
        let mut out_shape = Vec::with_capacity(shape.len() + 1);
        out_shape.push(b);
        out_shape.extend_from_slice(&shape);
        let mut out = Vec::with_capacity(b * n);
        self.with_data(|d| {
            for _ in 0..b {
                out.extend_from_slice(d);
            }
        });
        let x = self.clone();
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            move |g, _| {
                let mut dx = vec![0.0; n];
                for chunk in g.chunks_exact(n) {
                    for (dv, &gv) in dx.iter_mut().zip(chunk) {
                        *dv += gv;
                    }
                }
                x.accumulate_grad(&dx);
            },
        ))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.with_data(|d| d.iter().sum());
        let n = self.numel();
        let x = self.clone();
        Tensor::from_op(vec![total], vec![1], vec![self.clone()], move |g, _| {
            x.accumulate_grad(&vec![g[0]; n]);
        })
    }

    /// Mean of all elements as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let total: f64 = self.with_data(|d| d.iter().sum());
        let x = self.clone();
        Tensor::from_op(vec![total / n as f64], vec![1], vec![self.clone()], move |g, _| {
            x.accumulate_grad(&vec![g[0] / n as f64; n]);
        })
    }

    /// Mean squared error against a target of identical shape.
    pub fn mse_loss(&self, target: &Tensor) -> Result<Tensor> {
        if self.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: self.shape(),
                rhs: target.shape(),
            });
        }
        let diff = self.sub(target)?;
        Ok(diff.mul(&diff)?.mean())
    }

    /// Mean binary cross-entropy computed from logits (numerically stable
    /// log-sum-exp form). Targets must be in [0, 1] and the same shape.
    pub fn binary_cross_entropy_loss(&self, targets: &Tensor) -> Result<Tensor> {
        if self.shape() != targets.shape() {
            return Err(Error::ShapeMismatch {
                op: "binary_cross_entropy_loss",
                lhs: self.shape(),
                rhs: targets.shape(),
            });
        }
        let n = self.numel();
        let total: f64 = {
            let zi = self.inner.borrow();
            let yi = targets.inner.borrow();
            zi.data
                .iter()
                .zip(yi.data.iter())
                .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                .sum()
        };
        let (z, y) = (self.clone(), targets.clone());
        Ok(Tensor::from_op(
            vec![total / n as f64],
            vec![1],
            vec![self.clone(), targets.clone()],
            move |g, _| {
                let scale = g[0] / n as f64;
                let (dz, dy): (Vec<f64>, Vec<f64>) = {
                    let zi = z.inner.borrow();
                    let yi = y.inner.borrow();
                    zi.data
                        .iter()
                        .zip(yi.data.iter())
                        .map(|(&zv, &yv)| {
                            (scale * (stable_sigmoid(zv) - yv), scale * (-zv))
                        })
                        .unzip()
                };
                z.accumulate_grad(&dz);
                y.accumulate_grad(&dy);
            },
        ))
    }
}

fn permute_swap(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_strides_in_input = out_shape
        .iter()
        .enumerate()
        .map(|(i, _)| {
            // output axis i reads input axis (i with ax0/ax1 swapped)
            let src = if i == ax0 {
                ax1
            } else if i == ax1 {
                ax0
            } else {
                i
            };
            in_strides[src]
        })
        .collect::<Vec<_>>();
    // Iterate output in row-major order, tracking the input offset.
    let total = product(shape);
    let mut out = vec![0.0; total];
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for o in out.iter_mut() {
        *o = data[src_off];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src_off += out_strides_in_input[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src_off -= out_strides_in_input[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out_strides_in_input.clear();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![5.0, 6.0], &[2, 1]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.data(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::new(vec![0.0; 6], &[2, 3]).unwrap();
        let b = Tensor::new(vec![0.0; 6], &[2, 3]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_rhs_over_batch() {
        let a = Tensor::new((0..12).map(f64::from).collect(), &[2, 2, 3]).unwrap();
        let w = Tensor::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]).unwrap();
        let c = a.matmul(&w).unwrap();
        assert_eq!(c.shape(), vec![2, 2, 2]);
        // row [0,1,2] * w = [0*1+1*0+2*1, 0*0+1*1+2*1] = [2, 3]
        assert_eq!(c.data()[0..2], [2.0, 3.0]);
    }

    #[test]
    fn softmax_hand_example() {
        let x = Tensor::new(vec![0.0, 3.0_f64.ln()], &[2]).unwrap();
        let s = x.softmax(0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            x.softmax(1),
            Err(Error::InvalidAxis { axis: 1, rank: 1, .. })
        ));
    }

    #[test]
    fn backward_sum_of_squares() {
        let w = Tensor::param(vec![2.0], &[1]).unwrap();
        let loss = w.mul(&w).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = w.add(&w).unwrap();
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn detached_loss_leaves_grad_absent() {
        let w = Tensor::param(vec![1.0], &[1]).unwrap();
        let unrelated = Tensor::param(vec![3.0], &[1]).unwrap();
        let loss = unrelated.mul(&unrelated).unwrap().sum();
        loss.backward().unwrap();
        assert!(w.grad().is_none());
        assert!(unrelated.grad().is_some());
    }

    #[test]
    fn shared_input_accumulates_both_contributions() {
        let w = Tensor::param(vec![3.0], &[1]).unwrap();
        let a = w.scale(2.0);
        let b = w.scale(5.0);
        let loss = a.add(&b).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let w = Tensor::param(vec![2.0], &[1]).unwrap();
        let loss = w.mul(&w).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![8.0]);
    }

    #[test]
    fn bce_matches_naive_formula_on_moderate_logits() {
        let z = Tensor::new(vec![0.3, -1.2, 2.0], &[3]).unwrap();
        let y = Tensor::new(vec![1.0, 0.0, 1.0], &[3]).unwrap();
        let loss = z.binary_cross_entropy_loss(&y).unwrap().item().unwrap();
        let naive = |z: f64, y: f64| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        };
        let expect = (naive(0.3, 1.0) + naive(-1.2, 0.0) + naive(2.0, 1.0)) / 3.0;
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
    }

    #[test]
    fn swap_axes_transposes_2d() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let t = a.swap_axes(0, 1).unwrap();
        assert_eq!(t.shape(), vec![3, 2]);
        assert_eq!(t.data(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    /// Central-difference gradient of a scalar-valued function of one leaf.
    fn finite_difference(
        f: &dyn Fn(&Tensor) -> f64,
        x0: &[f64],
        shape: &[usize],
        h: f64,
    ) -> Vec<f64> {
        (0..x0.len())
            .map(|i| {
                let mut plus = x0.to_vec();
                plus[i] += h;
                let mut minus = x0.to_vec();
                minus[i] -= h;
                let fp = f(&Tensor::new(plus, shape).unwrap());
                let fm = f(&Tensor::new(minus, shape).unwrap());
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1.0);
            assert!(
                ((a - n) / denom).abs() <= tol,
                "grad[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn gradcheck_matmul_softmax_chain() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x0: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::new(w0, &[4, 3]).unwrap();
        let run = |x: &Tensor| {
            let y = x.matmul(&w).unwrap().softmax(1).unwrap();
            y.mul(&y).unwrap().mean().item().unwrap()
        };
        let x = Tensor::param(x0.clone(), &[3, 4]).unwrap();
        let y = x.matmul(&w).unwrap().softmax(1).unwrap();
        y.mul(&y).unwrap().mean().backward().unwrap();
        let numeric = finite_difference(&run, &x0, &[3, 4], 1e-4);
        assert_grad_close(&x.grad().unwrap(), &numeric, 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_lanes_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let x = Tensor::new(vals, &[3, 4]).unwrap();
            let s = x.softmax(1).unwrap();
            let d = s.data();
            for lane in d.chunks(4) {
                let sum: f64 = lane.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn slice_of_concat_recovers_parts(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 9),
        ) {
            let ta = Tensor::new(a.clone(), &[2, 3]).unwrap();
            let tb = Tensor::new(b.clone(), &[3, 3]).unwrap();
            let cat = Tensor::concat(&[&ta, &tb], 0).unwrap();
            let back_a = cat.slice_axis(0, 0, 2).unwrap();
            let back_b = cat.slice_axis(0, 2, 5).unwrap();
            prop_assert_eq!(back_a.data(), a);
            prop_assert_eq!(back_b.data(), b);
        }
    }
}
