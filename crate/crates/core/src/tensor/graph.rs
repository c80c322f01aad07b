use super::float::Float;
use super::kernels::{self, Layout};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// The right operand's shape is a suffix of the left's.
    Rhs,
    /// The left operand's shape is a suffix of the right's.
    Lhs,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(Broadcast::Rhs)
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(Broadcast::Lhs)
    } else {
        Err(Error::dim(format!(
            "shapes {a:?} and {b:?} are not equal and neither is a suffix of the other"
        )))
    }
}

#[derive(Debug)]
enum MatMulPlan {
    /// Right operand is a single matrix: the left's batch folds into its rows.
    Flat { m: usize, k: usize, n: usize },
    Batched {
        m: usize,
        k: usize,
        n: usize,
        a_map: Vec<usize>,
        b_map: Vec<usize>,
    },
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var, Broadcast),
    Scale(Var, F),
    MatMul(Var, Var, MatMulPlan),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    SigmoidBce {
        logits: Var,
        targets: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A gradient tape. Nodes are appended in evaluation order, so reverse index
/// order is a valid topological order for backpropagation.
#[derive(Debug, Default)]
pub struct Graph<F: Float = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward) call.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind(self.shape(a), self.shape(b))?;
        let (big, small) = match kind {
            Broadcast::Lhs => (self.value(b), self.value(a)),
            _ => (self.value(a), self.value(b)),
        };
        let s = small.data();
        let data = big
            .data()
            .chunks(s.len())
            .flat_map(|chunk| chunk.iter().zip(s).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor {
            shape: big.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product with the same suffix broadcasting as [`add`](Self::add).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind(self.shape(a), self.shape(b))?;
        let (big, small) = match kind {
            Broadcast::Lhs => (self.value(b), self.value(a)),
            _ => (self.value(a), self.value(b)),
        };
        let s = small.data();
        let data = big
            .data()
            .chunks(s.len())
            .flat_map(|chunk| chunk.iter().zip(s).map(|(&x, &y)| x * y))
            .collect();
        let value = Tensor {
            shape: big.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b, kind), rg))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::dim(format!("matmul shape mismatch: {sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (value, plan) = if batch_b.is_empty() {
            let rows = numel(batch_a) * m;
            let mut out = vec![F::zero(); rows * n];
            kernels::gemm(rows, k, n, av, Layout::Normal, bv, Layout::Normal, &mut out, false);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            (Tensor { shape, data: out }, MatMulPlan::Flat { m: rows, k, n })
        } else {
            let batch = kernels::broadcast_shapes(batch_a, batch_b).ok_or_else(mismatch)?;
            let a_map = kernels::broadcast_index_map(&batch, batch_a);
            let b_map = kernels::broadcast_index_map(&batch, batch_b);
            let mut out = vec![F::zero(); a_map.len() * m * n];
            for (i, (&ia, &ib)) in a_map.iter().zip(&b_map).enumerate() {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &av[ia * m * k..(ia + 1) * m * k],
                    Layout::Normal,
                    &bv[ib * k * n..(ib + 1) * k * n],
                    Layout::Normal,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            let mut shape = batch;
            shape.extend([m, n]);
            (
                Tensor { shape, data: out },
                MatMulPlan::Batched {
                    m,
                    k,
                    n,
                    a_map,
                    b_map,
                },
            )
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b, plan), rg))
    }

    /// `x · w + bias` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow(axis, start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Narrow { a, axis, start }, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, len, inner) = kernels::split_axis(x.shape(), axis)?;
        let xd = x.data();
        let mut out = vec![F::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let max = (0..len).map(|j| xd[at(j)]).fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data: out,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    /// Normalizes each slice along `axis` to zero mean and unit population
    /// variance, then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = kernels::split_axis(xv.shape(), axis)?;
        for p in [gamma, beta] {
            if self.shape(p) != [len] {
                return Err(Error::dim(format!(
                    "layer_norm affine parameter {:?} does not match normalized extent {len}",
                    self.shape(p)
                )));
            }
        }
        let xd = xv.data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let eps = F::from_f64(eps);
        let n = F::from_f64(len as f64);
        let mut xhat = vec![F::zero(); xd.len()];
        let mut inv_std = vec![F::zero(); outer * inner];
        let mut out = vec![F::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let mean = (0..len).map(|j| xd[at(j)]).sum::<F>() / n;
                let var = (0..len).map(|j| (xd[at(j)] - mean).powi(2)).sum::<F>() / n;
                let r = F::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for j in 0..len {
                    let h = (xd[at(j)] - mean) * r;
                    xhat[at(j)] = h;
                    out[at(j)] = h * gd[j] + bd[j];
                }
            }
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data: out,
        };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * kernels::normal_cdf(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    ///
    /// `x: [batch, cin, h, w]`, `kernel: [cout, cin, 3, 3]`, `bias: [cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if xs.len() != 4 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::dim(format!(
                "conv2d expects x [b,c,h,w] and a 3x3 kernel, got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {xs:?} vs kernel {ks:?}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::dim(format!(
                    "conv2d bias {:?} for {} output channels",
                    self.shape(b),
                    ks[0]
                )));
            }
        }
        let geom = ConvGeom::new(xs, ks);
        let mut out = vec![F::zero(); geom.batch * geom.cout * geom.plane()];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (i, plane) in out.chunks_mut(geom.plane()).enumerate() {
                plane.fill(bd[i % geom.cout]);
            }
        }
        geom.forward(self.value(x).data(), self.value(kernel).data(), &mut out);
        let value = Tensor {
            shape: vec![geom.batch, geom.cout, geom.h, geom.w],
            data: out,
        };
        let deps: Vec<Var> = [Some(x), Some(kernel), bias].into_iter().flatten().collect();
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv2d { x, kernel, bias }, rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`,
    /// in the fused form `max(z,0) - z*t + ln(1 + e^-|z|)`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Tensor<F>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::dim(format!(
                "bce shape mismatch: logits {:?} vs targets {:?}",
                z.shape(),
                targets.shape()
            )));
        }
        if let Some(t) = targets
            .data()
            .iter()
            .find(|t| !(**t >= F::zero() && **t <= F::one()))
        {
            return Err(Error::domain(format!("bce target {t} outside [0, 1]")));
        }
        let total: F = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(F::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let n = F::from_f64(z.numel() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::SigmoidBce {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<F>() / F::from_f64(v.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Backpropagates from the one-element `loss`, replacing any gradients
    /// from a previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize]) -> Self {
        Self {
            batch: xs[0],
            cin: xs[1],
            cout: ks[0],
            h: xs[2],
            w: xs[3],
        }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Output rows/columns that read a valid input pixel at offset `d`.
    fn span(extent: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (extent as isize - d).min(extent as isize).max(0) as usize;
        (lo, hi)
    }

    /// Visits every (output plane, input plane, kernel tap) triple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, isize, isize)) {
        for b in 0..self.batch {
            for co in 0..self.cout {
                for ci in 0..self.cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let out_plane = b * self.cout + co;
                            let in_plane = b * self.cin + ci;
                            let tap = (co * self.cin + ci) * 9 + ky * 3 + kx;
                            f(out_plane, in_plane, tap, ky as isize - 1, kx as isize - 1);
                        }
                    }
                }
            }
        }
    }

    fn forward<F: Float>(&self, x: &[F], k: &[F], out: &mut [F]) {
        let (h, w, plane) = (self.h, self.w, self.plane());
        self.for_each_tap(|op, ip, tap, dy, dx| {
            let wt = k[tap];
            let (y0, y1) = Self::span(h, dy);
            let (x0, x1) = Self::span(w, dx);
            for y in y0..y1 {
                let src_row = op_row(ip, plane, w, (y as isize + dy) as usize);
                let dst_row = op_row(op, plane, w, y);
                let src = &x[src_row..src_row + w];
                let dst = &mut out[dst_row..dst_row + w];
                for xx in x0..x1 {
                    dst[xx] += wt * src[(xx as isize + dx) as usize];
                }
            }
        });
    }
}

fn op_row(plane_index: usize, plane: usize, w: usize, y: usize) -> usize {
    plane_index * plane + y * w
}

fn grad_buf<'a, F: Float>(
    grads: &'a mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

/// Accumulates `g` (shaped like the broadcast output) into operand `v`,
/// summing over repeats when `v` is the broadcast (smaller) side.
fn acc_broadcast<F: Float>(
    grads: &mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    v: Var,
    g: impl Iterator<Item = F>,
) {
    if let Some(buf) = grad_buf(grads, nodes, v) {
        let n = buf.len();
        for (i, x) in g.enumerate() {
            buf[i % n] += x;
        }
    }
}

fn backprop<F: Float>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], i: usize, g: &[F]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_broadcast(grads, nodes, *a, g.iter().copied());
            acc_broadcast(grads, nodes, *b, g.iter().copied());
        }
        Op::Mul(a, b, kind) => {
            let (av, bv) = (val(*a), val(*b));
            let (na, nb) = (av.len(), bv.len());
            match kind {
                Broadcast::Same | Broadcast::Rhs => {
                    acc_broadcast(grads, nodes, *a, g.iter().enumerate().map(|(j, &x)| x * bv[j % nb]));
                    acc_broadcast(grads, nodes, *b, g.iter().enumerate().map(|(j, &x)| x * av[j]));
                }
                Broadcast::Lhs => {
                    acc_broadcast(grads, nodes, *a, g.iter().enumerate().map(|(j, &x)| x * bv[j]));
                    acc_broadcast(grads, nodes, *b, g.iter().enumerate().map(|(j, &x)| x * av[j % na]));
                }
            }
        }
        Op::Scale(a, f) => {
            acc_broadcast(grads, nodes, *a, g.iter().map(|&x| x * *f));
        }
        Op::MatMul(a, b, plan) => {
            let (av, bv) = (val(*a), val(*b));
            match plan {
                MatMulPlan::Flat { m, k, n } => {
                    if let Some(ga) = grad_buf(grads, nodes, *a) {
                        kernels::gemm(*m, *n, *k, g, Layout::Normal, bv, Layout::Transposed, ga, true);
                    }
                    if let Some(gb) = grad_buf(grads, nodes, *b) {
                        kernels::gemm(*k, *m, *n, av, Layout::Transposed, g, Layout::Normal, gb, true);
                    }
                }
                MatMulPlan::Batched {
                    m,
                    k,
                    n,
                    a_map,
                    b_map,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    for (j, (&ia, &ib)) in a_map.iter().zip(b_map).enumerate() {
                        let gj = &g[j * m * n..(j + 1) * m * n];
                        let bj = &bv[ib * k * n..(ib + 1) * k * n];
                        let aj = &av[ia * m * k..(ia + 1) * m * k];
                        if let Some(ga) = grad_buf(grads, nodes, *a) {
                            let dst = &mut ga[ia * m * k..(ia + 1) * m * k];
                            kernels::gemm(m, n, k, gj, Layout::Normal, bj, Layout::Transposed, dst, true);
                        }
                        if let Some(gb) = grad_buf(grads, nodes, *b) {
                            let dst = &mut gb[ib * k * n..(ib + 1) * k * n];
                            kernels::gemm(k, m, n, aj, Layout::Transposed, gj, Layout::Normal, dst, true);
                        }
                    }
                }
            }
        }
        Op::Permute(a, perm) => {
            let inv = kernels::invert_perm(perm);
            let (back, _) = kernels::permute(g, node.value.shape(), &inv)
                .expect("permutation validated in forward pass");
            acc_broadcast(grads, nodes, *a, back.into_iter());
        }
        Op::Reshape(a) => acc_broadcast(grads, nodes, *a, g.iter().copied()),
        Op::Narrow { a, axis, start } => {
            let shape = nodes[a.0].value.shape().to_vec();
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                kernels::narrow_scatter_add(ga, &shape, *axis, *start, g);
            }
        }
        Op::Softmax(a, axis) => {
            let y = node.value.data();
            let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis).unwrap();
            if let Some(ga) = grad_buf(grads, nodes, *a) {
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let dot: F = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            ga[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            axis,
            xhat,
            inv_std,
        } => {
            let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis).unwrap();
            let gd = val(*gamma).to_vec();
            if let Some(gg) = grad_buf(grads, nodes, *gamma) {
                for (p, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    gg[(p / inner) % len] += gv * h;
                }
            }
            if let Some(gb) = grad_buf(grads, nodes, *beta) {
                for (p, &gv) in g.iter().enumerate() {
                    gb[(p / inner) % len] += gv;
                }
            }
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                let n = F::from_f64(len as f64);
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let at = |j: usize| base + j * inner;
                        let mut sum_d = F::zero();
                        let mut sum_dh = F::zero();
                        for j in 0..len {
                            let d = g[at(j)] * gd[j];
                            sum_d += d;
                            sum_dh += d * xhat[at(j)];
                        }
                        let (mean_d, mean_dh) = (sum_d / n, sum_dh / n);
                        let r = inv_std[o * inner + ii];
                        for j in 0..len {
                            let d = g[at(j)] * gd[j];
                            gx[at(j)] += r * (d - mean_d - xhat[at(j)] * mean_dh);
                        }
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let x = val(*a);
            acc_broadcast(
                grads,
                nodes,
                *a,
                g.iter()
                    .zip(x)
                    .map(|(&gv, &x)| gv * (kernels::normal_cdf(x) + x * kernels::normal_pdf(x))),
            );
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            acc_broadcast(
                grads,
                nodes,
                *a,
                g.iter().zip(y).map(|(&gv, &y)| gv * y * (F::one() - y)),
            );
        }
        Op::Conv2d { x, kernel, bias } => {
            let geom = ConvGeom::new(nodes[x.0].value.shape(), nodes[kernel.0].value.shape());
            let (h, w, plane) = (geom.h, geom.w, geom.plane());
            if let Some(b) = bias {
                if let Some(gb) = grad_buf(grads, nodes, *b) {
                    for (pi, chunk) in g.chunks(plane).enumerate() {
                        gb[pi % geom.cout] += chunk.iter().copied().sum::<F>();
                    }
                }
            }
            let xv = val(*x);
            let kv = val(*kernel);
            if let Some(gk) = grad_buf(grads, nodes, *kernel) {
                geom.for_each_tap(|op, ip, tap, dy, dx| {
                    let (y0, y1) = ConvGeom::span(h, dy);
                    let (x0, x1) = ConvGeom::span(w, dx);
                    let mut acc = F::zero();
                    for y in y0..y1 {
                        let src = op_row(ip, plane, w, (y as isize + dy) as usize);
                        let dst = op_row(op, plane, w, y);
                        for xx in x0..x1 {
                            acc += g[dst + xx] * xv[src + (xx as isize + dx) as usize];
                        }
                    }
                    gk[tap] += acc;
                });
            }
            if let Some(gx) = grad_buf(grads, nodes, *x) {
                geom.for_each_tap(|op, ip, tap, dy, dx| {
                    let wt = kv[tap];
                    let (y0, y1) = ConvGeom::span(h, dy);
                    let (x0, x1) = ConvGeom::span(w, dx);
                    for y in y0..y1 {
                        let src = op_row(ip, plane, w, (y as isize + dy) as usize);
                        let dst = op_row(op, plane, w, y);
                        for xx in x0..x1 {
                            gx[src + (xx as isize + dx) as usize] += wt * g[dst + xx];
                        }
                    }
                });
            }
        }
        Op::SigmoidBce { logits, targets } => {
            let z = val(*logits);
            let scale = g[0] / F::from_f64(z.len() as f64);
            acc_broadcast(
                grads,
                nodes,
                *logits,
                z.iter()
                    .zip(targets)
                    .map(|(&z, &t)| (kernels::sigmoid(z) - t) * scale),
            );
        }
        Op::Sum(a) => {
            let n = nodes[a.0].value.numel();
            acc_broadcast(grads, nodes, *a, std::iter::repeat_n(g[0], n));
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.numel();
            let v = g[0] / F::from_f64(n as f64);
            acc_broadcast(grads, nodes, *a, std::iter::repeat_n(v, n));
        }
    }
}
