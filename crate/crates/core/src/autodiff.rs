//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! replays the records in reverse, accumulating gradients into the leaves
//! that were marked trainable. Complex-valued math is expressed as pairs of
//! real tensors ([`ComplexPair`]), so the engine itself only ever
//! differentiates real scalars.
//!
//! Values, gradients, and operation records live in parallel arrays, which
//! lets backward borrow values immutably while scattering into gradients
//! without copying either. All kernels run sequentially with a fixed
//! reduction order; given the same inputs, forward and backward are bitwise
//! reproducible.

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Complex matrix on the tape: two same-shaped real tensors.
#[derive(Clone, Copy, Debug)]
pub struct ComplexPair {
    pub re: NodeId,
    pub im: NodeId,
}

#[derive(Debug, PartialEq)]
pub enum AutodiffError {
    /// `inverse`/`cinverse` hit a pivot below tolerance.
    Singular,
}

impl std::fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AutodiffError::Singular => write!(f, "matrix is singular within pivot tolerance 1e-12"),
        }
    }
}

impl std::error::Error for AutodiffError {}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, scale: f64 },
    /// y = x.W + b, optionally through ReLU; fused fully-connected layer.
    Linear { x: NodeId, w: NodeId, b: NodeId, relu: bool },
    /// Real part of a complex product: ar.br - ai.bi.
    CMulRe { ar: NodeId, ai: NodeId, br: NodeId, bi: NodeId },
    /// Imaginary part of a complex product: ar.bi + ai.br.
    CMulIm { ar: NodeId, ai: NodeId, br: NodeId, bi: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Row vector added to every row of a matrix.
    AddRow { a: NodeId, row: NodeId },
    Neg { a: NodeId },
    /// y = x * mul + add, with f64 constants; only mul matters in backward.
    Affine { a: NodeId, mul: f64 },
    Relu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, mu: Vec<f64>, sig: Vec<f64> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Reshape { a: NodeId },
    Transpose2 { a: NodeId },
    Permute { a: NodeId, perm: Vec<usize> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, starts: Vec<usize> },
    /// Real square-matrix inverse; backward uses dA = -Y^T G Y^T.
    Inverse { a: NodeId },
    /// Cayley map of a real symmetric matrix S (the dimensionless Z0*B):
    /// Phi = (I + jS)^-1 (I - jS), packed as [2, n, n] re/im planes.
    /// Caches (I + jS)^-1 for the backward pass, which uses
    /// dL/dS = Re(-j A^-1 conj(G) (Phi + I)) for the complex cotangent G.
    Cayley { s: NodeId, inv_re: Vec<f64>, inv_im: Vec<f64> },
    /// Gathers per-(subframe, user) complex N x U matrices into the
    /// standardized observation tensor [2, NU, K, tau]; entries are
    /// column-major vectorized and mapped through x * mul + add.
    PackObs { parts: Vec<ComplexPair>, mul: f64 },
    /// Fused uplink reception: applies per-(subframe, group) scattering
    /// blocks to constant channel factors, adds constant noise, and packs
    /// the standardized observation tensor in one node.
    Reception { phis: Vec<NodeId>, consts: Box<ReceptionConsts> },
}

/// Constant factors of the fused reception op. Complex matrices are stored
/// as separate re/im row-major buffers.
pub struct ReceptionConsts {
    pub n_bs: usize,
    pub u_ant: usize,
    pub users: usize,
    pub groups: usize,
    pub group_size: usize,
    pub tau: usize,
    /// Per group: N x M-bar, scaled by sqrt(P_u).
    pub h_it_re: Vec<Vec<f64>>,
    pub h_it_im: Vec<Vec<f64>>,
    /// Per (user, group): M-bar x U.
    pub h_ri_re: Vec<Vec<f64>>,
    pub h_ri_im: Vec<Vec<f64>>,
    /// Per (subframe, user): N x U decorrelated noise.
    pub noise_re: Vec<Vec<f64>>,
    pub noise_im: Vec<Vec<f64>>,
    /// Standardization x * mul + add.
    pub mul: f64,
    pub add: f64,
}

/// Recycles node buffers across graphs; bucketed by exact length, since the
/// per-sample graphs repeat the same tensor sizes.
#[derive(Default)]
struct BufferPool {
    buckets: std::collections::HashMap<usize, Vec<Vec<f64>>>,
}

impl BufferPool {
    fn take(&mut self, len: usize) -> Option<Vec<f64>> {
        self.buckets.get_mut(&len)?.pop()
    }

    fn zeroed(&mut self, len: usize) -> Vec<f64> {
        match self.take(len) {
            Some(mut v) => {
                v.fill(0.0);
                v
            }
            None => vec![0.0; len],
        }
    }

    fn copy_of(&mut self, src: &[f64]) -> Vec<f64> {
        match self.take(src.len()) {
            Some(mut v) => {
                v.copy_from_slice(src);
                v
            }
            None => src.to_vec(),
        }
    }

    fn give(&mut self, v: Vec<f64>) {
        if !v.is_empty() {
            let len = v.len();
            self.buckets.entry(len).or_default().push(v);
        }
    }
}

/// Records a computation graph and runs backpropagation over it.
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    needs: Vec<bool>,
    ops: Vec<Op>,
    pool: BufferPool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// matmul kernels; j-innermost so LLVM vectorizes the contiguous row updates
// ---------------------------------------------------------------------------

/// c += a(m x k) . b(k x n)
fn matmul_acc_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Dot product with four fixed-order partial sums; the independent
/// accumulators vectorize where a plain sequential reduction cannot, and the
/// combine order is fixed so results stay bitwise reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / 4 * 4;
    let mut s = [0.0f64; 4];
    let mut i = 0;
    while i < chunks {
        s[0] += a[i] * b[i];
        s[1] += a[i + 1] * b[i + 1];
        s[2] += a[i + 2] * b[i + 2];
        s[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    ((s[0] + s[1]) + (s[2] + s[3])) + tail
}

/// c += scale * a(m x n) . b(k x n)^T  -> (m x k)
fn matmul_acc_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize, scale: f64) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            crow[p] += scale * dot(arow, brow);
        }
    }
}

/// c -= a(m x k) . b(k x n)
fn matmul_acc_neg(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] -= av * brow[j];
            }
        }
    }
}

/// c += scale * a(m x k)^T . b(m x n)  -> (k x n)
fn matmul_acc_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, scale: f64) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = scale * a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// LU inverse with partial pivoting on a row-major square matrix; `a` is the
/// working copy (destroyed), `inv` receives the result (must be zeroed).
/// Pivot tolerance is 1e-12 relative to the largest initial magnitude.
fn lu_inverse_into(a: &mut [f64], inv: &mut [f64], n: usize) -> Result<(), AutodiffError> {
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let tol = 1e-12 * scale;
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in (col + 1)..n {
            let m = a[r * n + col].abs();
            if m > best {
                best = m;
                piv = r;
            }
        }
        if best <= tol {
            return Err(AutodiffError::Singular);
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let d = a[col * n + col];
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            for j in 0..n {
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    for r in 0..n {
        let d = a[r * n + r];
        for j in 0..n {
            inv[r * n + j] /= d;
        }
    }
    Ok(())
}

const LN_STD_FLOOR: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            ops: Vec::new(),
            pool: BufferPool::default(),
        }
    }

    /// Clears the graph and recycles every node buffer for the next build.
    /// Keeping one tape per worker makes per-sample graphs allocation-free
    /// in the steady state.
    pub fn reset(&mut self) {
        for t in self.values.drain(..) {
            self.pool.give(t.into_data());
        }
        for g in self.grads.drain(..).flatten() {
            self.pool.give(g);
        }
        self.needs.clear();
        self.ops.clear();
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.values.push(value);
        self.grads.push(None);
        self.needs.push(needs_grad);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    #[inline]
    fn needs(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    /// Tensor value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient of a leaf after [`Tape::backward`]; zeros if it never
    /// received contributions. Interior-node gradients are consumed during
    /// the backward sweep.
    pub fn grad(&self, id: NodeId) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.values[id.0].numel()],
        }
    }

    /// Trainable leaf: gradients will be accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Trainable leaf copied from a slice through the buffer pool.
    pub fn leaf_copied(&mut self, shape: &[usize], data: &[f64]) -> NodeId {
        let d = self.pool.copy_of(data);
        self.push(Tensor::new(shape.to_vec(), d), true, Op::Leaf)
    }

    /// Constant leaf: no gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    // -- arithmetic ---------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_scaled(a, b, 1.0)
    }

    /// (a . b) * scale with the scaling fused into the product pass.
    pub fn matmul_scaled(&mut self, a: NodeId, b: NodeId, scale: f64) -> NodeId {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(av.shape().len(), 2, "matmul lhs must be rank 2");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be rank 2");
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims: {m}x{k} . {k2}x{n}");
        let out = {
            let Tape { values, pool, .. } = self;
            let mut out = pool.zeroed(m * n);
            matmul_acc_nn(&mut out, values[a.0].data(), values[b.0].data(), m, k, n);
            if scale != 1.0 {
                for x in &mut out {
                    *x *= scale;
                }
            }
            out
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out), needs, Op::MatMul { a, b, scale })
    }

    /// Fused fully-connected layer: x(m x k) . w(k x n) + b(n), optionally
    /// through ReLU.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId, relu: bool) -> NodeId {
        let (xv, wv, bv) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        assert_eq!(xv.shape().len(), 2, "linear input must be rank 2");
        let (m, k) = (xv.shape()[0], xv.shape()[1]);
        let (k2, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(k, k2, "linear inner dims: {m}x{k} . {k2}x{n}");
        assert_eq!(bv.numel(), n, "linear bias length");
        let out = {
            let Tape { values, pool, .. } = self;
            let mut out = pool.zeroed(m * n);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(values[b.0].data());
            }
            matmul_acc_nn(&mut out, values[x.0].data(), values[w.0].data(), m, k, n);
            if relu {
                for v in &mut out {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            out
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out), needs, Op::Linear { x, w, b, relu })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, data) = {
            let Tape { values, pool, .. } = self;
            let (av, bv) = (&values[a.0], &values[b.0]);
            assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
            let mut d = pool.copy_of(av.data());
            for (x, y) in d.iter_mut().zip(bv.data()) {
                *x += y;
            }
            (av.shape().to_vec(), d)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), needs, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, data) = {
            let Tape { values, pool, .. } = self;
            let (av, bv) = (&values[a.0], &values[b.0]);
            assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
            let mut d = pool.copy_of(av.data());
            for (x, y) in d.iter_mut().zip(bv.data()) {
                *x -= y;
            }
            (av.shape().to_vec(), d)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), needs, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, data) = {
            let Tape { values, pool, .. } = self;
            let (av, bv) = (&values[a.0], &values[b.0]);
            assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
            let mut d = pool.copy_of(av.data());
            for (x, y) in d.iter_mut().zip(bv.data()) {
                *x *= y;
            }
            (av.shape().to_vec(), d)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), needs, Op::Mul { a, b })
    }

    /// Adds a length-n row vector to every row of an (m x n) matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (&self.values[a.0], &self.values[row.0]);
        assert_eq!(av.shape().len(), 2, "add_row lhs must be rank 2");
        let n = av.shape()[1];
        assert_eq!(rv.numel(), n, "add_row row length");
        let (shape, data) = {
            let Tape { values, pool, .. } = self;
            let mut d = pool.copy_of(values[a.0].data());
            for r in d.chunks_mut(n) {
                for (x, y) in r.iter_mut().zip(values[row.0].data()) {
                    *x += y;
                }
            }
            (values[a.0].shape().to_vec(), d)
        };
        let needs = self.needs(a) || self.needs(row);
        self.push(Tensor::new(shape, data), needs, Op::AddRow { a, row })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let (shape, data) = {
            let Tape { values, pool, .. } = self;
            let mut d = pool.copy_of(values[a.0].data());
            for x in d.iter_mut() {
                *x = -*x;
            }
            (values[a.0].shape().to_vec(), d)
        };
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), needs, Op::Neg { a })
    }

    /// y = x * mul + add with scalar constants.
    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let (shape, data) = {
            let Tape { values, pool, .. } = self;
            let mut d = pool.copy_of(values[a.0].data());
            for x in d.iter_mut() {
                *x = *x * mul + add;
            }
            (values[a.0].shape().to_vec(), d)
        };
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), needs, Op::Affine { a, mul })
    }

    pub fn scale(&mut self, a: NodeId, mul: f64) -> NodeId {
        self.affine(a, mul, 0.0)
    }

    // -- activations and normalization ---------------------------------------

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (shape, data) = {
            let Tape { values, pool, .. } = self;
            let mut d = pool.copy_of(values[a.0].data());
            for x in d.iter_mut() {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
            (values[a.0].shape().to_vec(), d)
        };
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), needs, Op::Relu { a })
    }

    /// Softmax along the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let shape = {
            let av = &self.values[a.0];
            assert_eq!(av.shape().len(), 2, "softmax_rows needs rank 2");
            av.shape().to_vec()
        };
        let n = shape[1];
        let mut data = {
            let Tape { values, pool, .. } = self;
            pool.copy_of(values[a.0].data())
        };
        for row in data.chunks_mut(n) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let out = Tensor::new(shape, data);
        let needs = self.needs(a);
        self.push(out, needs, Op::SoftmaxRows { a })
    }

    /// Layer normalization along the last axis of a rank-2 tensor, followed by
    /// the learnable affine transform. The per-row std is floored at 1e-5 so a
    /// constant row normalizes to zero (and then picks up only the bias).
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let av = &self.values[a.0];
        assert_eq!(av.shape().len(), 2, "layer_norm needs rank 2");
        let (m, n) = (av.shape()[0], av.shape()[1]);
        assert_eq!(self.values[gain.0].numel(), n, "layer_norm gain length");
        assert_eq!(self.values[bias.0].numel(), n, "layer_norm bias length");
        let mut mu = vec![0.0; m];
        let mut sig = vec![0.0; m];
        let data = {
            let Tape { values, pool, .. } = self;
            let mut data = pool.zeroed(m * n);
            let av = &values[a.0];
            let gv = values[gain.0].data();
            let bv = values[bias.0].data();
            for i in 0..m {
                let row = &av.data()[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let s = var.sqrt().max(LN_STD_FLOOR);
                mu[i] = mean;
                sig[i] = s;
                for j in 0..n {
                    data[i * n + j] = (row[j] - mean) / s * gv[j] + bv[j];
                }
            }
            data
        };
        let out = Tensor::new(vec![m, n], data);
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        self.push(out, needs, Op::LayerNorm { a, gain, bias, mu, sig })
    }

    // -- reductions -----------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.values[a.0].data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), needs, Op::Sum { a })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.values[a.0];
        let s: f64 = v.data().iter().sum();
        let m = s / v.numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(m), needs, Op::Mean { a })
    }

    // -- shape ops --------------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let av = &self.values[a.0];
        assert_eq!(
            shape.iter().product::<usize>(),
            av.numel(),
            "reshape must preserve element count"
        );
        let data = {
            let Tape { values, pool, .. } = self;
            pool.copy_of(values[a.0].data())
        };
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), needs, Op::Reshape { a })
    }

    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        let av = &self.values[a.0];
        assert_eq!(av.shape().len(), 2, "transpose2 needs rank 2");
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let data = {
            let Tape { values, pool, .. } = self;
            let src = values[a.0].data();
            let mut d = pool.zeroed(m * n);
            for i in 0..m {
                for j in 0..n {
                    d[j * m + i] = src[i * n + j];
                }
            }
            d
        };
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n, m], data), needs, Op::Transpose2 { a })
    }

    /// Axis permutation for arbitrary rank.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        let av = &self.values[a.0];
        let rank = av.shape().len();
        assert_eq!(perm.len(), rank, "permute rank mismatch");
        let mut seen = vec![false; rank];
        for &p in perm {
            assert!(p < rank && !seen[p], "invalid permutation");
            seen[p] = true;
        }
        let in_shape = av.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = {
            let Tape { values, pool, .. } = self;
            let mut d = pool.zeroed(values[a.0].numel());
            permute_into(&mut d, values[a.0].data(), &in_shape, perm);
            d
        };
        let needs = self.needs(a);
        self.push(Tensor::new(out_shape, data), needs, Op::Permute { a, perm: perm.to_vec() })
    }

    /// Concatenation along `axis`; all parts must agree on the other axes.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero parts");
        let rank = self.values[parts[0].0].shape().len();
        assert!(axis < rank, "concat axis out of range");
        let mut out_shape = self.values[parts[0].0].shape().to_vec();
        let mut axis_total = 0;
        for &p in parts {
            let s = self.values[p.0].shape();
            assert_eq!(s.len(), rank, "concat rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(s[d], out_shape[d], "concat off-axis extent mismatch");
                }
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let data = {
            let Tape { values, pool, .. } = self;
            let mut data = pool.zeroed(outer * axis_total * inner);
            let mut offset = 0;
            for &p in parts {
                let pv = &values[p.0];
                let pa = pv.shape()[axis];
                for o in 0..outer {
                    let src = &pv.data()[o * pa * inner..(o + 1) * pa * inner];
                    let dst_start = (o * axis_total + offset) * inner;
                    data[dst_start..dst_start + pa * inner].copy_from_slice(src);
                }
                offset += pa;
            }
            data
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(out_shape, data), needs, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Rectangular sub-tensor starting at `starts` with extents `lens`.
    pub fn slice(&mut self, a: NodeId, starts: &[usize], lens: &[usize]) -> NodeId {
        let av = &self.values[a.0];
        let rank = av.shape().len();
        assert_eq!(starts.len(), rank, "slice starts rank");
        assert_eq!(lens.len(), rank, "slice lens rank");
        for d in 0..rank {
            assert!(starts[d] + lens[d] <= av.shape()[d], "slice out of bounds on axis {d}");
        }
        let total: usize = lens.iter().product();
        let data = {
            let Tape { values, pool, .. } = self;
            let mut d = pool.zeroed(total);
            gather_slice_into(&mut d, values[a.0].data(), values[a.0].shape(), starts, lens);
            d
        };
        let needs = self.needs(a);
        self.push(Tensor::new(lens.to_vec(), data), needs, Op::Slice { a, starts: starts.to_vec() })
    }

    /// Real square-matrix inverse (LU, partial pivoting, pivot tolerance 1e-12).
    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let av = &self.values[a.0];
        assert_eq!(av.shape().len(), 2, "inverse needs rank 2");
        let n = av.shape()[0];
        assert_eq!(n, av.shape()[1], "inverse needs a square matrix");
        let inv = {
            let Tape { values, pool, .. } = self;
            let mut work = pool.copy_of(values[a.0].data());
            let mut out = pool.zeroed(n * n);
            let r = lu_inverse_into(&mut work, &mut out, n);
            pool.give(work);
            if r.is_err() {
                pool.give(out);
                return Err(AutodiffError::Singular);
            }
            out
        };
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![n, n], inv), needs, Op::Inverse { a }))
    }

    // -- complex composites ------------------------------------------------------

    pub fn complex(&mut self, re: NodeId, im: NodeId) -> ComplexPair {
        assert_eq!(
            self.values[re.0].shape(),
            self.values[im.0].shape(),
            "complex pair shape mismatch"
        );
        ComplexPair { re, im }
    }

    /// Complex matrix product over real pairs:
    /// (ar.br - ai.bi, ar.bi + ai.br), as two fused kernels.
    pub fn cmatmul(&mut self, a: ComplexPair, b: ComplexPair) -> ComplexPair {
        let (m, k) = {
            let s = self.values[a.re.0].shape();
            assert_eq!(s.len(), 2, "cmatmul lhs must be rank 2");
            (s[0], s[1])
        };
        let (k2, n) = {
            let s = self.values[b.re.0].shape();
            assert_eq!(s.len(), 2, "cmatmul rhs must be rank 2");
            (s[0], s[1])
        };
        assert_eq!(k, k2, "cmatmul inner dims: {m}x{k} . {k2}x{n}");
        let needs = self.needs(a.re) || self.needs(a.im) || self.needs(b.re) || self.needs(b.im);

        let re = {
            let Tape { values, pool, .. } = self;
            let mut re = pool.zeroed(m * n);
            matmul_acc_nn(&mut re, values[a.re.0].data(), values[b.re.0].data(), m, k, n);
            matmul_acc_neg(&mut re, values[a.im.0].data(), values[b.im.0].data(), m, k, n);
            re
        };
        let re = self.push(
            Tensor::new(vec![m, n], re),
            needs,
            Op::CMulRe { ar: a.re, ai: a.im, br: b.re, bi: b.im },
        );

        let im = {
            let Tape { values, pool, .. } = self;
            let mut im = pool.zeroed(m * n);
            matmul_acc_nn(&mut im, values[a.re.0].data(), values[b.im.0].data(), m, k, n);
            matmul_acc_nn(&mut im, values[a.im.0].data(), values[b.re.0].data(), m, k, n);
            im
        };
        let im = self.push(
            Tensor::new(vec![m, n], im),
            needs,
            Op::CMulIm { ar: a.re, ai: a.im, br: b.re, bi: b.im },
        );
        ComplexPair { re, im }
    }

    pub fn cadd(&mut self, a: ComplexPair, b: ComplexPair) -> ComplexPair {
        ComplexPair { re: self.add(a.re, b.re), im: self.add(a.im, b.im) }
    }

    /// Complex inverse via the real 2n x 2n block system [[Re,-Im],[Im,Re]].
    pub fn cinverse(&mut self, a: ComplexPair) -> Result<ComplexPair, AutodiffError> {
        let n = {
            let v = self.values[a.re.0].shape();
            assert_eq!(v.len(), 2, "cinverse needs rank 2");
            assert_eq!(v[0], v[1], "cinverse needs a square matrix");
            v[0]
        };
        let neg_im = self.neg(a.im);
        let top = self.concat(&[a.re, neg_im], 1);
        let bot = self.concat(&[a.im, a.re], 1);
        let block = self.concat(&[top, bot], 0);
        let inv = self.inverse(block)?;
        let re = self.slice(inv, &[0, 0], &[n, n]);
        let im = self.slice(inv, &[n, 0], &[n, n]);
        Ok(ComplexPair { re, im })
    }

    /// Fused Cayley map: S (n x n real, symmetric) to the scattering pair
    /// packed as a [2, n, n] tensor (re plane, im plane). Equivalent to
    /// cinverse/cmatmul over (I + jS, I - jS) but one node.
    pub fn cayley(&mut self, s: NodeId) -> Result<NodeId, AutodiffError> {
        let n = {
            let v = self.values[s.0].shape();
            assert_eq!(v.len(), 2, "cayley needs rank 2");
            assert_eq!(v[0], v[1], "cayley needs a square matrix");
            v[0]
        };
        // A = I + jS inverted via the real 2n x 2n embedding [[I, -S], [S, I]]
        let (inv_re, inv_im, packed) = {
            let Tape { values, pool, .. } = self;
            let sv = values[s.0].data();
            let m = 2 * n;
            let mut block = pool.zeroed(m * m);
            for i in 0..n {
                block[i * m + i] = 1.0;
                block[(n + i) * m + (n + i)] = 1.0;
                for j in 0..n {
                    block[i * m + (n + j)] = -sv[i * n + j];
                    block[(n + i) * m + j] = sv[i * n + j];
                }
            }
            let mut binv = pool.zeroed(m * m);
            let r = lu_inverse_into(&mut block, &mut binv, m);
            pool.give(block);
            if r.is_err() {
                pool.give(binv);
                return Err(AutodiffError::Singular);
            }
            let mut inv_re = pool.zeroed(n * n);
            let mut inv_im = pool.zeroed(n * n);
            for i in 0..n {
                for j in 0..n {
                    inv_re[i * n + j] = binv[i * m + j];
                    inv_im[i * n + j] = binv[(n + i) * m + j];
                }
            }
            pool.give(binv);
            // Phi = A^-1 (I - jS): re = invRe + invIm S, im = invIm - invRe S
            let mut packed = pool.zeroed(2 * n * n);
            {
                let (re_plane, im_plane) = packed.split_at_mut(n * n);
                re_plane.copy_from_slice(&inv_re);
                matmul_acc_nn(re_plane, &inv_im, sv, n, n, n);
                im_plane.copy_from_slice(&inv_im);
                matmul_acc_neg(im_plane, &inv_re, sv, n, n, n);
            }
            (inv_re, inv_im, packed)
        };
        let needs = self.needs(s);
        Ok(self.push(
            Tensor::new(vec![2, n, n], packed),
            needs,
            Op::Cayley { s, inv_re, inv_im },
        ))
    }

    /// Packs per-(subframe, user) complex N x U reception matrices into the
    /// standardized observation tensor [2, NU, K, tau]. `parts` is indexed
    /// [t][k]; entries are column-major vectorized (nu = u*N + n) and mapped
    /// through x * mul + add.
    pub fn pack_observation(
        &mut self,
        parts: &[Vec<ComplexPair>],
        mul: f64,
        add: f64,
    ) -> NodeId {
        let tau = parts.len();
        assert!(tau >= 1, "pack_observation needs at least one subframe");
        let k_users = parts[0].len();
        let (n_bs, u_ant) = {
            let s = self.values[parts[0][0].re.0].shape();
            (s[0], s[1])
        };
        let nu = n_bs * u_ant;
        let flat: Vec<ComplexPair> = parts.iter().flat_map(|row| row.iter().copied()).collect();
        let data = {
            let Tape { values, pool, .. } = self;
            let mut d = pool.zeroed(2 * nu * k_users * tau);
            for (t, row) in parts.iter().enumerate() {
                assert_eq!(row.len(), k_users, "ragged user rows");
                for (k, pair) in row.iter().enumerate() {
                    let re = values[pair.re.0].data();
                    let im = values[pair.im.0].data();
                    for u in 0..u_ant {
                        for b in 0..n_bs {
                            let r = u * n_bs + b; // column-major vec index
                            let src = b * u_ant + u;
                            d[((r * k_users) + k) * tau + t] = re[src] * mul + add;
                            d[(((nu + r) * k_users) + k) * tau + t] = im[src] * mul + add;
                        }
                    }
                }
            }
            d
        };
        let needs = flat.iter().any(|p| self.needs(p.re) || self.needs(p.im));
        self.push(
            Tensor::new(vec![2, nu, k_users, tau], data),
            needs,
            Op::PackObs { parts: flat, mul },
        )
    }

    /// Fused Phase-II reception over all subframes. `phis` is indexed
    /// [t][g] with each node a packed [2, mb, mb] scattering block (the
    /// [`Tape::cayley`] output). Produces the standardized observation
    /// tensor [2, NU, K, tau]:
    /// obs(k, t) = vec(sum_g sqrt(P_u) H_IT,g Phi_g^t H_RI,k,g + N_kt)
    /// mapped through x * mul + add.
    pub fn reception(&mut self, phis: &[Vec<NodeId>], consts: ReceptionConsts) -> NodeId {
        let (n, u, k_users, groups, mb, tau) = (
            consts.n_bs,
            consts.u_ant,
            consts.users,
            consts.groups,
            consts.group_size,
            consts.tau,
        );
        assert_eq!(phis.len(), tau, "one scattering row per subframe");
        let nu = n * u;
        let flat: Vec<NodeId> = phis.iter().flat_map(|row| {
            assert_eq!(row.len(), groups, "one block per group");
            row.iter().copied()
        }).collect();
        for &p in &flat {
            assert_eq!(self.values[p.0].shape(), &[2, mb, mb], "packed scattering block");
        }
        let data = {
            let Tape { values, pool, .. } = self;
            let mut out = pool.zeroed(2 * nu * k_users * tau);
            // scratch: E = H_IT,g Phi (N x mb), Y = E H_RI (N x u)
            let mut e_re = vec![0.0; n * mb];
            let mut e_im = vec![0.0; n * mb];
            let mut y_re = vec![0.0; n * u];
            let mut y_im = vec![0.0; n * u];
            for t in 0..tau {
                for k in 0..k_users {
                    y_re.copy_from_slice(&consts.noise_re[t * k_users + k]);
                    y_im.copy_from_slice(&consts.noise_im[t * k_users + k]);
                    for g in 0..groups {
                        let packed = values[flat[t * groups + g].0].data();
                        let (p_re, p_im) = packed.split_at(mb * mb);
                        e_re.fill(0.0);
                        e_im.fill(0.0);
                        // E = A Phi with A = sqrt(Pu) H_IT,g
                        let a_re = &consts.h_it_re[g];
                        let a_im = &consts.h_it_im[g];
                        matmul_acc_nn(&mut e_re, a_re, p_re, n, mb, mb);
                        matmul_acc_neg(&mut e_re, a_im, p_im, n, mb, mb);
                        matmul_acc_nn(&mut e_im, a_re, p_im, n, mb, mb);
                        matmul_acc_nn(&mut e_im, a_im, p_re, n, mb, mb);
                        // Y += E B with B = H_RI,k,g
                        let b_re = &consts.h_ri_re[k * groups + g];
                        let b_im = &consts.h_ri_im[k * groups + g];
                        matmul_acc_nn(&mut y_re, &e_re, b_re, n, mb, u);
                        matmul_acc_neg(&mut y_re, &e_im, b_im, n, mb, u);
                        matmul_acc_nn(&mut y_im, &e_re, b_im, n, mb, u);
                        matmul_acc_nn(&mut y_im, &e_im, b_re, n, mb, u);
                    }
                    for uu in 0..u {
                        for b in 0..n {
                            let r = uu * n + b; // column-major vec index
                            let src = b * u + uu;
                            out[((r * k_users) + k) * tau + t] =
                                y_re[src] * consts.mul + consts.add;
                            out[(((nu + r) * k_users) + k) * tau + t] =
                                y_im[src] * consts.mul + consts.add;
                        }
                    }
                }
            }
            out
        };
        let needs = flat.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(vec![2, nu, k_users, tau], data),
            needs,
            Op::Reception { phis: flat, consts: Box::new(consts) },
        )
    }

    // -- backward ------------------------------------------------------------------

    /// Backpropagates from a scalar node, accumulating gradients into every
    /// trainable leaf reachable from it.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.values[loss.0].numel(), 1, "backward needs a scalar loss");
        let Tape { values, grads, needs, ops, pool } = self;
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !needs[idx] || matches!(ops[idx], Op::Leaf) {
                continue;
            }
            // interior gradients are consumed as the sweep passes them
            let Some(g) = grads[idx].take() else { continue };
            backprop_one(idx, &g, &ops[idx], values, grads, needs, pool);
            pool.give(g);
        }
    }
}

fn grad_buf<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    values: &[Tensor],
    pool: &mut BufferPool,
    id: NodeId,
) -> &'g mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| pool.zeroed(values[id.0].numel()))
}

fn backprop_one(
    idx: usize,
    g: &[f64],
    op: &Op,
    values: &[Tensor],
    grads: &mut [Option<Vec<f64>>],
    needs: &[bool],
    pool: &mut BufferPool,
) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, scale } => {
            let (m, k) = {
                let s = values[a.0].shape();
                (s[0], s[1])
            };
            let n = values[b.0].shape()[1];
            if needs[a.0] {
                let bv = values[b.0].data();
                let ga = grad_buf(grads, values, pool, *a);
                // ga += scale * g . b^T
                matmul_acc_nt(ga, g, bv, m, n, k, *scale);
            }
            if needs[b.0] {
                let av = values[a.0].data();
                let gb = grad_buf(grads, values, pool, *b);
                // gb += scale * a^T . g
                matmul_acc_tn(gb, av, g, m, k, n, *scale);
            }
        }
        Op::Linear { x, w, b, relu } => {
            let (m, k) = {
                let s = values[x.0].shape();
                (s[0], s[1])
            };
            let n = values[w.0].shape()[1];
            // mask the upstream gradient where ReLU clamped
            let mut masked: Option<Vec<f64>> = None;
            let gm: &[f64] = if *relu {
                let out = values[idx].data();
                let mut m = pool.copy_of(g);
                for (y, o) in m.iter_mut().zip(out) {
                    if *o <= 0.0 {
                        *y = 0.0;
                    }
                }
                masked = Some(m);
                masked.as_deref().unwrap()
            } else {
                g
            };
            if needs[x.0] {
                let wv = values[w.0].data();
                let gx = grad_buf(grads, values, pool, *x);
                matmul_acc_nt(gx, gm, wv, m, n, k, 1.0);
            }
            if needs[w.0] {
                let xv = values[x.0].data();
                let gw = grad_buf(grads, values, pool, *w);
                matmul_acc_tn(gw, xv, gm, m, k, n, 1.0);
            }
            if needs[b.0] {
                let gb = grad_buf(grads, values, pool, *b);
                for chunk in gm.chunks(n) {
                    for (x, y) in gb.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
            }
            if let Some(m) = masked {
                pool.give(m);
            }
        }
        Op::CMulRe { ar, ai, br, bi } => {
            // re = ar.br - ai.bi
            let (m, k) = {
                let s = values[ar.0].shape();
                (s[0], s[1])
            };
            let n = values[br.0].shape()[1];
            if needs[ar.0] {
                matmul_acc_nt(grad_buf(grads, values, pool, *ar), g, values[br.0].data(), m, n, k, 1.0);
            }
            if needs[br.0] {
                matmul_acc_tn(grad_buf(grads, values, pool, *br), values[ar.0].data(), g, m, k, n, 1.0);
            }
            if needs[ai.0] {
                matmul_acc_nt(grad_buf(grads, values, pool, *ai), g, values[bi.0].data(), m, n, k, -1.0);
            }
            if needs[bi.0] {
                matmul_acc_tn(grad_buf(grads, values, pool, *bi), values[ai.0].data(), g, m, k, n, -1.0);
            }
        }
        Op::CMulIm { ar, ai, br, bi } => {
            // im = ar.bi + ai.br
            let (m, k) = {
                let s = values[ar.0].shape();
                (s[0], s[1])
            };
            let n = values[br.0].shape()[1];
            if needs[ar.0] {
                matmul_acc_nt(grad_buf(grads, values, pool, *ar), g, values[bi.0].data(), m, n, k, 1.0);
            }
            if needs[bi.0] {
                matmul_acc_tn(grad_buf(grads, values, pool, *bi), values[ar.0].data(), g, m, k, n, 1.0);
            }
            if needs[ai.0] {
                matmul_acc_nt(grad_buf(grads, values, pool, *ai), g, values[br.0].data(), m, n, k, 1.0);
            }
            if needs[br.0] {
                matmul_acc_tn(grad_buf(grads, values, pool, *br), values[ai.0].data(), g, m, k, n, 1.0);
            }
        }
        Op::Add { a, b } => {
            if needs[a.0] {
                for (x, y) in grad_buf(grads, values, pool, *a).iter_mut().zip(g) {
                    *x += y;
                }
            }
            if needs[b.0] {
                for (x, y) in grad_buf(grads, values, pool, *b).iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        Op::Sub { a, b } => {
            if needs[a.0] {
                for (x, y) in grad_buf(grads, values, pool, *a).iter_mut().zip(g) {
                    *x += y;
                }
            }
            if needs[b.0] {
                for (x, y) in grad_buf(grads, values, pool, *b).iter_mut().zip(g) {
                    *x -= y;
                }
            }
        }
        Op::Mul { a, b } => {
            if needs[a.0] {
                let bv = values[b.0].data();
                for ((x, y), bb) in grad_buf(grads, values, pool, *a).iter_mut().zip(g).zip(bv) {
                    *x += y * bb;
                }
            }
            if needs[b.0] {
                let av = values[a.0].data();
                for ((x, y), aa) in grad_buf(grads, values, pool, *b).iter_mut().zip(g).zip(av) {
                    *x += y * aa;
                }
            }
        }
        Op::AddRow { a, row } => {
            let n = values[row.0].numel();
            if needs[a.0] {
                for (x, y) in grad_buf(grads, values, pool, *a).iter_mut().zip(g) {
                    *x += y;
                }
            }
            if needs[row.0] {
                let gr = grad_buf(grads, values, pool, *row);
                for chunk in g.chunks(n) {
                    for (x, y) in gr.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
            }
        }
        Op::Neg { a } => {
            if needs[a.0] {
                for (x, y) in grad_buf(grads, values, pool, *a).iter_mut().zip(g) {
                    *x -= y;
                }
            }
        }
        Op::Affine { a, mul } => {
            if needs[a.0] {
                for (x, y) in grad_buf(grads, values, pool, *a).iter_mut().zip(g) {
                    *x += y * mul;
                }
            }
        }
        Op::Relu { a } => {
            if needs[a.0] {
                let av = values[a.0].data();
                for ((x, y), v) in grad_buf(grads, values, pool, *a).iter_mut().zip(g).zip(av) {
                    if *v > 0.0 {
                        *x += y;
                    }
                }
            }
        }
        Op::SoftmaxRows { a } => {
            if needs[a.0] {
                let sv = values[idx].data();
                let n = values[idx].shape()[1];
                let ga = grad_buf(grads, values, pool, *a);
                for (r, (srow, grow)) in sv.chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, y)| s * y).sum();
                    let garow = &mut ga[r * n..(r + 1) * n];
                    for j in 0..n {
                        garow[j] += srow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, gain, bias, mu, sig } => {
            let (m, n) = {
                let s = values[idx].shape();
                (s[0], s[1])
            };
            let av = values[a.0].data();
            let gv = values[gain.0].data();
            if needs[gain.0] {
                let gg = grad_buf(grads, values, pool, *gain);
                for i in 0..m {
                    for j in 0..n {
                        let xn = (av[i * n + j] - mu[i]) / sig[i];
                        gg[j] += g[i * n + j] * xn;
                    }
                }
            }
            if needs[bias.0] {
                let gb = grad_buf(grads, values, pool, *bias);
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g[i * n + j];
                    }
                }
            }
            if needs[a.0] {
                let mut gx = vec![0.0; n];
                for i in 0..m {
                    let mut mean_gx = 0.0;
                    for j in 0..n {
                        gx[j] = g[i * n + j] * gv[j];
                        mean_gx += gx[j];
                    }
                    mean_gx /= n as f64;
                    let floored = sig[i] <= LN_STD_FLOOR;
                    let ga = grad_buf(grads, values, pool, *a);
                    if floored {
                        // std pinned at the floor: only the mean subtraction varies
                        for j in 0..n {
                            ga[i * n + j] += (gx[j] - mean_gx) / sig[i];
                        }
                    } else {
                        let mut dot = 0.0;
                        for j in 0..n {
                            let xn = (av[i * n + j] - mu[i]) / sig[i];
                            dot += gx[j] * xn;
                        }
                        let mean_dot = dot / n as f64;
                        for j in 0..n {
                            let xn = (av[i * n + j] - mu[i]) / sig[i];
                            ga[i * n + j] += (gx[j] - mean_gx - xn * mean_dot) / sig[i];
                        }
                    }
                }
            }
        }
        Op::Sum { a } => {
            if needs[a.0] {
                let y = g[0];
                for x in grad_buf(grads, values, pool, *a).iter_mut() {
                    *x += y;
                }
            }
        }
        Op::Mean { a } => {
            if needs[a.0] {
                let n = values[a.0].numel() as f64;
                let y = g[0] / n;
                for x in grad_buf(grads, values, pool, *a).iter_mut() {
                    *x += y;
                }
            }
        }
        Op::Reshape { a } => {
            if needs[a.0] {
                for (x, y) in grad_buf(grads, values, pool, *a).iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        Op::Transpose2 { a } => {
            if needs[a.0] {
                let (m, n) = {
                    let s = values[a.0].shape();
                    (s[0], s[1])
                };
                let ga = grad_buf(grads, values, pool, *a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Permute { a, perm } => {
            if needs[a.0] {
                let in_shape = values[a.0].shape();
                add_unpermuted(grad_buf(grads, values, pool, *a), g, in_shape, perm);
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = values[idx].shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let axis_total = out_shape[*axis];
            let mut offset = 0;
            for &p in parts {
                let pa = values[p.0].shape()[*axis];
                if needs[p.0] {
                    let start = offset;
                    let gp = grad_buf(grads, values, pool, p);
                    for o in 0..outer {
                        let src_start = (o * axis_total + start) * inner;
                        let dst = &mut gp[o * pa * inner..(o + 1) * pa * inner];
                        for (x, y) in dst.iter_mut().zip(&g[src_start..src_start + pa * inner]) {
                            *x += y;
                        }
                    }
                }
                offset += pa;
            }
        }
        Op::Slice { a, starts } => {
            if needs[a.0] {
                let in_shape = values[a.0].shape().to_vec();
                let lens = values[idx].shape().to_vec();
                let ga = grad_buf(grads, values, pool, *a);
                scatter_slice_add(ga, g, &in_shape, starts, &lens);
            }
        }
        Op::Inverse { a } => {
            if needs[a.0] {
                // dA = -Y^T G Y^T with Y the computed inverse
                let n = values[idx].shape()[0];
                let y = values[idx].data();
                let mut tmp = pool.zeroed(n * n);
                matmul_acc_tn(&mut tmp, y, g, n, n, n, 1.0); // tmp = Y^T G
                let ga = grad_buf(grads, values, pool, *a);
                matmul_acc_nt(ga, &tmp, y, n, n, n, -1.0); // ga -= tmp Y^T
                pool.give(tmp);
            }
        }
        Op::Cayley { s, inv_re, inv_im } => {
            if needs[s.0] {
                let n = values[idx].shape()[1];
                let nn = n * n;
                let (phi_re, phi_im) = values[idx].data().split_at(nn);
                let (gr, gi) = g.split_at(nn);
                // T1 = A^-1 conj(G): re = invRe gr + invIm gi,
                //                    im = invIm gr - invRe gi
                let mut t1re = pool.zeroed(nn);
                matmul_acc_nn(&mut t1re, inv_re, gr, n, n, n);
                matmul_acc_nn(&mut t1re, inv_im, gi, n, n, n);
                let mut t1im = pool.zeroed(nn);
                matmul_acc_nn(&mut t1im, inv_im, gr, n, n, n);
                matmul_acc_neg(&mut t1im, inv_re, gi, n, n, n);
                // dL/dS = Re(-j T1 (Phi + I)) = T1re phi_im + T1im phi_re + T1im
                let gs = grad_buf(grads, values, pool, *s);
                matmul_acc_nn(gs, &t1re, phi_im, n, n, n);
                matmul_acc_nn(gs, &t1im, phi_re, n, n, n);
                for (x, y) in gs.iter_mut().zip(t1im.iter()) {
                    *x += y;
                }
                pool.give(t1re);
                pool.give(t1im);
            }
        }
        Op::PackObs { parts, mul } => {
            let out_shape = values[idx].shape();
            let (nu, k_users, tau) = (out_shape[1], out_shape[2], out_shape[3]);
            let (n_bs, u_ant) = {
                let s = values[parts[0].re.0].shape();
                (s[0], s[1])
            };
            for (t, row) in parts.chunks(k_users).enumerate() {
                for (k, pair) in row.iter().enumerate() {
                    for c in 0..2 {
                        let target = if c == 0 { pair.re } else { pair.im };
                        if !needs[target.0] {
                            continue;
                        }
                        let gt = grad_buf(grads, values, pool, target);
                        for u in 0..u_ant {
                            for b in 0..n_bs {
                                let r = u * n_bs + b;
                                let src = b * u_ant + u;
                                gt[src] += g[(((c * nu + r) * k_users) + k) * tau + t] * mul;
                            }
                        }
                    }
                }
            }
        }
        Op::Reception { phis, consts } => {
            let (n, u, k_users, groups, mb, tau) = (
                consts.n_bs,
                consts.u_ant,
                consts.users,
                consts.groups,
                consts.group_size,
                consts.tau,
            );
            let nu = n * u;
            // complex cotangent of Y(k, t), standardization folded in
            let mut gy_re = vec![0.0; n * u];
            let mut gy_im = vec![0.0; n * u];
            // scratch for A^T conj(Gy) (mb x u)
            let mut t1_re = vec![0.0; mb * u];
            let mut t1_im = vec![0.0; mb * u];
            for t in 0..tau {
                for k in 0..k_users {
                    for uu in 0..u {
                        for b in 0..n {
                            let r = uu * n + b;
                            let src = b * u + uu;
                            gy_re[src] = g[((r * k_users) + k) * tau + t] * consts.mul;
                            gy_im[src] = g[(((nu + r) * k_users) + k) * tau + t] * consts.mul;
                        }
                    }
                    for gidx in 0..groups {
                        let target = phis[t * groups + gidx];
                        if !needs[target.0] {
                            continue;
                        }
                        // W^T = A^T conj(Gy) B^T; dL/dPhi_re = Re(W^T),
                        // dL/dPhi_im = -Im(W^T)
                        let a_re = &consts.h_it_re[gidx];
                        let a_im = &consts.h_it_im[gidx];
                        let b_re = &consts.h_ri_re[k * groups + gidx];
                        let b_im = &consts.h_ri_im[k * groups + gidx];
                        t1_re.fill(0.0);
                        t1_im.fill(0.0);
                        // T1 = A^T conj(Gy): conj(A)^T would be wrong; A is
                        // complex so A^T (a_re + j a_im)^T applied to
                        // (gy_re - j gy_im)
                        matmul_acc_tn(&mut t1_re, a_re, &gy_re, n, mb, u, 1.0);
                        matmul_acc_tn(&mut t1_re, a_im, &gy_im, n, mb, u, 1.0);
                        matmul_acc_tn(&mut t1_im, a_im, &gy_re, n, mb, u, 1.0);
                        matmul_acc_tn(&mut t1_im, a_re, &gy_im, n, mb, u, -1.0);
                        // W^T = T1 B^T: (t1_re + j t1_im)(b_re + j b_im)^T
                        let gphi = grad_buf(grads, values, pool, target);
                        let (gp_re, gp_im) = gphi.split_at_mut(mb * mb);
                        // Re part += t1_re b_re^T - t1_im b_im^T
                        matmul_acc_nt(gp_re, &t1_re, b_re, mb, u, mb, 1.0);
                        matmul_acc_nt(gp_re, &t1_im, b_im, mb, u, mb, -1.0);
                        // -Im part -= t1_re b_im^T + t1_im b_re^T
                        matmul_acc_nt(gp_im, &t1_re, b_im, mb, u, mb, -1.0);
                        matmul_acc_nt(gp_im, &t1_im, b_re, mb, u, mb, -1.0);
                    }
                }
            }
        }
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn permute_into(out: &mut [f64], data: &[f64], in_shape: &[usize], perm: &[usize]) {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let out_strides = strides_of(&out_shape);
    let mut idx = vec![0usize; rank];
    for &v in data.iter() {
        let mut out_flat = 0;
        for d in 0..rank {
            out_flat += idx[perm[d]] * out_strides[d];
        }
        out[out_flat] = v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Adds the permuted-layout gradient back into the input-layout buffer.
fn add_unpermuted(ga: &mut [f64], g: &[f64], in_shape: &[usize], perm: &[usize]) {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let out_strides = strides_of(&out_shape);
    let mut idx = vec![0usize; rank];
    for slot in ga.iter_mut() {
        let mut out_flat = 0;
        for d in 0..rank {
            out_flat += idx[perm[d]] * out_strides[d];
        }
        *slot += g[out_flat];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn gather_slice_into(out: &mut [f64], data: &[f64], shape: &[usize], starts: &[usize], lens: &[usize]) {
    let rank = shape.len();
    let strides = strides_of(shape);
    let total: usize = lens.iter().product();
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut().take(total) {
        let mut flat = 0;
        for d in 0..rank {
            flat += (starts[d] + idx[d]) * strides[d];
        }
        *slot = data[flat];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < lens[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn scatter_slice_add(ga: &mut [f64], g: &[f64], shape: &[usize], starts: &[usize], lens: &[usize]) {
    let rank = shape.len();
    let strides = strides_of(shape);
    let total: usize = lens.iter().product();
    let mut idx = vec![0usize; rank];
    for &gv in g.iter().take(total) {
        let mut flat = 0;
        for d in 0..rank {
            flat += (starts[d] + idx[d]) * strides[d];
        }
        ga[flat] += gv;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < lens[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Result of comparing analytic gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    /// Fraction of checked entries that matched.
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        (self.checked - self.failures) as f64 / self.checked as f64
    }
}

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-5;
/// Entries whose analytic and numeric gradients agree within this absolute
/// level count as matching; central differences cannot resolve them.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-8;

/// Checks d(loss)/d(inputs[i]) for every element of every input against
/// central finite differences with step `h`.
///
/// `build` must be a pure function of the input tensors: it is re-run
/// (on a fresh tape) for every perturbation.
pub fn gradcheck<F>(build: F, inputs: &[Tensor], h: f64, tol: f64) -> GradcheckReport
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let elements: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    gradcheck_sampled(build, inputs, &elements, h, tol)
}

/// Like [`gradcheck`] but only for the listed (input, element) pairs.
pub fn gradcheck_sampled<F>(
    build: F,
    inputs: &[Tensor],
    elements: &[(usize, usize)],
    h: f64,
    tol: f64,
) -> GradcheckReport
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    // analytic gradients
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss);
    let grads: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id)).collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let loss = build(&mut t, &ids);
        t.value(loss).data()[0]
    };

    let mut failures = 0;
    let mut max_rel: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in elements {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let fp = eval(&work);
        work[i].data_mut()[j] = orig - h;
        let fm = eval(&work);
        work[i].data_mut()[j] = orig;
        let num = (fp - fm) / (2.0 * h);
        let ana = grads[i][j];
        let denom = ana.abs().max(num.abs());
        let abs_err = (ana - num).abs();
        let rel = if denom > 0.0 { abs_err / denom } else { 0.0 };
        let ok = abs_err <= GRADCHECK_ABS_FLOOR || rel < tol;
        if !ok {
            failures += 1;
        }
        if denom > GRADCHECK_ABS_FLOOR {
            max_rel = max_rel.max(rel);
        }
    }
    GradcheckReport { checked: elements.len(), failures, max_rel_err: max_rel }
}



#[cfg(test)]
mod fusion_equivalence_tests {
    use super::*;
    use crate::rng::Rng;

    fn randt(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
    }

    fn sym(rng: &mut Rng, n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![n, n]);
        for j in 0..n {
            for i in 0..=j {
                let v = rng.normal();
                t.data_mut()[i * n + j] = v;
                t.data_mut()[j * n + i] = v;
            }
        }
        t
    }

    #[test]
    fn cayley_matches_cinverse_path() {
        let mut rng = Rng::new(71);
        for n in [1usize, 2, 4, 8] {
            let s_t = sym(&mut rng, n);
            let mut t = Tape::new();
            let s = t.constant(s_t.clone());
            let packed = t.cayley(s).unwrap();
            // composite path: (I + jS)^-1 (I - jS)
            let eye = t.constant(Tensor::eye(n));
            let neg = t.neg(s);
            let plus = t.complex(eye, s);
            let minus = t.complex(eye, neg);
            let inv = t.cinverse(plus).unwrap();
            let phi = t.cmatmul(inv, minus);
            let p = t.value(packed).data().to_vec();
            for i in 0..n {
                for j in 0..n {
                    assert!((p[i * n + j] - t.value(phi.re).at2(i, j)).abs() < 1e-12);
                    assert!((p[n * n + i * n + j] - t.value(phi.im).at2(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cayley_gradcheck() {
        let mut rng = Rng::new(72);
        let s = sym(&mut rng, 4);
        let w = randt(&mut rng, vec![2, 4, 4]);
        let rep = gradcheck(
            |t, ids| {
                let packed = t.cayley(ids[0]).unwrap();
                let p = t.mul(packed, ids[1]);
                t.sum(p)
            },
            &[s, w],
            GRADCHECK_STEP,
            GRADCHECK_TOL,
        );
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn pack_observation_matches_manual_assembly() {
        let mut rng = Rng::new(73);
        let (n_bs, u_ant, k_users, tau) = (3usize, 2usize, 2usize, 3usize);
        let nu = n_bs * u_ant;
        let (mul, addc) = (1.7, -0.3);
        let mut t = Tape::new();
        let mut rows = Vec::new();
        let mut tensors = Vec::new();
        for _ in 0..tau {
            let mut row = Vec::new();
            for _ in 0..k_users {
                let re_t = randt(&mut rng, vec![n_bs, u_ant]);
                let im_t = randt(&mut rng, vec![n_bs, u_ant]);
                tensors.push((re_t.clone(), im_t.clone()));
                let re = t.constant(re_t);
                let im = t.constant(im_t);
                row.push(t.complex(re, im));
            }
            rows.push(row);
        }
        let packed = t.pack_observation(&rows, mul, addc);
        assert_eq!(t.value(packed).shape(), &[2, nu, k_users, tau]);
        for (idx, (re_t, im_t)) in tensors.iter().enumerate() {
            let (tt, k) = (idx / k_users, idx % k_users);
            for u in 0..u_ant {
                for b in 0..n_bs {
                    let r = u * n_bs + b;
                    let want_re = re_t.at2(b, u) * mul + addc;
                    let want_im = im_t.at2(b, u) * mul + addc;
                    let got_re = t.value(packed).data()[((r * k_users) + k) * tau + tt];
                    let got_im = t.value(packed).data()[(((nu + r) * k_users) + k) * tau + tt];
                    assert!((got_re - want_re).abs() < 1e-14);
                    assert!((got_im - want_im).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn pack_observation_gradcheck() {
        let mut rng = Rng::new(74);
        let re1 = randt(&mut rng, vec![2, 2]);
        let im1 = randt(&mut rng, vec![2, 2]);
        let re2 = randt(&mut rng, vec![2, 2]);
        let im2 = randt(&mut rng, vec![2, 2]);
        let w = randt(&mut rng, vec![2, 4, 1, 2]);
        let rep = gradcheck(
            |t, ids| {
                let a = t.complex(ids[0], ids[1]);
                let b = t.complex(ids[2], ids[3]);
                let packed = t.pack_observation(&[vec![a], vec![b]], 0.8, 0.1);
                let p = t.mul(packed, ids[4]);
                t.sum(p)
            },
            &[re1, im1, re2, im2, w],
            GRADCHECK_STEP,
            GRADCHECK_TOL,
        );
        assert!(rep.passed(), "{rep:?}");
    }
}
