use std::collections::HashMap;

use crate::{ParamId, ParamStore, Scalar, Tensor};

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shapes and masking for fused multi-head scaled dot-product attention.
///
/// Queries are laid out as `(batch * q_len) x (heads * head_dim)`, keys and
/// values as `(batch * k_len) x (heads * head_dim)`. Key position `j` of
/// sample `b` is visible iff `j < key_lens[b]` and, when `causal`, `j <= i`.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub key_lens: Vec<usize>,
    pub causal: bool,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowMean(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        inv_temp: Vec<T>,
        probs: Tensor<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation over a borrowed [`ParamStore`] so that
/// [`Tape::backward`] can return gradients for every node.
pub struct Tape<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of one scalar output with respect to every node on a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every trainable parameter touched by the forward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input. Also serves as stop-gradient: pass a
    /// cloned value of another node.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `v`, but gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Parameter leaf. Repeated calls for the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.param(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// A leaf that receives a gradient without being a stored parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1x{n} row");
        let r = self.value(row).data();
        let av = self.value(a);
        let value = Tensor::from_fn(m, n, |i, j| av.get(i, j) + r[j]);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Adds an `m x 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "add_col expects an {m}x1 column");
        let c = self.value(col).data();
        let av = self.value(a);
        let value = Tensor::from_fn(m, n, |i, j| av.get(i, j) + c[i]);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::AddCol(a, col), ng)
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "mul_col expects an {m}x1 column");
        let c = self.value(col).data();
        let av = self.value(a);
        let value = Tensor::from_fn(m, n, |i, j| av.get(i, j) * c[i]);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    /// Scales `a` by the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar expects a 1x1 scale");
        let sv = self.value(s).item();
        let value = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::MulScalar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu(x).0);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n), "layer_norm gain shape");
        assert_eq!(self.shape(beta), (1, n), "layer_norm bias shape");
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf = T::of(n as f64);
        let mut xhat = Tensor::zeros(m, n);
        let mut out = Tensor::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Tensor::zeros(m, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), m, "concat_cols row mismatch");
            let w = pv.cols();
            for i in 0..m {
                value.row_mut(i)[off..off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), n, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
            m += pv.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(m, n, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Row lookup; indices may repeat (embedding tables).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// `out[idx[r]] += a[r]` into an `n_rows x cols` zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len(), "scatter index count");
        let mut value = Tensor::zeros(n_rows, av.cols());
        for (r, &i) in idx.iter().enumerate() {
            for (o, &x) in value.row_mut(i).iter_mut().zip(av.row(r)) {
                *o = *o + x;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::ScatterRows(a, idx.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / T::of(av.len().max(1) as f64));
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// `m x n -> m x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::from_fn(av.rows(), 1, |i, _| av.row(i).iter().copied().sum());
        let ng = self.ng(a);
        self.push(value, Op::RowSum(a), ng)
    }

    /// `m x n -> m x 1`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = T::of(av.cols() as f64);
        let value = Tensor::from_fn(av.rows(), 1, |i, _| av.row(i).iter().copied().sum::<T>() / n);
        let ng = self.ng(a);
        self.push(value, Op::RowMean(a), ng)
    }

    /// Row-wise softmax. Entries equal to `-inf` receive probability zero.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Per-row cross-entropy `-log softmax(logits[i] * inv_temp[i])[targets[i]]`
    /// as an `m x 1` column (natural log).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], inv_temp: Option<&[T]>) -> Var {
        let lv = self.value(logits);
        let (m, n) = lv.shape();
        assert_eq!(targets.len(), m, "one target per row");
        let inv_temp = match inv_temp {
            Some(s) => {
                assert_eq!(s.len(), m, "one temperature per row");
                s.to_vec()
            }
            None => vec![T::one(); m],
        };
        let mut probs = Tensor::zeros(m, n);
        let mut losses = Tensor::zeros(m, 1);
        for i in 0..m {
            assert!(targets[i] < n, "target {} out of range {n}", targets[i]);
            let s = inv_temp[i];
            let row = probs.row_mut(i);
            for (p, &x) in row.iter_mut().zip(lv.row(i)) {
                *p = x * s;
            }
            let lse = log_sum_exp(row);
            let target_logit = row[targets[i]];
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
            losses.set(i, 0, lse - target_logit);
        }
        let ng = self.ng(logits);
        self.push(
            losses,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                inv_temp,
                probs,
            },
            ng,
        )
    }

    /// Fused multi-head attention; see [`AttnSpec`] for the layout.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let hd = spec.heads * spec.head_dim;
        assert_eq!(self.shape(q), (spec.batch * spec.q_len, hd), "attention query shape");
        assert_eq!(self.shape(k), (spec.batch * spec.k_len, hd), "attention key shape");
        assert_eq!(self.shape(v), (spec.batch * spec.k_len, hd), "attention value shape");
        assert_eq!(spec.key_lens.len(), spec.batch, "one key length per sample");
        let (sq, sk) = (spec.q_len, spec.k_len);
        let scale = T::of(1.0 / (spec.head_dim as f64).sqrt());
        let mut probs = vec![T::zero(); spec.batch * spec.heads * sq * sk];
        let mut out = Tensor::zeros(spec.batch * sq, hd);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let blk = (b * spec.heads + h) * sq * sk;
                let p = &mut probs[blk..blk + sq * sk];
                let qoff = b * sq * hd + h * spec.head_dim;
                let koff = b * sk * hd + h * spec.head_dim;
                T::gemm(
                    sq,
                    spec.head_dim,
                    sk,
                    scale,
                    &qv.data()[qoff..],
                    hd as isize,
                    1,
                    &kv.data()[koff..],
                    1,
                    hd as isize,
                    T::zero(),
                    p,
                    sk as isize,
                    1,
                );
                for i in 0..sq {
                    let row = &mut p[i * sk..(i + 1) * sk];
                    for (j, x) in row.iter_mut().enumerate() {
                        if j >= spec.key_lens[b] || (spec.causal && j > i) {
                            *x = T::neg_infinity();
                        }
                    }
                    softmax_in_place(row);
                }
                T::gemm(
                    sq,
                    sk,
                    spec.head_dim,
                    T::one(),
                    p,
                    sk as isize,
                    1,
                    &vv.data()[koff..],
                    hd as isize,
                    1,
                    T::zero(),
                    &mut out.data_mut()[qoff..],
                    hd as isize,
                    1,
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.shape(out), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self
            .param_vars
            .iter()
            .filter(|(id, _)| self.store.param(**id).trainable)
            .map(|(&id, &v)| (id, v))
            .collect();
        params.sort_by_key(|&(id, _)| id);
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, g.matmul_nt(self.value(b)));
                }
                if self.ng(b) {
                    self.acc(grads, b, self.value(a).matmul_tn(g));
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                if self.ng(b) {
                    self.acc(grads, b, g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.ng(b) {
                    self.acc(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, row) => {
                self.acc(grads, a, g.clone());
                if self.ng(row) {
                    let n = g.cols();
                    let mut r = Tensor::zeros(1, n);
                    for i in 0..g.rows() {
                        for (o, &x) in r.data_mut().iter_mut().zip(g.row(i)) {
                            *o = *o + x;
                        }
                    }
                    self.acc(grads, row, r);
                }
            }
            &Op::AddCol(a, col) => {
                self.acc(grads, a, g.clone());
                if self.ng(col) {
                    let c = Tensor::from_fn(g.rows(), 1, |i, _| g.row(i).iter().copied().sum());
                    self.acc(grads, col, c);
                }
            }
            &Op::MulCol(a, col) => {
                let cv = self.value(col);
                if self.ng(a) {
                    let ga = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * cv.get(i, 0));
                    self.acc(grads, a, ga);
                }
                if self.ng(col) {
                    let av = self.value(a);
                    let gc = Tensor::from_fn(g.rows(), 1, |i, _| {
                        g.row(i).iter().zip(av.row(i)).map(|(&x, &y)| x * y).sum()
                    });
                    self.acc(grads, col, gc);
                }
            }
            &Op::MulScalar(a, s) => {
                if self.ng(a) {
                    let sv = self.value(s).item();
                    self.acc(grads, a, g.map(|x| x * sv));
                }
                if self.ng(s) {
                    let av = self.value(a);
                    let d: T = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).sum();
                    self.acc(grads, s, Tensor::scalar(d));
                }
            }
            &Op::Scale(a, s) => self.acc(grads, a, g.map(|x| x * s)),
            &Op::AddConst(a) => self.acc(grads, a, g.clone()),
            &Op::Sigmoid(a) => {
                let y = &node.value;
                self.acc(grads, a, g.zip_map(y, |gx, yx| gx * yx * (T::one() - yx)));
            }
            &Op::Tanh(a) => {
                let y = &node.value;
                self.acc(grads, a, g.zip_map(y, |gx, yx| gx * (T::one() - yx * yx)));
            }
            &Op::Relu(a) => {
                let x = self.value(a);
                self.acc(
                    grads,
                    a,
                    g.zip_map(x, |gx, xx| if xx > T::zero() { gx } else { T::zero() }),
                );
            }
            &Op::Gelu(a) => {
                let x = self.value(a);
                self.acc(grads, a, g.zip_map(x, |gx, xx| gx * gelu(xx).1));
            }
            &Op::Square(a) => {
                let x = self.value(a);
                let two = T::of(2.0);
                self.acc(grads, a, g.zip_map(x, |gx, xx| two * gx * xx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = g.shape();
                let gam = self.value(*gamma).data();
                if self.ng(*gamma) {
                    let mut gg = Tensor::zeros(1, n);
                    for i in 0..m {
                        for j in 0..n {
                            let v = gg.get(0, j) + g.get(i, j) * xhat.get(i, j);
                            gg.set(0, j, v);
                        }
                    }
                    self.acc(grads, *gamma, gg);
                }
                if self.ng(*beta) {
                    let mut gb = Tensor::zeros(1, n);
                    for i in 0..m {
                        for j in 0..n {
                            let v = gb.get(0, j) + g.get(i, j);
                            gb.set(0, j, v);
                        }
                    }
                    self.acc(grads, *beta, gb);
                }
                if self.ng(*x) {
                    let nf = T::of(n as f64);
                    let mut gx = Tensor::zeros(m, n);
                    for i in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = g.get(i, j) * gam[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xhat.get(i, j);
                        }
                        for j in 0..n {
                            let dh = g.get(i, j) * gam[j];
                            gx.set(i, j, rstd[i] * (dh - s1 / nf - xhat.get(i, j) * s2 / nf));
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.ng(p) {
                        let data = g.data()[off * n..(off + h) * n].to_vec();
                        self.acc(grads, p, Tensor::from_vec(h, n, data));
                    }
                    off += h;
                }
            }
            &Op::SliceCols(a, start) => {
                let (m, n) = self.shape(a);
                let w = g.cols();
                let mut ga = Tensor::zeros(m, n);
                for i in 0..m {
                    ga.row_mut(i)[start..start + w].copy_from_slice(g.row(i));
                }
                self.acc(grads, a, ga);
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.shape(*a);
                let mut ga = Tensor::zeros(m, n);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o = *o + x;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::ScatterRows(a, idx) => {
                self.acc(grads, *a, g.select_rows(idx));
            }
            &Op::Sum(a) => {
                let (m, n) = self.shape(a);
                self.acc(grads, a, Tensor::full(m, n, g.item()));
            }
            &Op::Mean(a) => {
                let (m, n) = self.shape(a);
                let s = g.item() / T::of((m * n).max(1) as f64);
                self.acc(grads, a, Tensor::full(m, n, s));
            }
            &Op::RowSum(a) => {
                let (m, n) = self.shape(a);
                self.acc(grads, a, Tensor::from_fn(m, n, |i, _| g.get(i, 0)));
            }
            &Op::RowMean(a) => {
                let (m, n) = self.shape(a);
                let nf = T::of(n as f64);
                self.acc(grads, a, Tensor::from_fn(m, n, |i, _| g.get(i, 0) / nf));
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (m, n) = y.shape();
                let mut ga = Tensor::zeros(m, n);
                for i in 0..m {
                    let dot: T = y.row(i).iter().zip(g.row(i)).map(|(&p, &d)| p * d).sum();
                    for j in 0..n {
                        ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.acc(grads, a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                inv_temp,
                probs,
            } => {
                let (m, n) = probs.shape();
                let mut gl = Tensor::zeros(m, n);
                for i in 0..m {
                    let s = g.get(i, 0) * inv_temp[i];
                    for j in 0..n {
                        let onehot = if j == targets[i] { T::one() } else { T::zero() };
                        gl.set(i, j, s * (probs.get(i, j) - onehot));
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.backprop_attention(*q, *k, *v, spec, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let hd = spec.heads * spec.head_dim;
        let (sq, sk, dh) = (spec.q_len, spec.k_len, spec.head_dim);
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = Tensor::zeros(qv.rows(), hd);
        let mut gk = Tensor::zeros(kv.rows(), hd);
        let mut gv = Tensor::zeros(vv.rows(), hd);
        let mut dp = vec![T::zero(); sq * sk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let blk = (b * spec.heads + h) * sq * sk;
                let p = &probs[blk..blk + sq * sk];
                let qoff = b * sq * hd + h * dh;
                let koff = b * sk * hd + h * dh;
                // dP = dO V^T
                T::gemm(
                    sq,
                    dh,
                    sk,
                    T::one(),
                    &g.data()[qoff..],
                    hd as isize,
                    1,
                    &vv.data()[koff..],
                    1,
                    hd as isize,
                    T::zero(),
                    &mut dp,
                    sk as isize,
                    1,
                );
                // dV = P^T dO
                T::gemm(
                    sk,
                    sq,
                    dh,
                    T::one(),
                    p,
                    1,
                    sk as isize,
                    &g.data()[qoff..],
                    hd as isize,
                    1,
                    T::one(),
                    &mut gv.data_mut()[koff..],
                    hd as isize,
                    1,
                );
                for i in 0..sq {
                    let pr = &p[i * sk..(i + 1) * sk];
                    let dr = &mut dp[i * sk..(i + 1) * sk];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pp) in dr.iter_mut().zip(pr) {
                        *d = pp * (*d - dot) * scale;
                    }
                }
                // dQ = dS K
                T::gemm(
                    sq,
                    sk,
                    dh,
                    T::one(),
                    &dp,
                    sk as isize,
                    1,
                    &kv.data()[koff..],
                    hd as isize,
                    1,
                    T::one(),
                    &mut gq.data_mut()[qoff..],
                    hd as isize,
                    1,
                );
                // dK = dS^T Q
                T::gemm(
                    sk,
                    sq,
                    dh,
                    T::one(),
                    &dp,
                    1,
                    sk as isize,
                    &qv.data()[qoff..],
                    hd as isize,
                    1,
                    T::one(),
                    &mut gk.data_mut()[koff..],
                    hd as isize,
                    1,
                );
            }
        }
        self.acc(grads, q, gq);
        self.acc(grads, k, gk);
        self.acc(grads, v, gv);
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Value and derivative of the tanh-approximated GELU.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

/// Numerically stable `log(sum(exp(x)))`; `-inf` for an all `-inf` row.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Softmax in place; `-inf` entries map to zero.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        xs.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
}
