//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a tape of ops built during one forward pass. Parameters
//! live outside the graph in a caller-owned slice; parameter nodes borrow
//! them, and `backward` returns gradients indexed by parameter slot, which
//! keeps per-sample graphs cheap and lets a batch loop sum gradients in a
//! fixed order.
//!
//! Convolutions are decomposed into one GEMM per kernel offset so the inner
//! dimension stays at the channel count, which is where the matmul kernel
//! is fastest on this generation of hardware.

use crate::math;
use crate::tensor::{gemm_acc, transpose_into, Tensor};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Named parameter store. Modules allocate slots at construction and keep
/// the returned indices; graphs borrow the tensor slice, the optimizer
/// mutates it, checkpoints serialize it by name.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    names: Vec<alloc::string::String>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn alloc(&mut self, name: impl Into<alloc::string::String>, t: Tensor) -> usize {
        self.tensors.push(t);
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn indices_matching(&self, needle: &str) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.contains(needle))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Silu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConcatCols(Var, Var),
    ConcatChannels(Var, Var),
    Upsample2x(Var),
    AddRowBias(Var, Var),
    AddChanBias(Var, Var),
    MulRows(Var, Var),
    MeanRowsSubset(Var, Vec<usize>),
    BroadcastRow(Var, usize),
    Embed(Var, Vec<usize>),
    Column(Var, usize),
    MseLoss(Var, Var),
}

struct Node {
    /// None for parameter nodes, whose value lives in the param slice.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

/// Gradients aligned with the parameter slice passed to [`Graph::new`].
pub type ParamGrads = Vec<Option<Tensor>>;

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(idx) => &self.params[*idx],
            _ => self.nodes[v.0].value.as_ref().expect("value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(idx),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transposed();
        let g = self.ng(a);
        self.push(v, Op::Transpose(a), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        let g = self.ng(a);
        self.push(v, Op::Reshape(a), g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out.data_mut()[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (oj, &xj) in o.iter_mut().zip(row.iter()) {
                *oj = math::exp(xj - m);
                sum += *oj;
            }
            let inv = 1.0 / sum;
            for oj in o.iter_mut() {
                *oj *= inv;
            }
        }
        let g = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * math::sigmoid(x));
        let g = self.ng(a);
        self.push(v, Op::Silu(a), g)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let v = group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups, eps);
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            g,
        )
    }

    /// 2-D convolution; kernel size is taken from the weight shape
    /// [c_out, c_in, kh, kw]. `pad` applies on both sides.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let v = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, g)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let (r, c1) = ta.dims2();
        let (r2, c2) = tb.dims2();
        assert_eq!(r, r2, "concat_cols row mismatch");
        let mut out = Tensor::zeros(&[r, c1 + c2]);
        for i in 0..r {
            out.data_mut()[i * (c1 + c2)..i * (c1 + c2) + c1]
                .copy_from_slice(&ta.data()[i * c1..(i + 1) * c1]);
            out.data_mut()[i * (c1 + c2) + c1..(i + 1) * (c1 + c2)]
                .copy_from_slice(&tb.data()[i * c2..(i + 1) * c2]);
        }
        let g = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), g)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let (c1, h, w) = ta.dims3();
        let (c2, h2, w2) = tb.dims3();
        assert_eq!((h, w), (h2, w2), "concat_channels spatial mismatch");
        let mut data = Vec::with_capacity((c1 + c2) * h * w);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let g = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_vec(&[c1 + c2, h, w], data),
            Op::ConcatChannels(a, b),
            g,
        )
    }

    pub fn upsample2x(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (c, h, w) = x.dims3();
        let mut out = Tensor::zeros(&[c, h * 2, w * 2]);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x.data()[ch * h * w + i * w + j];
                    let base = ch * 4 * h * w + 2 * i * 2 * w + 2 * j;
                    out.data_mut()[base] = v;
                    out.data_mut()[base + 1] = v;
                    out.data_mut()[base + 2 * w] = v;
                    out.data_mut()[base + 2 * w + 1] = v;
                }
            }
        }
        let g = self.ng(a);
        self.push(out, Op::Upsample2x(a), g)
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let tx = self.value(x);
        let tb = self.value(b);
        let (r, c) = tx.dims2();
        assert_eq!(tb.numel(), c, "row bias length");
        let mut out = tx.clone();
        for i in 0..r {
            for (o, &bv) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let g = self.ng(x) || self.ng(b);
        self.push(out, Op::AddRowBias(x, b), g)
    }

    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Var {
        let tx = self.value(x);
        let tb = self.value(b);
        let (c, h, w) = tx.dims3();
        assert_eq!(tb.numel(), c, "channel bias length");
        let mut out = tx.clone();
        for ch in 0..c {
            let bv = tb.data()[ch];
            for o in out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut() {
                *o += bv;
            }
        }
        let g = self.ng(x) || self.ng(b);
        self.push(out, Op::AddChanBias(x, b), g)
    }

    /// Scale row i of x by s[i].
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Var {
        let tx = self.value(x);
        let ts = self.value(s);
        let (r, c) = tx.dims2();
        assert_eq!(ts.numel(), r, "row scale length");
        let mut out = tx.clone();
        for i in 0..r {
            let sv = ts.data()[i];
            for o in out.data_mut()[i * c..(i + 1) * c].iter_mut() {
                *o *= sv;
            }
        }
        let g = self.ng(x) || self.ng(s);
        self.push(out, Op::MulRows(x, s), g)
    }

    /// Mean of the given rows of a matrix, as a [c] vector.
    pub fn mean_rows_subset(&mut self, x: Var, rows: Vec<usize>) -> Var {
        assert!(!rows.is_empty(), "mean over empty row set");
        let tx = self.value(x);
        let (_, c) = tx.dims2();
        let mut out = Tensor::zeros(&[c]);
        for &i in &rows {
            for (o, &v) in out.data_mut().iter_mut().zip(&tx.data()[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for o in out.data_mut() {
            *o *= inv;
        }
        let g = self.ng(x);
        self.push(out, Op::MeanRowsSubset(x, rows), g)
    }

    /// Replicate a [c] vector into an [n, c] matrix.
    pub fn broadcast_row(&mut self, v: Var, n: usize) -> Var {
        let tv = self.value(v);
        let c = tv.numel();
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(tv.data());
        }
        let g = self.ng(v);
        self.push(out, Op::BroadcastRow(v, n), g)
    }

    /// Gather rows of an embedding table.
    pub fn embed(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let tt = self.value(table);
        let (v, c) = tt.dims2();
        let mut out = Tensor::zeros(&[ids.len(), c]);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "token id {id} out of vocab {v}");
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&tt.data()[id * c..(id + 1) * c]);
        }
        let g = self.ng(table);
        self.push(out, Op::Embed(table, ids), g)
    }

    /// Extract column j of a matrix as a [r] vector.
    pub fn column(&mut self, x: Var, j: usize) -> Var {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        assert!(j < c);
        let out = Tensor::from_vec(&[r], (0..r).map(|i| tx.data()[i * c + j]).collect());
        let g = self.ng(x);
        self.push(out, Op::Column(x, j), g)
    }

    /// Mean squared error between two same-shaped tensors, as a [1] scalar.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        assert!(ta.same_shape(tb), "mse shape mismatch");
        let n = ta.numel() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let g = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s / n), Op::MseLoss(a, b), g)
    }

    /// Reverse pass from a scalar node. Returns gradients per parameter slot.
    pub fn backward(&mut self, loss: Var) -> ParamGrads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: ParamGrads = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            // local helper: accumulate into a node's grad slot
            macro_rules! acc {
                ($v:expr, $t:expr) => {{
                    let v: Var = $v;
                    if self.nodes[v.0].needs_grad {
                        let t: Tensor = $t;
                        match &mut grads[v.0] {
                            Some(g) => g.add_scaled_assign(&t, 1.0),
                            slot @ None => *slot = Some(t),
                        }
                    }
                }};
            }
            match self.nodes[idx].op.clone() {
                Op::Constant => {}
                Op::Param(p) => match &mut pgrads[p] {
                    Some(g) => g.add_scaled_assign(&gout, 1.0),
                    slot @ None => *slot = Some(gout.clone()),
                },
                Op::Add(a, b) => {
                    acc!(a, gout.clone());
                    acc!(b, gout);
                }
                Op::Sub(a, b) => {
                    acc!(a, gout.clone());
                    acc!(b, gout.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc!(a, gout.mul(self.value(b)));
                    acc!(b, gout.mul(self.value(a)));
                }
                Op::Scale(a, c) => acc!(a, gout.scale(c)),
                Op::MatMul(a, b) => {
                    let bt = self.value(b).transposed();
                    acc!(a, gout.matmul(&bt));
                    let at = self.value(a).transposed();
                    acc!(b, at.matmul(&gout));
                }
                Op::Transpose(a) => acc!(a, gout.transposed()),
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    acc!(a, gout.clone().reshaped(&shape));
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let (r, c) = y.dims2();
                    let mut dx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let yr = &y.data()[i * c..(i + 1) * c];
                        let gr = &gout.data()[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for ((d, &yv), &gv) in dx.data_mut()[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(yr)
                            .zip(gr)
                        {
                            *d = yv * (gv - dot);
                        }
                    }
                    acc!(a, dx);
                }
                Op::Silu(a) => {
                    let x = self.value(a);
                    let dx = Tensor::from_vec(
                        x.shape(),
                        x.data()
                            .iter()
                            .zip(gout.data())
                            .map(|(&xv, &gv)| {
                                let s = math::sigmoid(xv);
                                gv * s * (1.0 + xv * (1.0 - s))
                            })
                            .collect(),
                    );
                    acc!(a, dx);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    eps,
                } => {
                    let (dx, dgamma, dbeta) = group_norm_backward(
                        self.value(x),
                        self.value(gamma),
                        groups,
                        eps,
                        &gout,
                    );
                    acc!(x, dx);
                    acc!(gamma, dgamma);
                    acc!(beta, dbeta);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let want_dx = self.nodes[x.0].needs_grad;
                    let (dx, dw, db) =
                        conv2d_backward(self.value(x), self.value(w), stride, pad, &gout, want_dx);
                    if let Some(dx) = dx {
                        acc!(x, dx);
                    }
                    acc!(w, dw);
                    acc!(b, db);
                }
                Op::ConcatCols(a, b) => {
                    let (r, c1) = self.value(a).dims2();
                    let (_, c2) = self.value(b).dims2();
                    let mut da = Tensor::zeros(&[r, c1]);
                    let mut db = Tensor::zeros(&[r, c2]);
                    for i in 0..r {
                        da.data_mut()[i * c1..(i + 1) * c1]
                            .copy_from_slice(&gout.data()[i * (c1 + c2)..i * (c1 + c2) + c1]);
                        db.data_mut()[i * c2..(i + 1) * c2]
                            .copy_from_slice(&gout.data()[i * (c1 + c2) + c1..(i + 1) * (c1 + c2)]);
                    }
                    acc!(a, da);
                    acc!(b, db);
                }
                Op::ConcatChannels(a, b) => {
                    let sa = self.value(a).shape().to_vec();
                    let na = self.value(a).numel();
                    let sb = self.value(b).shape().to_vec();
                    acc!(a, Tensor::from_vec(&sa, gout.data()[..na].to_vec()));
                    acc!(b, Tensor::from_vec(&sb, gout.data()[na..].to_vec()));
                }
                Op::Upsample2x(a) => {
                    let (c, h, w) = self.value(a).dims3();
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                let base = ch * 4 * h * w + 2 * i * 2 * w + 2 * j;
                                dx.data_mut()[ch * h * w + i * w + j] = gout.data()[base]
                                    + gout.data()[base + 1]
                                    + gout.data()[base + 2 * w]
                                    + gout.data()[base + 2 * w + 1];
                            }
                        }
                    }
                    acc!(a, dx);
                }
                Op::AddRowBias(x, b) => {
                    let (r, c) = gout.dims2();
                    let mut db = Tensor::zeros(&[c]);
                    for i in 0..r {
                        for (d, &g) in db.data_mut().iter_mut().zip(&gout.data()[i * c..(i + 1) * c])
                        {
                            *d += g;
                        }
                    }
                    acc!(x, gout.clone());
                    acc!(b, db.reshaped(self.value(b).shape()));
                }
                Op::AddChanBias(x, b) => {
                    let (c, h, w) = gout.dims3();
                    let mut db = Tensor::zeros(&[c]);
                    for ch in 0..c {
                        db.data_mut()[ch] = gout.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
                    }
                    acc!(x, gout.clone());
                    acc!(b, db.reshaped(self.value(b).shape()));
                }
                Op::MulRows(x, s) => {
                    let tx = self.value(x);
                    let ts = self.value(s);
                    let (r, c) = tx.dims2();
                    let mut dx = gout.clone();
                    let mut ds = Tensor::zeros(&[r]);
                    for i in 0..r {
                        let sv = ts.data()[i];
                        let mut acc_s = 0.0;
                        for (d, &xv) in dx.data_mut()[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&tx.data()[i * c..(i + 1) * c])
                        {
                            acc_s += *d * xv;
                            *d *= sv;
                        }
                        ds.data_mut()[i] = acc_s;
                    }
                    acc!(x, dx);
                    acc!(s, ds.reshaped(self.value(s).shape()));
                }
                Op::MeanRowsSubset(x, rows) => {
                    let (r, c) = self.value(x).dims2();
                    let mut dx = Tensor::zeros(&[r, c]);
                    let inv = 1.0 / rows.len() as f64;
                    for &i in &rows {
                        for (d, &g) in dx.data_mut()[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(gout.data())
                        {
                            *d += g * inv;
                        }
                    }
                    acc!(x, dx);
                }
                Op::BroadcastRow(v, n) => {
                    let c = self.value(v).numel();
                    let mut dv = Tensor::zeros(&[c]);
                    for i in 0..n {
                        for (d, &g) in dv
                            .data_mut()
                            .iter_mut()
                            .zip(&gout.data()[i * c..(i + 1) * c])
                        {
                            *d += g;
                        }
                    }
                    acc!(v, dv.reshaped(self.value(v).shape()));
                }
                Op::Embed(table, ids) => {
                    let (v, c) = self.value(table).dims2();
                    let mut dt = Tensor::zeros(&[v, c]);
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, &g) in dt.data_mut()[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&gout.data()[i * c..(i + 1) * c])
                        {
                            *d += g;
                        }
                    }
                    acc!(table, dt);
                }
                Op::Column(x, j) => {
                    let (r, c) = self.value(x).dims2();
                    let mut dx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        dx.data_mut()[i * c + j] = gout.data()[i];
                    }
                    acc!(x, dx);
                }
                Op::MseLoss(a, b) => {
                    let ta = self.value(a);
                    let tb = self.value(b);
                    let n = ta.numel() as f64;
                    let g = gout.data()[0];
                    let da = Tensor::from_vec(
                        ta.shape(),
                        ta.data()
                            .iter()
                            .zip(tb.data())
                            .map(|(&x, &y)| g * 2.0 * (x - y) / n)
                            .collect(),
                    );
                    acc!(b, da.scale(-1.0));
                    acc!(a, da);
                }
            }
        }
        pgrads
    }
}

// ---------------------------------------------------------------------------
// group norm
// ---------------------------------------------------------------------------

fn group_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Tensor {
    let (c, h, w) = x.dims3();
    assert_eq!(c % groups, 0, "channels not divisible by groups");
    assert_eq!(gamma.numel(), c);
    assert_eq!(beta.numel(), c);
    let cg = c / groups;
    let gsz = cg * h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for g in 0..groups {
        let xs = &x.data()[g * gsz..(g + 1) * gsz];
        let mean = xs.iter().sum::<f64>() / gsz as f64;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / gsz as f64;
        let inv = 1.0 / math::sqrt(var + eps);
        for cc in 0..cg {
            let ch = g * cg + cc;
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            for p in 0..h * w {
                let v = x.data()[ch * h * w + p];
                out.data_mut()[ch * h * w + p] = (v - mean) * inv * gm + bt;
            }
        }
    }
    out
}

fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    groups: usize,
    eps: f64,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = x.dims3();
    let cg = c / groups;
    let gsz = cg * h * w;
    let mut dx = Tensor::zeros(&[c, h, w]);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for g in 0..groups {
        let xs = &x.data()[g * gsz..(g + 1) * gsz];
        let mean = xs.iter().sum::<f64>() / gsz as f64;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / gsz as f64;
        let inv = 1.0 / math::sqrt(var + eps);
        // dxh = gout * gamma (per channel); reduce the two projections
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for cc in 0..cg {
            let ch = g * cg + cc;
            let gm = gamma.data()[ch];
            for p in 0..h * w {
                let i = ch * h * w + p;
                let xh = (x.data()[i] - mean) * inv;
                let go = gout.data()[i];
                dgamma.data_mut()[ch] += go * xh;
                dbeta.data_mut()[ch] += go;
                let dxh = go * gm;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
        }
        let m1 = sum_dxh / gsz as f64;
        let m2 = sum_dxh_xh / gsz as f64;
        for cc in 0..cg {
            let ch = g * cg + cc;
            let gm = gamma.data()[ch];
            for p in 0..h * w {
                let i = ch * h * w + p;
                let xh = (x.data()[i] - mean) * inv;
                let dxh = gout.data()[i] * gm;
                dx.data_mut()[i] = inv * (dxh - m1 - xh * m2);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

/// Gather the shifted input plane for kernel offset (dy, dx) into a
/// [c_in, oh*ow] matrix. Stride-1 rows are segment copies; stride-2 gathers.
fn shifted_input(
    x: &Tensor,
    dy: isize,
    dx: isize,
    stride: usize,
    pad: isize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let (cin, h, w) = x.dims3();
    out.fill(0.0);
    for ci in 0..cin {
        let xplane = &x.data()[ci * h * w..(ci + 1) * h * w];
        let oplane = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        if stride == 1 {
            for oi in 0..oh {
                let si = oi as isize + dy - pad;
                if si < 0 || si >= h as isize {
                    continue;
                }
                // source col = oj + dx - pad must lie in [0, w)
                let lo = (-(dx - pad)).max(0) as usize;
                let hi = ((w as isize - (dx - pad)).min(ow as isize)).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                let srow = si as usize * w;
                let soff = (lo as isize + dx - pad) as usize;
                oplane[oi * ow + lo..oi * ow + hi]
                    .copy_from_slice(&xplane[srow + soff..srow + soff + (hi - lo)]);
            }
        } else {
            for oi in 0..oh {
                let si = (oi * stride) as isize + dy - pad;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for oj in 0..ow {
                    let sj = (oj * stride) as isize + dx - pad;
                    if sj >= 0 && sj < w as isize {
                        oplane[oi * ow + oj] = xplane[si as usize * w + sj as usize];
                    }
                }
            }
        }
    }
}

fn conv_out_dims(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, ww) = x.dims3();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be rank-4");
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin, wcin, "conv channel mismatch");
    assert_eq!(kh, kw);
    assert_eq!(b.numel(), cout);
    let (oh, ow) = conv_out_dims(h, ww, kh, stride, pad);
    let mut y = Tensor::zeros(&[cout, oh, ow]);
    let mut xs = vec![0.0; cin * oh * ow];
    let mut wslice = vec![0.0; cout * cin];

    for dy in 0..kh {
        for dx in 0..kw {
            shifted_input(
                x,
                dy as isize,
                dx as isize,
                stride,
                pad as isize,
                oh,
                ow,
                &mut xs,
            );
            for oc in 0..cout {
                for ic in 0..cin {
                    wslice[oc * cin + ic] = w.data()[((oc * cin + ic) * kh + dy) * kw + dx];
                }
            }
            gemm_acc(cout, cin, oh * ow, &wslice, &xs, y.data_mut());
        }
    }
    for oc in 0..cout {
        let bv = b.data()[oc];
        for v in y.data_mut()[oc * oh * ow..(oc + 1) * oh * ow].iter_mut() {
            *v += bv;
        }
    }
    y
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    gout: &Tensor,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (cin, h, ww) = x.dims3();
    let ws = w.shape();
    let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (_, oh, ow) = gout.dims3();
    let ohw = oh * ow;

    let mut db = Tensor::zeros(&[cout]);
    for oc in 0..cout {
        db.data_mut()[oc] = gout.data()[oc * ohw..(oc + 1) * ohw].iter().sum();
    }

    // dW: per offset, dWslice^T [cin, cout] = xs [cin, ohw] . gout^T [ohw, cout]
    let mut gout_t = vec![0.0; ohw * cout];
    transpose_into(gout.data(), &mut gout_t, cout, ohw);
    let mut dw = Tensor::zeros(w.shape());
    let mut xs = vec![0.0; cin * ohw];
    let mut dws_t = vec![0.0; cin * cout];
    for dy in 0..kh {
        for dx in 0..kw {
            shifted_input(
                x,
                dy as isize,
                dx as isize,
                stride,
                pad as isize,
                oh,
                ow,
                &mut xs,
            );
            dws_t.fill(0.0);
            gemm_acc(cin, ohw, cout, &xs, &gout_t, &mut dws_t);
            for oc in 0..cout {
                for ic in 0..cin {
                    dw.data_mut()[((oc * cin + ic) * kh + dy) * kw + dx] = dws_t[ic * cout + oc];
                }
            }
        }
    }

    let dx_out = if want_dx {
        // one GEMM: t [cin*kh*kw, ohw] = wflat^T [cin*kk, cout] . gout [cout, ohw]
        let kk = kh * kw;
        let mut wflat_t = vec![0.0; cin * kk * cout];
        // wflat[oc, (ic,dy,dx)] -> transpose
        for oc in 0..cout {
            for icdd in 0..cin * kk {
                wflat_t[icdd * cout + oc] = w.data()[oc * cin * kk + icdd];
            }
        }
        let mut t = vec![0.0; cin * kk * ohw];
        gemm_acc(cin * kk, cout, ohw, &wflat_t, gout.data(), &mut t);
        // scatter-add back through the shift map
        let mut dx = Tensor::zeros(&[cin, h, ww]);
        for ic in 0..cin {
            for dy in 0..kh {
                for dx_off in 0..kw {
                    let trow = &t[((ic * kh + dy) * kw + dx_off) * ohw..][..ohw];
                    let dplane = &mut dx.data_mut()[ic * h * ww..(ic + 1) * h * ww];
                    for oi in 0..oh {
                        let si = (oi * stride) as isize + dy as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let sj = (oj * stride) as isize + dx_off as isize - pad as isize;
                            if sj >= 0 && sj < ww as isize {
                                dplane[si as usize * ww + sj as usize] += trow[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    (dx_out, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Finite-difference check harness: `build` constructs a scalar loss from
    /// a graph over `params`; every parameter coordinate is probed centrally.
    fn check_grads(params: &mut [Tensor], build: impl Fn(&mut Graph) -> Var, tol: f64) {
        let mut g = Graph::new(params);
        let loss = build(&mut g);
        let analytic = g.backward(loss);
        drop(g);
        let eps = 1e-5;
        for p in 0..params.len() {
            let ga = analytic[p].clone().expect("param has grad");
            for i in 0..params[p].numel() {
                let orig = params[p].data()[i];
                params[p].data_mut()[i] = orig + eps;
                let mut gp = Graph::new(params);
                let lp = build(&mut gp);
                let fplus = gp.value(lp).data()[0];
                drop(gp);
                params[p].data_mut()[i] = orig - eps;
                let mut gm = Graph::new(params);
                let lm = build(&mut gm);
                let fminus = gm.value(lm).data()[0];
                drop(gm);
                params[p].data_mut()[i] = orig;
                let num = (fplus - fminus) / (2.0 * eps);
                let ana = ga.data()[i];
                let denom = num.abs().max(ana.abs()).max(1e-8);
                assert!(
                    (num - ana).abs() / denom < tol,
                    "param {p} elem {i}: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.normal() * 0.5).collect())
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = Rng::new(21);
        let mut params = vec![rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 5])];
        let x = rand_t(&mut rng, &[2, 3]);
        let tgt = rand_t(&mut rng, &[2, 5]);
        check_grads(
            &mut params,
            |g| {
                let a = g.param(0);
                let b = g.param(1);
                let xc = g.constant(x.clone());
                let h = g.matmul(xc, a);
                let y = g.matmul(h, b);
                let t = g.constant(tgt.clone());
                g.mse_loss(y, t)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_softmax_silu_elementwise() {
        let mut rng = Rng::new(22);
        let mut params = vec![rand_t(&mut rng, &[4, 6])];
        let tgt = rand_t(&mut rng, &[4, 6]);
        check_grads(
            &mut params,
            |g| {
                let a = g.param(0);
                let s = g.softmax_rows(a);
                let u = g.silu(s);
                let t = g.constant(tgt.clone());
                g.mse_loss(u, t)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d_3x3_and_1x1() {
        let mut rng = Rng::new(23);
        let mut params = vec![
            rand_t(&mut rng, &[4, 3, 3, 3]),
            rand_t(&mut rng, &[4]),
            rand_t(&mut rng, &[2, 4, 1, 1]),
            rand_t(&mut rng, &[2]),
            rand_t(&mut rng, &[3, 6, 6]),
        ];
        let tgt = rand_t(&mut rng, &[2, 6, 6]);
        check_grads(
            &mut params,
            |g| {
                let x = g.param(4);
                let w1 = g.param(0);
                let b1 = g.param(1);
                let h = g.conv2d(x, w1, b1, 1, 1);
                let w2 = g.param(2);
                let b2 = g.param(3);
                let y = g.conv2d(h, w2, b2, 1, 0);
                let t = g.constant(tgt.clone());
                g.mse_loss(y, t)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d_stride2() {
        let mut rng = Rng::new(24);
        let mut params = vec![
            rand_t(&mut rng, &[5, 3, 3, 3]),
            rand_t(&mut rng, &[5]),
            rand_t(&mut rng, &[3, 8, 8]),
        ];
        let tgt = rand_t(&mut rng, &[5, 4, 4]);
        check_grads(
            &mut params,
            |g| {
                let x = g.param(2);
                let w = g.param(0);
                let b = g.param(1);
                let y = g.conv2d(x, w, b, 2, 1);
                let t = g.constant(tgt.clone());
                g.mse_loss(y, t)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_group_norm() {
        let mut rng = Rng::new(25);
        let mut params = vec![
            rand_t(&mut rng, &[4, 3, 3]),
            rand_t(&mut rng, &[4]),
            rand_t(&mut rng, &[4]),
        ];
        let tgt = rand_t(&mut rng, &[4, 3, 3]);
        check_grads(
            &mut params,
            |g| {
                let x = g.param(0);
                let gamma = g.param(1);
                let beta = g.param(2);
                let y = g.group_norm(x, gamma, beta, 2, 1e-5);
                let t = g.constant(tgt.clone());
                g.mse_loss(y, t)
            },
            1e-4,
        );
    }

    #[test]
    fn grad_structural_ops() {
        let mut rng = Rng::new(26);
        let mut params = vec![
            rand_t(&mut rng, &[3, 4]),
            rand_t(&mut rng, &[3, 2]),
            rand_t(&mut rng, &[3]),
            rand_t(&mut rng, &[6]),
        ];
        let tgt = rand_t(&mut rng, &[3, 6]);
        check_grads(
            &mut params,
            |g| {
                let a = g.param(0);
                let b = g.param(1);
                let s = g.param(2);
                let bias = g.param(3);
                let cat = g.concat_cols(a, b);
                let scaled = g.mul_rows(cat, s);
                let biased = g.add_row_bias(scaled, bias);
                let t = g.constant(tgt.clone());
                g.mse_loss(biased, t)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_spatial_ops() {
        let mut rng = Rng::new(27);
        let mut params = vec![rand_t(&mut rng, &[2, 3, 3]), rand_t(&mut rng, &[2, 3, 3]), rand_t(&mut rng, &[4])];
        let tgt = rand_t(&mut rng, &[4, 6, 6]);
        check_grads(
            &mut params,
            |g| {
                let a = g.param(0);
                let b = g.param(1);
                let bias = g.param(2);
                let cat = g.concat_channels(a, b);
                let up = g.upsample2x(cat);
                let y = g.add_chan_bias(up, bias);
                let t = g.constant(tgt.clone());
                g.mse_loss(y, t)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_embed_mean_broadcast_column() {
        let mut rng = Rng::new(28);
        let mut params = vec![rand_t(&mut rng, &[7, 5])];
        let tgt = rand_t(&mut rng, &[4, 5]);
        check_grads(
            &mut params,
            |g| {
                let table = g.param(0);
                let e = g.embed(table, vec![1, 3, 3, 6]);
                let pooled = g.mean_rows_subset(e, vec![0, 1, 2]);
                let b = g.broadcast_row(pooled, 4);
                let y = g.add(e, b);
                let t = g.constant(tgt.clone());
                g.mse_loss(y, t)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_column_and_transpose() {
        let mut rng = Rng::new(29);
        let mut params = vec![rand_t(&mut rng, &[4, 3])];
        let tgt = rand_t(&mut rng, &[3, 4]);
        check_grads(
            &mut params,
            |g| {
                let a = g.param(0);
                let at = g.transpose(a);
                let col = g.column(a, 1);
                let colm = g.reshape(col, &[4]);
                let b = g.broadcast_row(colm, 3);
                let y = g.add(at, b);
                let t = g.constant(tgt.clone());
                g.mse_loss(y, t)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = Rng::new(30);
        let x = rand_t(&mut rng, &[3, 5, 7]);
        let w = rand_t(&mut rng, &[2, 3, 3, 3]);
        let b = rand_t(&mut rng, &[2]);
        let y = conv2d_forward(&x, &w, &b, 1, 1);
        // direct quadruple loop oracle
        for oc in 0..2 {
            for oi in 0..5usize {
                for oj in 0..7usize {
                    let mut s = b.data()[oc];
                    for ic in 0..3 {
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let si = oi as isize + dy as isize - 1;
                                let sj = oj as isize + dx as isize - 1;
                                if si >= 0 && si < 5 && sj >= 0 && sj < 7 {
                                    s += w.data()[((oc * 3 + ic) * 3 + dy) * 3 + dx]
                                        * x.data()[ic * 35 + si as usize * 7 + sj as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[oc * 35 + oi * 7 + oj];
                    assert!((got - s).abs() < 1e-10, "({oc},{oi},{oj}): {got} vs {s}");
                }
            }
        }
    }
}
