use std::collections::HashMap;

use super::kernels::{self, ConvGeometry, GroupStats, View};
use super::{Array, NumericsError, Real};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    AddChannelVec {
        x: Var,
        v: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    ConcatChannels(Var, Var),
    Upsample2x(Var),
    Reshape(Var),
    TileBatch(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<E> {
    value: Array<E>,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Gradients of a scalar loss keyed by parameter key.
#[derive(Debug, Clone, Default)]
pub struct Gradients<E> {
    map: HashMap<usize, Array<E>>,
}

impl<E: Real> Gradients<E> {
    pub fn get(&self, key: usize) -> Option<&Array<E>> {
        self.map.get(&key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Array<E>)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    /// Euclidean norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|a| a.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Records operations for one forward pass and replays them in reverse.
///
/// Nodes are appended in creation order, so walking the node list backwards
/// is a reverse topological order and every node is visited once.
#[derive(Debug)]
pub struct Graph<E: Real = f32> {
    nodes: Vec<Node<E>>,
    params: HashMap<usize, Var>,
    scope: String,
    consumed: bool,
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            scope: String::new(),
            consumed: false,
        }
    }

    /// Names the layer currently being recorded; used in non-finite diagnostics.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Array<E>) -> Var {
        self.push_unchecked(value, Op::Leaf, false, None)
    }

    /// Trainable input identified by `key`. Repeated calls with the same key
    /// return the same node so fan-out gradients accumulate.
    pub fn param(&mut self, key: usize, value: &Array<E>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push_unchecked(value.clone(), Op::Leaf, true, Some(key));
        self.params.insert(key, v);
        v
    }

    /// Like [`Graph::param`] but never receives a gradient.
    pub fn frozen_param(&mut self, key: usize, value: &Array<E>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push_unchecked(value.clone(), Op::Leaf, false, None);
        self.params.insert(key, v);
        v
    }

    fn push_unchecked(
        &mut self,
        value: Array<E>,
        op: Op,
        requires_grad: bool,
        param: Option<usize>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Array<E>,
        op: Op,
        parents: &[Var],
    ) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite {
                op: name,
                scope: self.scope.clone(),
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad, None))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        self.value(a).expect_same_shape(op, self.value(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let f = E::of(factor);
        let out = self.value(a).map(|x| x * f);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| {
            let v = x.as_f64();
            E::of(v / (1.0 + (-v).exp()))
        });
        self.push("silu", out, Op::Silu(a), &[a])
    }

    /// Adds a vector along `axis` (per-channel bias).
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                lhs: shape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for o in 0..outer {
            for (a, &bv) in b.iter().enumerate().take(len) {
                let base = (o * len + a) * inner;
                for v in &mut out.data_mut()[base..base + inner] {
                    *v += bv;
                }
            }
        }
        self.push("add_bias", out, Op::AddBias { x, bias, axis }, &[x, bias])
    }

    /// Adds a per-sample, per-channel vector `v: [n, c]` to `x: [n, c, ...]`.
    pub fn add_channel_vec(&mut self, x: Var, v: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(v) != &shape[..2] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_channel_vec",
                lhs: shape,
                rhs: self.shape(v).to_vec(),
            });
        }
        let inner: usize = shape[2..].iter().product();
        let mut out = self.value(x).clone();
        for (i, &vv) in self.value(v).data().iter().enumerate() {
            for o in &mut out.data_mut()[i * inner..(i + 1) * inner] {
                *o += vv;
            }
        }
        self.push("add_channel_vec", out, Op::AddChannelVec { x, v }, &[x, v])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        self.bmm(a, b, false, false)
    }

    /// Batched product `op(a)·op(b)` where `op` optionally transposes the two
    /// trailing axes. Accepts rank-2 (single matrix) or rank-3 operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NumericsError> {
        let dims = bmm_dims(self.shape(a), self.shape(b), ta, tb)?;
        let BmmDims { batch, m, k, n, .. } = dims;
        let mut out = vec![E::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                E::one(),
                &av[i * m * k..(i + 1) * m * k],
                dims.view_a(ta),
                &bv[i * k * n..(i + 1) * k * n],
                dims.view_b(tb),
                E::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                View::plain(n),
            );
        }
        let shape = if self.shape(a).len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let out = Array::from_vec(shape, out)?;
        self.push("bmm", out, Op::Bmm { a, b, ta, tb }, &[a, b])
    }

    /// Cross-correlation of `x: [c_in,h,w]` or `[n,c_in,h,w]` with
    /// `w: [c_out,c_in,kh,kw]`. Output extents use floor division.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, c_in, h, wd) = match *xs.as_slice() {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(NumericsError::InvalidShape {
                    op: "conv2d",
                    shape: xs,
                    reason: "input must be rank 3 or 4".into(),
                })
            }
        };
        let &[c_out, wc_in, kh, kw] = ws.as_slice() else {
            return Err(NumericsError::InvalidShape {
                op: "conv2d",
                shape: ws,
                reason: "kernel must be rank 4".into(),
            });
        };
        if wc_in != c_in {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(NumericsError::InvalidShape {
                op: "conv2d",
                shape: ws,
                reason: "kernel extents must be odd and stride positive".into(),
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(NumericsError::InvalidShape {
                op: "conv2d",
                shape: xs,
                reason: format!("padded input smaller than {kh}x{kw} kernel"),
            });
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (wd + 2 * pad - kw) / stride + 1,
        };
        let mut out = vec![E::zero(); batch * c_out * geom.out_pixels()];
        kernels::conv2d_forward(
            &geom,
            batch,
            c_out,
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
        );
        let shape = if xs.len() == 3 {
            vec![c_out, geom.h_out, geom.w_out]
        } else {
            vec![batch, c_out, geom.h_out, geom.w_out]
        };
        let out = Array::from_vec(shape, out)?;
        self.push("conv2d", out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Group normalization over `x: [n, c, ...]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || groups == 0 || !shape[1].is_multiple_of(groups) {
            return Err(NumericsError::InvalidShape {
                op: "group_norm",
                shape,
                reason: format!("channels not divisible into {groups} groups"),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NumericsError::ShapeMismatch {
                op: "group_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let spatial: usize = shape[2..].iter().product();
        let mut out = Array::zeros(shape);
        let stats = kernels::group_norm_forward(
            n,
            c,
            spatial,
            groups,
            eps,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            out.data_mut(),
        );
        self.push(
            "group_norm",
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::InvalidShape {
                op: "softmax",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut out = Array::zeros(shape.clone());
        kernels::softmax_forward(&shape, axis, self.value(x).data(), out.data_mut());
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Concatenates along axis 1 (channels).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_channels",
                lhs: sa,
                rhs: sb,
            });
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut data = Vec::with_capacity(sa[0] * (ca + cb));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for n in 0..sa[0] {
            data.extend_from_slice(&av[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&bv[n * cb..(n + 1) * cb]);
        }
        let mut shape = sa;
        shape[1] += sb[1];
        let out = Array::from_vec(shape, data)?;
        self.push("concat_channels", out, Op::ConcatChannels(a, b), &[a, b])
    }

    /// Nearest-neighbour 2× upsampling of the two trailing axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(NumericsError::InvalidShape {
                op: "upsample2x",
                shape,
                reason: "needs two spatial axes".into(),
            });
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes: usize = shape[..r - 2].iter().product();
        let src = self.value(x).data();
        let mut data = vec![E::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = 2 * h;
        out_shape[r - 1] = 2 * w;
        let out = Array::from_vec(out_shape, data)?;
        self.push("upsample2x", out, Op::Upsample2x(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Repeats a leading-axis-1 array `n` times along the leading axis.
    pub fn tile_batch(&mut self, x: Var, n: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&1) || n == 0 {
            return Err(NumericsError::InvalidShape {
                op: "tile_batch",
                shape,
                reason: "leading axis must be 1".into(),
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let mut out_shape = shape;
        out_shape[0] = n;
        let out = Array::from_vec(out_shape, data)?;
        self.push("tile_batch", out, Op::TileBatch(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let total = self.value(x).sum();
        self.push("sum", Array::scalar(E::of(total)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let m = self.value(x).mean();
        self.push("mean", Array::scalar(E::of(m)), Op::Mean(x), &[x])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Reverse pass from a scalar `loss`. Every parameter registered on this
    /// graph gets an entry; parameters the loss does not reach get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>, NumericsError> {
        if self.consumed {
            return Err(NumericsError::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Array<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::ones(nodes[loss.0].value.shape().to_vec()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(key) = node.param {
                out.map.insert(key, g);
                continue;
            }
            backprop_node(nodes, &mut grads, node, &g);
        }

        for (&key, v) in &self.params {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            out.map
                .entry(key)
                .or_insert_with(|| Array::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        Ok(out)
    }
}

/// Lazily allocates a parent's gradient buffer and hands it to `f`.
fn accumulate<E: Real>(
    nodes: &[Node<E>],
    grads: &mut [Option<Array<E>>],
    parent: Var,
    f: impl FnOnce(&mut [E]),
) {
    let node = &nodes[parent.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[parent.0].get_or_insert_with(|| Array::zeros(node.value.shape().to_vec()));
    f(buf.data_mut());
}

fn backprop_node<E: Real>(
    nodes: &[Node<E>],
    grads: &mut [Option<Array<E>>],
    node: &Node<E>,
    g: &Array<E>,
) {
    let gd = g.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for p in [*a, *b] {
                accumulate(nodes, grads, p, |d| add_into(d, gd));
            }
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, gd));
            accumulate(nodes, grads, *b, |d| {
                for (o, &x) in d.iter_mut().zip(gd) {
                    *o -= x;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| {
                for ((o, &x), &y) in d.iter_mut().zip(gd).zip(bv) {
                    *o += x * y;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((o, &x), &y) in d.iter_mut().zip(gd).zip(av) {
                    *o += x * y;
                }
            });
        }
        Op::Scale(a, f) => {
            let f = E::of(*f);
            accumulate(nodes, grads, *a, |d| {
                for (o, &x) in d.iter_mut().zip(gd) {
                    *o += x * f;
                }
            });
        }
        Op::Silu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |d| {
                for ((o, &x), &gv) in d.iter_mut().zip(av).zip(gd) {
                    let x = x.as_f64();
                    let s = 1.0 / (1.0 + (-x).exp());
                    *o += E::of(gv.as_f64() * s * (1.0 + x * (1.0 - s)));
                }
            });
        }
        Op::AddBias { x, bias, axis } => {
            accumulate(nodes, grads, *x, |d| add_into(d, gd));
            let (outer, len, inner) = kernels::axis_split(g.shape(), *axis);
            accumulate(nodes, grads, *bias, |d| {
                let mut acc = vec![0.0f64; len];
                for o in 0..outer {
                    for (a, slot) in acc.iter_mut().enumerate() {
                        let base = (o * len + a) * inner;
                        *slot += gd[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                for (o, a) in d.iter_mut().zip(acc) {
                    *o += E::of(a);
                }
            });
        }
        Op::AddChannelVec { x, v } => {
            accumulate(nodes, grads, *x, |d| add_into(d, gd));
            let inner: usize = g.shape()[2..].iter().product();
            accumulate(nodes, grads, *v, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    *o += E::of(
                        gd[i * inner..(i + 1) * inner]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum(),
                    );
                }
            });
        }
        Op::Bmm { a, b, ta, tb } => {
            let dims = bmm_dims(nodes[a.0].value.shape(), nodes[b.0].value.shape(), *ta, *tb)
                .expect("shapes validated in forward");
            let BmmDims { batch, m, k, n, .. } = dims;
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| {
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let di = &mut d[i * m * k..(i + 1) * m * k];
                    if !*ta {
                        // dA[m,k] = dC[m,n] · op(B)ᵀ
                        kernels::gemm(m, n, k, E::one(), gi, View::plain(n), bi, dims.view_b_t(*tb), E::one(), di, View::plain(k));
                    } else {
                        // stored [k,m]: dAᵀ = op(B) · dCᵀ
                        kernels::gemm(k, n, m, E::one(), bi, dims.view_b(*tb), gi, View::transposed(n), E::one(), di, View::plain(m));
                    }
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let di = &mut d[i * k * n..(i + 1) * k * n];
                    if !*tb {
                        // dB[k,n] = op(A)ᵀ · dC
                        kernels::gemm(k, m, n, E::one(), ai, dims.view_a_t(*ta), gi, View::plain(n), E::one(), di, View::plain(n));
                    } else {
                        // stored [n,k]: dBᵀ = dCᵀ · op(A)
                        kernels::gemm(n, m, k, E::one(), gi, View::transposed(n), ai, dims.view_a(*ta), E::one(), di, View::plain(k));
                    }
                }
            });
        }
        Op::Conv2d { x, w, geom } => {
            let xs = nodes[x.0].value.shape();
            let batch = if xs.len() == 3 { 1 } else { xs[0] };
            let c_out = nodes[w.0].value.shape()[0];
            let (xv, wv) = (val(*x), val(*w));
            let need_x = nodes[x.0].requires_grad;
            let need_w = nodes[w.0].requires_grad;
            let mut dx = need_x.then(|| vec![E::zero(); xv.len()]);
            let mut dw = need_w.then(|| vec![E::zero(); wv.len()]);
            kernels::conv2d_backward(
                geom,
                batch,
                c_out,
                xv,
                wv,
                gd,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, |d| add_into(d, &dx));
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, |d| add_into(d, &dw));
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            stats,
        } => {
            let shape = nodes[x.0].value.shape();
            let (n, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let mut dx = nodes[x.0].requires_grad.then(|| vec![E::zero(); gd.len()]);
            let mut dg = nodes[gamma.0].requires_grad.then(|| vec![E::zero(); c]);
            let mut db = nodes[beta.0].requires_grad.then(|| vec![E::zero(); c]);
            kernels::group_norm_backward(
                n,
                c,
                spatial,
                *groups,
                stats,
                val(*x),
                val(*gamma),
                gd,
                dx.as_deref_mut(),
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (p, buf) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                if let Some(buf) = buf {
                    accumulate(nodes, grads, p, |d| add_into(d, &buf));
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                kernels::softmax_backward(g.shape(), *axis, y, gd, d)
            });
        }
        Op::ConcatChannels(a, b) => {
            let shape = g.shape();
            let inner: usize = shape[2..].iter().product();
            let ca = nodes[a.0].value.shape()[1] * inner;
            let cb = nodes[b.0].value.shape()[1] * inner;
            accumulate(nodes, grads, *a, |d| {
                for s in 0..shape[0] {
                    add_into(&mut d[s * ca..(s + 1) * ca], &gd[s * (ca + cb)..s * (ca + cb) + ca]);
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for s in 0..shape[0] {
                    add_into(
                        &mut d[s * cb..(s + 1) * cb],
                        &gd[s * (ca + cb) + ca..(s + 1) * (ca + cb)],
                    );
                }
            });
        }
        Op::Upsample2x(x) => {
            let xs = nodes[x.0].value.shape();
            let r = xs.len();
            let (h, w) = (xs[r - 2], xs[r - 1]);
            let planes: usize = xs[..r - 2].iter().product();
            accumulate(nodes, grads, *x, |d| {
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
            });
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |d| add_into(d, gd)),
        Op::TileBatch(x) => {
            accumulate(nodes, grads, *x, |d| {
                for chunk in gd.chunks(d.len()) {
                    add_into(d, chunk);
                }
            });
        }
        Op::Sum(x) => {
            let gv = gd[0];
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|o| *o += gv));
        }
        Op::Mean(x) => {
            let len = nodes[x.0].value.len().max(1);
            let gv = E::of(gd[0].as_f64() / len as f64);
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|o| *o += gv));
        }
    }
}

fn add_into<E: Real>(dst: &mut [E], src: &[E]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

#[derive(Clone, Copy, Debug)]
struct BmmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// Stored column counts of `a` and `b`.
    a_cols: usize,
    b_cols: usize,
}

impl BmmDims {
    fn view_a(&self, ta: bool) -> View {
        if ta {
            View::transposed(self.a_cols)
        } else {
            View::plain(self.a_cols)
        }
    }

    fn view_a_t(&self, ta: bool) -> View {
        self.view_a(!ta)
    }

    fn view_b(&self, tb: bool) -> View {
        if tb {
            View::transposed(self.b_cols)
        } else {
            View::plain(self.b_cols)
        }
    }

    fn view_b_t(&self, tb: bool) -> View {
        self.view_b(!tb)
    }
}

fn bmm_dims(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Result<BmmDims, NumericsError> {
    let mismatch = || NumericsError::ShapeMismatch {
        op: "bmm",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    let (batch, ar, ac, br, bc) = match (sa, sb) {
        (&[ar, ac], &[br, bc]) => (1, ar, ac, br, bc),
        (&[na, ar, ac], &[nb, br, bc]) if na == nb => (na, ar, ac, br, bc),
        _ => return Err(mismatch()),
    };
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(mismatch());
    }
    Ok(BmmDims {
        batch,
        m,
        k,
        n,
        a_cols: ac,
        b_cols: bc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array<f64> {
        Array::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(arr(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let a = g.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let id = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(id).data(), &[5.0, 6.0, 7.0, 8.0]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_and_mismatch() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Array::zeros([2, 3]));
        let b = g.constant(Array::from_vec([3, 4], (0..12).map(|v| v as f32).collect()).unwrap());
        let out = g.matmul(z, b).unwrap();
        assert_eq!(g.shape(out), &[2, 4]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            g.matmul(b, z),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(0, &arr(&[2], &[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let used = g.param(0, &arr(&[2], &[1.0, 2.0]));
        let _unused = g.param(1, &arr(&[3], &[1.0, 2.0, 3.0]));
        let loss = g.sum(used).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(1).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let w = g.param(0, &arr(&[1], &[3.0]));
        let loss = g.sum(w).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss).unwrap_err(), NumericsError::GraphConsumed);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.param(0, &arr(&[1], &[3.0]));
        let twice = g.add(w, w).unwrap();
        let loss = g.sum(twice).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[2.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(arr(&[3], &[0.0, 0.0, 0.0]));
        let sa = g.softmax(a, 0).unwrap();
        for &v in g.value(sa).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = g.constant(arr(&[2], &[1000.0, 1000.0]));
        let sb = g.softmax(b, 0).unwrap();
        assert_eq!(g.value(sb).data(), &[0.5, 0.5]);
        let c = g.constant(arr(&[2], &[0.0, 3f64.ln()]));
        let sc = g.softmax(c, 0).unwrap();
        assert!((g.value(sc).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(sc).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn non_finite_values_are_reported_with_scope() {
        let mut g = Graph::<f32>::new();
        g.set_scope("probe");
        let a = g.constant(Array::full([2], f32::MAX));
        let err = g.scale(a, 10.0).unwrap_err();
        assert_eq!(
            err,
            NumericsError::NonFinite {
                op: "scale",
                scope: "probe".into()
            }
        );
    }

    #[test]
    fn conv_identity_kernel_and_shapes() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 5 * 5).map(|v| v as f64).collect();
        let x = g.constant(arr(&[2, 5, 5], &data));
        let mut k = vec![0.0; 2 * 2];
        k[0] = 1.0;
        k[3] = 1.0;
        let w = g.constant(arr(&[2, 2, 1, 1], &k));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let big = g.constant(Array::zeros([3, 16, 16]));
        let w3 = g.constant(Array::zeros([4, 3, 3, 3]));
        let y = g.conv2d(big, w3, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[4, 8, 8]);

        let even = g.constant(Array::zeros([4, 3, 2, 2]));
        assert!(g.conv2d(big, even, 1, 0).is_err());
        let tiny = g.constant(Array::zeros([3, 1, 1]));
        assert!(g.conv2d(tiny, w3, 1, 0).is_err());
    }

    #[test]
    fn conv_all_ones_on_constant_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::ones([1, 5, 5]));
        let w = g.constant(Array::ones([1, 1, 3, 3]));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 4.0);
        assert_eq!(v[4], 4.0);
        assert_eq!(v[20], 4.0);
        assert_eq!(v[24], 4.0);
        assert_eq!(v[2], 6.0);
        assert_eq!(v[6], 9.0);
        assert_eq!(v[12], 9.0);
    }
}
