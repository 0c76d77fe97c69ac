//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Values are computed eagerly; [`Graph::backward`] walks the tape in reverse
//! and returns a [`Gradients`] map. Build a fresh graph per step.

use std::collections::{BTreeMap, HashMap};

use crate::conv::{self, ConvGeom};
use crate::error::{shape_err, NnError, Result};
use crate::gemm::{gemm, View};
use crate::lstm::{self, LstmCache, LstmDims};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{strides, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// A differentiable operation defined outside the engine.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; the op only supplies the vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, given the output gradient.
    /// Entries may be `None` for inputs that need no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Abs,
    Sqrt,
}

pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Lstm { x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool, dims: LstmDims, cache: LstmCache },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Unary { x: Var, kind: Unary },
    Prelu { x: Var, alpha: Var },
    Softmax(Var),
    AvgPool { x: Var, windows: Vec<(usize, usize)> },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Expand { x: Var, axis: usize, count: usize },
    TakeEvery { x: Var, axis: usize, step: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: BTreeMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient for a leaf created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.inputs.get(&v).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert_param(&mut self, id: ParamId, grad: Tensor) {
        self.params.insert(id, grad);
    }

    /// Adds another gradient map in place (parameters only).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(mine) => {
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.params.values_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Records a forward computation for later differentiation.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    no_grad: bool,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// Graph without a parameter store (inputs and constants only).
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            no_grad: false,
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Copies `data` (with `shape`) into the axis order given by `perm`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    // Innermost axis copied in a tight loop.
    let inner_len = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = (0..rank - 1).map(|a| idx[a] * src_strides[a]).sum();
        for i in 0..inner_len {
            out.push(data[base + i * inner_stride]);
        }
        for a in (0..rank - 1).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    (out, out_shape)
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Averaging windows used by `AdaptiveAvgPool1d`.
pub fn adaptive_windows(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| {
            let start = i * len / out;
            let end = ((i + 1) * len).div_ceil(out);
            (start, end)
        })
        .collect()
}

/// Options for 1-D convolution over `[N, L, C]`; weight `[K, C_in/groups, C_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl<'s> Graph<'s> {
    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            no_grad: false,
        }
    }

    /// Graph whose parameters are treated as constants; backward yields nothing.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            no_grad: true,
            ..Self::with_params(store)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls share one node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| NnError::Consistency("graph has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(NnError::Consistency(format!("unknown parameter id {}", id.0)));
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(id),
            needs_grad: !p.frozen && !self.no_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        self.push(t, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        self.push(t, Op::Sub(a, b), "sub", &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        self.push(t, Op::Mul(a, b), "mul", &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|x| x * c).collect())?;
        self.push(t, Op::Scale(a, c), "scale", &[a])
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|x| x + c).collect())?;
        self.push(t, Op::Offset(a), "offset", &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum", &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(NnError::InvalidInput("mean of empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn unary(&mut self, x: Var, kind: Unary, name: &'static str) -> Result<Var> {
        let tx = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |v| v.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Sqrt => f64::sqrt,
        };
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|&v| f(v)).collect())?;
        self.push(t, Op::Unary { x, kind }, name, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu, "relu")
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid, "sigmoid")
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh, "tanh")
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp, "exp")
    }
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Ln, "ln")
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs, "abs")
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt, "sqrt")
    }

    /// Parametric ReLU; `alpha` has one element or one per trailing channel.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (tx, ta) = (self.value(x), self.value(alpha));
        let (_, cols) = tx.rows_cols();
        let na = ta.len();
        if na != 1 && na != cols {
            return shape_err("prelu", format!("alpha has {na} values for {cols} channels"));
        }
        let a = ta.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[if na == 1 { 0 } else { i % cols }] * v })
            .collect();
        let t = Tensor::new(tx.shape(), data)?;
        self.push(t, Op::Prelu { x, alpha }, "prelu", &[x, alpha])
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, cols) = tx.rows_cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(cols.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(tx.shape(), data)?;
        self.push(t, Op::Softmax(x), "softmax", &[x])
    }

    // ---- dense algebra -----------------------------------------------------

    /// `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return shape_err("matmul", format!("{:?} × {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::rm(ta.data(), k), View::rm(tb.data(), n), 0.0, &mut c, n);
        let t = Tensor::new(&[m, n], c)?;
        self.push(t, Op::MatMul(a, b), "matmul", &[a, b])
    }

    /// Batched product `[B, m, k] × [B, k, n]`, or `[B, m, k] × [B, n, k]ᵀ`
    /// when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bad = || shape_err("bmm", format!("{:?} × {:?} (trans_b={trans_b})", ta.shape(), tb.shape()));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return bad();
        }
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return bad();
        }
        let mut c = vec![0.0; bs * m * n];
        for i in 0..bs {
            let av = View::rm(&ta.data()[i * m * k..(i + 1) * m * k], k);
            let bslice = &tb.data()[i * k * n..(i + 1) * k * n];
            let bv = if trans_b { View::rm_t(bslice, k) } else { View::rm(bslice, n) };
            gemm(m, k, n, 1.0, av, bv, 0.0, &mut c[i * m * n..(i + 1) * m * n], n);
        }
        let t = Tensor::new(&[bs, m, n], c)?;
        self.push(t, Op::Bmm { a, b, trans_b }, "bmm", &[a, b])
    }

    /// `x · w + b` over the trailing axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (rows, cin) = tx.rows_cols();
        if tw.rank() != 2 || tw.shape()[0] != cin {
            return shape_err("linear", format!("input {:?}, weight {:?}", tx.shape(), tw.shape()));
        }
        let cout = tw.shape()[1];
        let mut y = vec![0.0; rows * cout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != cout {
                return shape_err("linear", format!("bias {:?} for {cout} outputs", tb.shape()));
            }
            for r in y.chunks_exact_mut(cout) {
                r.copy_from_slice(tb.data());
            }
        }
        gemm(rows, cin, cout, 1.0, View::rm(tx.data(), cin), View::rm(tw.data(), cout), 1.0, &mut y, cout);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let t = Tensor::new(&shape, y)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(t, Op::Linear { x, w, b }, "linear", &ins)
    }

    // ---- convolution -------------------------------------------------------

    fn conv_nd(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_shape: Vec<usize>,
        name: &'static str,
    ) -> Result<Var> {
        if let Some(b) = b {
            if self.value(b).len() != geom.c_out {
                return shape_err(name, format!("bias {:?} for {} outputs", self.shape(b), geom.c_out));
            }
        }
        let y = conv::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&out_shape, y)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(t, Op::Conv { x, w, b, geom }, name, &ins)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_geom(
        &self,
        name: &'static str,
        x: Var,
        w: Var,
        sp_rank: usize,
        stride: [usize; 3],
        pad: [usize; 3],
        dilation: [usize; 3],
        groups: usize,
    ) -> Result<(ConvGeom, Vec<usize>)> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != sp_rank + 2 || sw.len() != sp_rank + 2 {
            return shape_err(name, format!("input {sx:?}, weight {sw:?}"));
        }
        let lead = 3 - sp_rank;
        let mut in_sp = [1; 3];
        let mut kernel = [1; 3];
        in_sp[lead..].copy_from_slice(&sx[1..=sp_rank]);
        kernel[lead..].copy_from_slice(&sw[..sp_rank]);
        let c_in = sx[sp_rank + 1];
        let (cig, c_out) = (sw[sp_rank], sw[sp_rank + 1]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cig * groups != c_in {
            return shape_err(
                name,
                format!("{c_in} input channels, weight expects {cig}×{groups} groups, {c_out} outputs"),
            );
        }
        if stride.iter().any(|&s| s == 0) || dilation.iter().any(|&d| d == 0) || kernel.iter().any(|&k| k == 0) {
            return shape_err(name, "zero stride, dilation, or kernel extent");
        }
        let mut out_sp = [1; 3];
        for a in 0..3 {
            out_sp[a] = ConvGeom::conv_out(in_sp[a], kernel[a], stride[a], pad[a], dilation[a]).ok_or_else(|| {
                NnError::Shape {
                    op: name,
                    detail: format!("input extent {} smaller than dilated kernel {}", in_sp[a], kernel[a]),
                }
            })?;
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_sp,
            out_sp,
            kernel,
            stride,
            pad,
            dilation,
            c_in,
            c_out,
            groups,
        };
        let mut out_shape = vec![sx[0]];
        out_shape.extend_from_slice(&out_sp[lead..]);
        out_shape.push(c_out);
        Ok((geom, out_shape))
    }

    /// 1-D convolution, input `[N, L, C_in]`, weight `[K, C_in/groups, C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv1dSpec) -> Result<Var> {
        let (geom, shape) = self.conv_geom(
            "conv1d",
            x,
            w,
            1,
            [1, 1, spec.stride],
            [0, 0, spec.padding],
            [1, 1, spec.dilation],
            spec.groups,
        )?;
        self.conv_nd(x, w, b, geom, shape, "conv1d")
    }

    /// 2-D convolution, input `[N, H, W, C_in]`, weight `[kh, kw, C_in, C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 2], padding: [usize; 2]) -> Result<Var> {
        let (geom, shape) = self.conv_geom(
            "conv2d",
            x,
            w,
            2,
            [1, stride[0], stride[1]],
            [0, padding[0], padding[1]],
            [1; 3],
            1,
        )?;
        self.conv_nd(x, w, b, geom, shape, "conv2d")
    }

    /// 3-D convolution, input `[N, D, H, W, C_in]`, weight `[kd, kh, kw, C_in, C_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        let (geom, shape) = self.conv_geom("conv3d", x, w, 3, stride, padding, [1; 3], 1)?;
        self.conv_nd(x, w, b, geom, shape, "conv3d")
    }

    fn conv_t_nd(
        &mut self,
        name: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        sp_rank: usize,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != sp_rank + 2 || sw.len() != sp_rank + 2 || sw[0] != sx[sp_rank + 1] {
            return shape_err(name, format!("input {sx:?}, weight {sw:?}"));
        }
        let lead = 3 - sp_rank;
        let mut in_sp = [1; 3];
        let mut kernel = [1; 3];
        in_sp[lead..].copy_from_slice(&sx[1..=sp_rank]);
        kernel[lead..].copy_from_slice(&sw[1..=sp_rank]);
        if stride.iter().any(|&s| s == 0) || kernel.iter().any(|&k| k == 0) || in_sp.iter().any(|&l| l == 0) {
            return shape_err(name, "zero stride, kernel, or input extent");
        }
        let c_out = sw[sp_rank + 1];
        let mut out_sp = [1; 3];
        for a in 0..3 {
            out_sp[a] = ConvGeom::conv_t_out(in_sp[a], kernel[a], stride[a], pad[a]).ok_or_else(|| NnError::Shape {
                op: name,
                detail: format!("padding {} crops the whole output", pad[a]),
            })?;
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return shape_err(name, format!("bias {:?} for {c_out} outputs", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_sp,
            out_sp,
            kernel,
            stride,
            pad,
            dilation: [1; 3],
            c_in: sx[sp_rank + 1],
            c_out,
            groups: 1,
        };
        let y = conv::conv_t_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut shape = vec![sx[0]];
        shape.extend_from_slice(&out_sp[lead..]);
        shape.push(c_out);
        let t = Tensor::new(&shape, y)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(t, Op::ConvT { x, w, b, geom }, name, &ins)
    }

    /// Transposed 1-D convolution, input `[N, L, C_in]`, weight `[C_in, K, C_out]`.
    /// Output length is `(L-1)·stride + K - 2·padding`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv_t_nd("conv_transpose1d", x, w, b, 1, [1, 1, stride], [0, 0, padding])
    }

    /// Transposed 2-D convolution, input `[N, H, W, C_in]`, weight `[C_in, kh, kw, C_out]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Result<Var> {
        self.conv_t_nd(
            "conv_transpose2d",
            x,
            w,
            b,
            2,
            [1, stride[0], stride[1]],
            [0, padding[0], padding[1]],
        )
    }

    // ---- recurrent ---------------------------------------------------------

    /// Runs one LSTM direction over `[N, L, In]`; `w_ih` is `[In, 4H]`,
    /// `w_hh` is `[H, 4H]`, `b` is `[4H]`, gate order `i, f, g, o`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> Result<Var> {
        let (sx, si, sh, sb) = (self.shape(x), self.shape(w_ih), self.shape(w_hh), self.shape(b));
        let ok = sx.len() == 3
            && si.len() == 2
            && sh.len() == 2
            && si[0] == sx[2]
            && si[1] % 4 == 0
            && sh[0] * 4 == si[1]
            && sh[1] == si[1]
            && sb.len() == 1
            && sb[0] == si[1];
        if !ok {
            return shape_err("lstm", format!("input {sx:?}, w_ih {si:?}, w_hh {sh:?}, b {sb:?}"));
        }
        let dims = LstmDims {
            batch: sx[0],
            len: sx[1],
            input: sx[2],
            hidden: sh[0],
        };
        let (out, cache) = lstm::lstm_forward(
            dims,
            self.value(x).data(),
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b).data(),
            reverse,
        );
        let t = Tensor::new(&[dims.batch, dims.len, dims.hidden], out)?;
        self.push(
            t,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                reverse,
                dims,
                cache,
            },
            "lstm",
            &[x, w_ih, w_hh, b],
        )
    }

    // ---- normalization -----------------------------------------------------

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, d) = tx.rows_cols();
        if tg.len() != d || tb.len() != d {
            return shape_err(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            );
        }
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape(), y)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
            &[x, gamma, beta],
        )
    }

    // ---- pooling -----------------------------------------------------------

    fn pool(&mut self, x: Var, windows: Vec<(usize, usize)>, name: &'static str) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        let (n, l, c) = (s[0], s[1], s[2]);
        let o = windows.len();
        let mut y = vec![0.0; n * o * c];
        for b in 0..n {
            for (i, &(st, en)) in windows.iter().enumerate() {
                let dst = &mut y[(b * o + i) * c..(b * o + i + 1) * c];
                for t in st..en {
                    add_into(dst, &tx.data()[(b * l + t) * c..(b * l + t + 1) * c]);
                }
                let inv = 1.0 / (en - st) as f64;
                dst.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let t = Tensor::new(&[n, o, c], y)?;
        self.push(t, Op::AvgPool { x, windows }, name, &[x])
    }

    /// Average pooling over the length axis of `[N, L, C]`.
    pub fn avg_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || kernel == 0 || stride == 0 || s[1] < kernel {
            return shape_err("avg_pool1d", format!("input {s:?}, kernel {kernel}, stride {stride}"));
        }
        let o = (s[1] - kernel) / stride + 1;
        let windows = (0..o).map(|i| (i * stride, i * stride + kernel)).collect();
        self.pool(x, windows, "avg_pool1d")
    }

    /// Adaptive average pooling of `[N, L, C]` to `[N, out, C]`.
    pub fn adaptive_avg_pool1d(&mut self, x: Var, out: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || out == 0 || s[1] == 0 {
            return shape_err("adaptive_avg_pool1d", format!("input {s:?} to length {out}"));
        }
        let windows = adaptive_windows(s[1], out);
        self.pool(x, windows, "adaptive_avg_pool1d")
    }

    // ---- layout ------------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| NnError::InvalidInput("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{s:?} does not match {base:?} off axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
            inputs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x), "reshape", &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return shape_err("permute", format!("{perm:?} for shape {:?}", tx.shape()));
        }
        let (data, shape) = permute_data(tx.data(), tx.shape(), perm);
        let t = Tensor::new(&shape, data)?;
        self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            "permute",
            &[x],
        )
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return shape_err("transpose", format!("axes {a},{b} for shape {:?}", self.shape(x)));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("narrow", format!("[{start}, {}) on axis {axis} of {s:?}", start + len));
        }
        let (outer, n, inner) = split_at_axis(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Narrow { x, axis, start }, "narrow", &[x])
    }

    /// Inserts a new axis at `axis` holding `count` copies of the input.
    pub fn expand(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if axis > s.len() {
            return shape_err("expand", format!("axis {axis} for shape {s:?}"));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let src = &tx.data()[o * inner..(o + 1) * inner];
            for _ in 0..count {
                out.extend_from_slice(src);
            }
        }
        let mut shape = s;
        shape.insert(axis, count);
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Expand { x, axis, count }, "expand", &[x])
    }

    /// Keeps indices `0, step, 2·step, …` along `axis`.
    pub fn take_every(&mut self, x: Var, axis: usize, step: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if axis >= s.len() || step == 0 {
            return shape_err("take_every", format!("axis {axis}, step {step} for shape {s:?}"));
        }
        let (outer, n, inner) = split_at_axis(&s, axis);
        let kept = n.div_ceil(step);
        let mut out = Vec::with_capacity(outer * kept * inner);
        for o in 0..outer {
            for i in (0..n).step_by(step) {
                let base = (o * n + i) * inner;
                out.extend_from_slice(&tx.data()[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = kept;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::TakeEvery { x, axis, step }, "take_every", &[x])
    }

    /// Records an externally computed value with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            name,
            inputs,
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse traversal from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NnError::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Param(id) => {
                    out.params.insert(*id, Tensor::new(node.value.shape(), g)?);
                }
                Op::Leaf => {
                    out.inputs.insert(Var(i), g);
                }
                op => self.backward_op(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn backward_op(&self, op: &Op, y: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        // Runs `$body` against the gradient buffer of `$v` if it needs one.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let mut owned = grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]);
                    {
                        let $buf: &mut Vec<f64> = &mut owned;
                        $body;
                    }
                    grads[v.0] = Some(owned);
                }
            }};
        }
        let val = |v: Var| &nodes[v.0].value;
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc!(*a, |buf| add_into(buf, g));
                acc!(*b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| add_into(buf, g));
                acc!(*b, |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc!(*a, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * tb[i];
                });
                acc!(*b, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * ta[i];
                });
            }
            Op::Scale(a, c) => acc!(*a, |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)),
            Op::Offset(a) => acc!(*a, |buf| add_into(buf, g)),
            Op::Sum(a) => acc!(*a, |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc!(*a, |buf| gemm(m, n, k, 1.0, View::rm(g, n), View::rm_t(tb.data(), n), 1.0, buf, k));
                acc!(*b, |buf| gemm(k, m, n, 1.0, View::rm_t(ta.data(), k), View::rm(g, n), 1.0, buf, n));
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = y.shape()[2];
                let (mk, kn, mn) = (m * k, k * n, m * n);
                acc!(*a, |buf| for i in 0..bs {
                    let gi = View::rm(&g[i * mn..(i + 1) * mn], n);
                    let bsl = &tb.data()[i * kn..(i + 1) * kn];
                    // dA = dC · Bᵀ (or dC · B when B was given transposed)
                    let bv = if *trans_b { View::rm(bsl, k) } else { View::rm_t(bsl, n) };
                    gemm(m, n, k, 1.0, gi, bv, 1.0, &mut buf[i * mk..(i + 1) * mk], k);
                });
                acc!(*b, |buf| for i in 0..bs {
                    let asl = &ta.data()[i * mk..(i + 1) * mk];
                    let gsl = &g[i * mn..(i + 1) * mn];
                    if *trans_b {
                        // dB[n,k] = dCᵀ · A
                        gemm(n, m, k, 1.0, View::rm_t(gsl, n), View::rm(asl, k), 1.0, &mut buf[i * kn..(i + 1) * kn], k);
                    } else {
                        gemm(k, m, n, 1.0, View::rm_t(asl, k), View::rm(gsl, n), 1.0, &mut buf[i * kn..(i + 1) * kn], n);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (rows, cin) = tx.rows_cols();
                let cout = tw.shape()[1];
                acc!(*x, |buf| gemm(rows, cout, cin, 1.0, View::rm(g, cout), View::rm_t(tw.data(), cout), 1.0, buf, cin));
                acc!(*w, |buf| gemm(cin, rows, cout, 1.0, View::rm_t(tx.data(), cin), View::rm(g, cout), 1.0, buf, cout));
                if let Some(b) = b {
                    acc!(*b, |buf| add_into(buf, &conv::col_sums(g, cout)));
                }
            }
            Op::Conv { x, w, b, geom } | Op::ConvT { x, w, b, geom } => {
                let need = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let cg = if matches!(op, Op::Conv { .. }) {
                    conv::conv_backward(geom, val(*x).data(), val(*w).data(), g, need)
                } else {
                    conv::conv_t_backward(geom, val(*x).data(), val(*w).data(), g, need)
                };
                if let Some(d) = cg.dx {
                    acc!(*x, |buf| add_into(buf, &d));
                }
                if let Some(d) = cg.dw {
                    acc!(*w, |buf| add_into(buf, &d));
                }
                if let (Some(b), Some(d)) = (b, cg.db) {
                    acc!(*b, |buf| add_into(buf, &d));
                }
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                reverse,
                dims,
                cache,
            } => {
                let need = [self.needs(*x), self.needs(*w_ih), self.needs(*w_hh), self.needs(*b)];
                let lg = lstm::lstm_backward(
                    *dims,
                    val(*x).data(),
                    val(*w_ih).data(),
                    val(*w_hh).data(),
                    *reverse,
                    y.data(),
                    cache,
                    g,
                    need,
                );
                for (v, d) in [(*x, lg.dx), (*w_ih, lg.dw_ih), (*w_hh, lg.dw_hh), (*b, lg.db)] {
                    if let Some(d) = d {
                        acc!(v, |buf| add_into(buf, &d));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = val(*gamma).data();
                let d = tg.len();
                let rows = rstd.len();
                acc!(*gamma, |buf| for r in 0..rows {
                    for j in 0..d {
                        buf[j] += g[r * d + j] * xhat[r * d + j];
                    }
                });
                acc!(*beta, |buf| add_into(buf, &conv::col_sums(g, d)));
                acc!(*x, |buf| for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = g[r * d + j] * tg[j];
                        m1 += dh;
                        m2 += dh * xhat[r * d + j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let dh = g[r * d + j] * tg[j];
                        buf[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                    }
                });
            }
            Op::Unary { x, kind } => {
                let tx = val(*x).data();
                let ty = y.data();
                acc!(*x, |buf| for i in 0..g.len() {
                    let dydx = match kind {
                        Unary::Relu => {
                            if tx[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => ty[i] * (1.0 - ty[i]),
                        Unary::Tanh => 1.0 - ty[i] * ty[i],
                        Unary::Exp => ty[i],
                        Unary::Ln => 1.0 / tx[i],
                        Unary::Abs => {
                            if tx[i] > 0.0 {
                                1.0
                            } else if tx[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sqrt => 0.5 / ty[i],
                    };
                    buf[i] += g[i] * dydx;
                });
            }
            Op::Prelu { x, alpha } => {
                let tx = val(*x);
                let ta = val(*alpha).data();
                let (_, cols) = tx.rows_cols();
                let na = ta.len();
                let ai = |i: usize| if na == 1 { 0 } else { i % cols };
                acc!(*x, |buf| for (i, &v) in tx.data().iter().enumerate() {
                    buf[i] += if v > 0.0 { g[i] } else { ta[ai(i)] * g[i] };
                });
                acc!(*alpha, |buf| for (i, &v) in tx.data().iter().enumerate() {
                    if v <= 0.0 {
                        buf[ai(i)] += g[i] * v;
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, cols) = y.rows_cols();
                acc!(*x, |buf| for (r, yr) in y.data().chunks_exact(cols).enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        buf[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                });
            }
            Op::AvgPool { x, windows } => {
                let s = val(*x).shape();
                let (n, l, c) = (s[0], s[1], s[2]);
                let o = windows.len();
                acc!(*x, |buf| for b in 0..n {
                    for (i, &(st, en)) in windows.iter().enumerate() {
                        let inv = 1.0 / (en - st) as f64;
                        let gr = &g[(b * o + i) * c..(b * o + i + 1) * c];
                        for t in st..en {
                            for (d, s) in buf[(b * l + t) * c..(b * l + t + 1) * c].iter_mut().zip(gr) {
                                *d += s * inv;
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = y.shape();
                let (outer, total, inner) = split_at_axis(shape, *axis);
                let mut off = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis];
                    acc!(v, |buf| for o in 0..outer {
                        let src = &g[(o * total + off) * inner..(o * total + off + len) * inner];
                        add_into(&mut buf[o * len * inner..(o + 1) * len * inner], src);
                    });
                    off += len;
                }
            }
            Op::Reshape(x) => acc!(*x, |buf| add_into(buf, g)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(g, y.shape(), &inv);
                acc!(*x, |buf| add_into(buf, &back));
            }
            Op::Narrow { x, axis, start } => {
                let s = val(*x).shape();
                let (outer, n, inner) = split_at_axis(s, *axis);
                let len = y.shape()[*axis];
                acc!(*x, |buf| for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    add_into(&mut buf[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                });
            }
            Op::Expand { x, axis, count } => {
                let s = val(*x).shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis..].iter().product();
                acc!(*x, |buf| for o in 0..outer {
                    for c in 0..*count {
                        let src = &g[(o * count + c) * inner..(o * count + c + 1) * inner];
                        add_into(&mut buf[o * inner..(o + 1) * inner], src);
                    }
                });
            }
            Op::TakeEvery { x, axis, step } => {
                let s = val(*x).shape();
                let (outer, n, inner) = split_at_axis(s, *axis);
                let kept = y.shape()[*axis];
                acc!(*x, |buf| for o in 0..outer {
                    for (k, i) in (0..n).step_by(*step).enumerate() {
                        let src = &g[(o * kept + k) * inner..(o * kept + k + 1) * inner];
                        add_into(&mut buf[(o * n + i) * inner..(o * n + i + 1) * inner], src);
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gi = op.backward(&ins, y, g);
                if gi.len() != inputs.len() {
                    return Err(NnError::Consistency(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gi.len(),
                        inputs.len()
                    )));
                }
                for (&v, d) in inputs.iter().zip(gi) {
                    if let Some(d) = d {
                        if d.len() != val(v).len() {
                            return Err(NnError::Consistency(format!("{} gradient has wrong length", op.name())));
                        }
                        acc!(v, |buf| add_into(buf, &d));
                    }
                }
            }
        }
        Ok(())
    }
}
