//! Parameterized layers built on [`Graph`] primitives.

use crate::error::{shape_err, Result};
use crate::graph::{Conv1dSpec, Graph, Var};
use crate::params::{Init, ParamId, ParamStore};

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

fn bind(g: &mut Graph<'_>, b: Option<ParamId>) -> Result<Option<Var>> {
    b.map(|id| g.param(id)).transpose()
}

/// Fully connected layer over the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let w = store.add(&join(name, "w"), &[in_dim, out_dim], Init::FanIn(in_dim), false)?;
        let b = bias
            .then(|| store.add(&join(name, "b"), &[out_dim], Init::FanIn(in_dim), false))
            .transpose()?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = bind(g, self.b)?;
        g.linear(x, w, b)
    }
}

/// 1-D convolution over `[N, L, C]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv1dSpec,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv1dSpec,
        bias: bool,
    ) -> Result<Self> {
        if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return shape_err("conv1d", format!("{c_in}→{c_out} channels with {} groups", spec.groups));
        }
        let cig = c_in / spec.groups;
        let w = store.add(&join(name, "w"), &[kernel, cig, c_out], Init::FanIn(kernel * cig), false)?;
        let b = bias
            .then(|| store.add(&join(name, "b"), &[c_out], Init::FanIn(kernel * cig), false))
            .transpose()?;
        Ok(Self { w, b, spec })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = bind(g, self.b)?;
        g.conv1d(x, w, b, self.spec)
    }
}

/// 2-D convolution over `[N, H, W, C]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        frozen: bool,
    ) -> Result<Self> {
        let fan = kernel[0] * kernel[1] * c_in;
        let w = store.add(&join(name, "w"), &[kernel[0], kernel[1], c_in, c_out], Init::FanIn(fan), frozen)?;
        let b = store.add(&join(name, "b"), &[c_out], Init::FanIn(fan), frozen)?;
        Ok(Self {
            w,
            b: Some(b),
            stride,
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = bind(g, self.b)?;
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// 3-D convolution over `[N, D, H, W, C]`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        frozen: bool,
    ) -> Result<Self> {
        let fan = kernel.iter().product::<usize>() * c_in;
        let mut shape = kernel.to_vec();
        shape.extend([c_in, c_out]);
        let w = store.add(&join(name, "w"), &shape, Init::FanIn(fan), frozen)?;
        let b = store.add(&join(name, "b"), &[c_out], Init::FanIn(fan), frozen)?;
        Ok(Self {
            w,
            b: Some(b),
            stride,
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = bind(g, self.b)?;
        g.conv3d(x, w, b, self.stride, self.padding)
    }
}

/// Transposed 1-D convolution; output length `(L-1)·stride + K - 2·padding`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let w = store.add(&join(name, "w"), &[c_in, kernel, c_out], Init::FanIn(c_in * kernel), false)?;
        let b = store.add(&join(name, "b"), &[c_out], Init::FanIn(c_in * kernel), false)?;
        Ok(Self {
            w,
            b: Some(b),
            stride,
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = bind(g, self.b)?;
        g.conv_transpose1d(x, w, b, self.stride, self.padding)
    }
}

/// Transposed 2-D convolution over `[N, H, W, C]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Result<Self> {
        let fan = c_in * kernel[0] * kernel[1];
        let w = store.add(&join(name, "w"), &[c_in, kernel[0], kernel[1], c_out], Init::FanIn(fan), false)?;
        let b = store.add(&join(name, "b"), &[c_out], Init::FanIn(fan), false)?;
        Ok(Self {
            w,
            b: Some(b),
            stride,
            padding,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = bind(g, self.b)?;
        g.conv_transpose2d(x, w, b, self.stride, self.padding)
    }
}

/// Layer normalization over the trailing axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(&join(name, "gamma"), &[dim], Init::Const(1.0), false)?;
        let beta = store.add(&join(name, "beta"), &[dim], Init::Zeros, false)?;
        Ok(Self { gamma, beta, eps: 1e-5 })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// PReLU with one slope per channel.
#[derive(Clone, Debug)]
pub struct Prelu {
    pub alpha: ParamId,
}

impl Prelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let alpha = store.add(&join(name, "alpha"), &[channels], Init::Const(0.25), false)?;
        Ok(Self { alpha })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let a = g.param(self.alpha)?;
        g.prelu(x, a)
    }
}

/// One LSTM direction; gate order `i, f, g, o`.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
    pub reverse: bool,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, reverse: bool) -> Result<Self> {
        let w_ih = store.add(&join(name, "w_ih"), &[input, 4 * hidden], Init::FanIn(hidden), false)?;
        let w_hh = store.add(&join(name, "w_hh"), &[hidden, 4 * hidden], Init::FanIn(hidden), false)?;
        let b = store.add(&join(name, "b"), &[4 * hidden], Init::FanIn(hidden), false)?;
        Ok(Self {
            w_ih,
            w_hh,
            b,
            hidden,
            reverse,
        })
    }

    /// `[N, L, In]` to `[N, L, H]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (wi, wh, b) = (g.param(self.w_ih)?, g.param(self.w_hh)?, g.param(self.b)?);
        g.lstm(x, wi, wh, b, self.reverse)
    }

    /// A single recurrence step composed from primitive ops; `x` is `[N, In]`,
    /// `h` and `c` are `[N, H]`. Returns the new `(h, c)`.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (wi, wh, b) = (g.param(self.w_ih)?, g.param(self.w_hh)?, g.param(self.b)?);
        lstm_step(g, x, h, c, wi, wh, b, self.hidden)
    }
}

/// Primitive-op LSTM cell: `gates = x·W_ih + h·W_hh + b`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_step(
    g: &mut Graph<'_>,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    hidden: usize,
) -> Result<(Var, Var)> {
    let xi = g.linear(x, w_ih, Some(b))?;
    let hh = g.linear(h, w_hh, None)?;
    let gates = g.add(xi, hh)?;
    let i = g.narrow(gates, 1, 0, hidden)?;
    let f = g.narrow(gates, 1, hidden, hidden)?;
    let gg = g.narrow(gates, 1, 2 * hidden, hidden)?;
    let o = g.narrow(gates, 1, 3 * hidden, hidden)?;
    let (i, f, gg, o) = (g.sigmoid(i)?, g.sigmoid(f)?, g.tanh(gg)?, g.sigmoid(o)?);
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, gg)?;
    let c2 = g.add(fc, ig)?;
    let tc = g.tanh(c2)?;
    let h2 = g.mul(o, tc)?;
    Ok((h2, c2))
}

/// Bidirectional LSTM: forward and reverse passes concatenated to `2H` channels.
#[derive(Clone, Debug)]
pub struct Blstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl Blstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fwd: Lstm::new(store, &join(name, "fwd"), input, hidden, false)?,
            bwd: Lstm::new(store, &join(name, "bwd"), input, hidden, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let a = self.fwd.forward(g, x)?;
        let b = self.bwd.forward(g, x)?;
        g.concat(&[a, b], 2)
    }
}

/// Scaled dot-product attention batched over heads: `q`, `k` are
/// `[L, T, dk]`, `v` is `[L, T, dv]`; returns `[L, T, dv]`.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
    let dk = g.shape(q).get(2).copied().unwrap_or(0);
    if dk == 0 {
        return shape_err("attention", format!("query shape {:?}", g.shape(q)));
    }
    let s = g.bmm(q, k, true)?;
    let s = g.scale(s, 1.0 / (dk as f64).sqrt())?;
    let a = g.softmax(s)?;
    g.bmm(a, v, false)
}

/// Multi-head self-attention over a `[T, C]` sequence.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub key_dim: usize,
}

impl MultiHeadSelfAttention {
    /// `key_dim` channels per head for queries and keys; values use `C / heads`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, key_dim: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return shape_err("multi_head_self_attention", format!("{heads} heads do not divide {channels} channels"));
        }
        Ok(Self {
            q: Linear::new(store, &join(name, "q"), channels, heads * key_dim, true)?,
            k: Linear::new(store, &join(name, "k"), channels, heads * key_dim, true)?,
            v: Linear::new(store, &join(name, "v"), channels, channels, true)?,
            out: Linear::new(store, &join(name, "out"), channels, channels, true)?,
            heads,
            key_dim,
        })
    }

    fn split_heads(&self, g: &mut Graph<'_>, x: Var, per_head: usize) -> Result<Var> {
        let t = g.shape(x)[0];
        let r = g.reshape(x, &[t, self.heads, per_head])?;
        g.permute(r, &[1, 0, 2])
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.v.in_dim {
            return shape_err("multi_head_self_attention", format!("input {s:?}, expected [T, {}]", self.v.in_dim));
        }
        let (t, c) = (s[0], s[1]);
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let q = self.split_heads(g, q, self.key_dim)?;
        let k = self.split_heads(g, k, self.key_dim)?;
        let v = self.split_heads(g, v, c / self.heads)?;
        let a = attention(g, q, k, v)?;
        let a = g.permute(a, &[1, 0, 2])?;
        let a = g.reshape(a, &[t, c])?;
        self.out.forward(g, a)
    }
}
