//! Fused single-direction LSTM over a batch of sequences.
//!
//! Gate order is `i, f, g, o`. Input `[N, L, In]`, output `[N, L, H]`.

use crate::conv::col_sums;
use crate::gemm::{gemm, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LstmDims {
    pub batch: usize,
    pub len: usize,
    pub input: usize,
    pub hidden: usize,
}

/// Post-activation gates `[N, L, 4H]` and cell states `[N, L, H]`.
pub(crate) struct LstmCache {
    pub gates: Vec<f64>,
    pub cells: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `tanh` through one `exp`; noticeably cheaper than the libm routine.
#[inline]
fn tanh(x: f64) -> f64 {
    if x.abs() < 0.25 {
        return x.tanh();
    }
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

fn step_order(len: usize, reverse: bool) -> impl Iterator<Item = usize> {
    (0..len).map(move |s| if reverse { len - 1 - s } else { s })
}

pub(crate) fn lstm_forward(
    d: LstmDims,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    b: &[f64],
    reverse: bool,
) -> (Vec<f64>, LstmCache) {
    let LstmDims { batch, len, input, hidden: h } = d;
    let g4 = 4 * h;
    let rows = batch * len;
    let mut gates = vec![0.0; rows * g4];
    for r in gates.chunks_exact_mut(g4) {
        r.copy_from_slice(b);
    }
    gemm(rows, input, g4, 1.0, View::rm(x, input), View::rm(w_ih, g4), 1.0, &mut gates, g4);
    let mut out = vec![0.0; rows * h];
    let mut cells = vec![0.0; rows * h];
    let mut h_prev = vec![0.0; batch * h];
    let mut c_prev = vec![0.0; batch * h];
    for t in step_order(len, reverse) {
        // gates[:, t, :] += h_prev · W_hh
        gemm(batch, h, g4, 1.0, View::rm(&h_prev, h), View::rm(w_hh, g4), 1.0, &mut gates[t * g4..], len * g4);
        for n in 0..batch {
            let gr = &mut gates[(n * len + t) * g4..(n * len + t + 1) * g4];
            let cp = &mut c_prev[n * h..(n + 1) * h];
            let hp = &mut h_prev[n * h..(n + 1) * h];
            let base = (n * len + t) * h;
            for j in 0..h {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[h + j]);
                let g = tanh(gr[2 * h + j]);
                let o = sigmoid(gr[3 * h + j]);
                gr[j] = i;
                gr[h + j] = f;
                gr[2 * h + j] = g;
                gr[3 * h + j] = o;
                let c = f * cp[j] + i * g;
                let hv = o * tanh(c);
                cp[j] = c;
                hp[j] = hv;
                cells[base + j] = c;
                out[base + j] = hv;
            }
        }
    }
    (out, LstmCache { gates, cells })
}

pub(crate) struct LstmGrads {
    pub dx: Option<Vec<f64>>,
    pub dw_ih: Option<Vec<f64>>,
    pub dw_hh: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn lstm_backward(
    d: LstmDims,
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    reverse: bool,
    out: &[f64],
    cache: &LstmCache,
    dy: &[f64],
    need: [bool; 4],
) -> LstmGrads {
    let LstmDims { batch, len, input, hidden: h } = d;
    let g4 = 4 * h;
    let rows = batch * len;
    let mut dgates = vec![0.0; rows * g4];
    let mut dh_next = vec![0.0; batch * h];
    let mut dc_next = vec![0.0; batch * h];
    let mut dw_hh = vec![0.0; w_hh.len()];
    let mut h_prev = vec![0.0; batch * h];
    let order: Vec<usize> = step_order(len, reverse).collect();
    for (s, &t) in order.iter().enumerate().rev() {
        let prev = if s == 0 { None } else { Some(order[s - 1]) };
        for n in 0..batch {
            let gr = &cache.gates[(n * len + t) * g4..(n * len + t + 1) * g4];
            let dg = &mut dgates[(n * len + t) * g4..(n * len + t + 1) * g4];
            let base = (n * len + t) * h;
            for j in 0..h {
                let (i, f, g, o) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                let c = cache.cells[base + j];
                let c_prev = prev.map_or(0.0, |p| cache.cells[(n * len + p) * h + j]);
                let tc = tanh(c);
                let dh = dy[base + j] + dh_next[n * h + j];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[n * h + j];
                dg[j] = dc * g * i * (1.0 - i);
                dg[h + j] = dc * c_prev * f * (1.0 - f);
                dg[2 * h + j] = dc * i * (1.0 - g * g);
                dg[3 * h + j] = dh * tc * o * (1.0 - o);
                dc_next[n * h + j] = dc * f;
            }
        }
        let dg_t = View {
            data: &dgates[t * g4..],
            rs: len * g4,
            cs: 1,
        };
        // dh_prev = dgates_t · W_hhᵀ
        gemm(batch, g4, h, 1.0, dg_t, View::rm_t(w_hh, g4), 0.0, &mut dh_next, h);
        if let Some(p) = prev {
            for n in 0..batch {
                h_prev[n * h..(n + 1) * h].copy_from_slice(&out[(n * len + p) * h..(n * len + p + 1) * h]);
            }
            if need[2] {
                // dW_hh += h_prevᵀ · dgates_t
                gemm(h, batch, g4, 1.0, View::rm_t(&h_prev, h), dg_t, 1.0, &mut dw_hh, g4);
            }
        }
    }
    let dx = need[0].then(|| {
        let mut g = vec![0.0; x.len()];
        gemm(rows, g4, input, 1.0, View::rm(&dgates, g4), View::rm_t(w_ih, g4), 0.0, &mut g, input);
        g
    });
    let dw_ih = need[1].then(|| {
        let mut g = vec![0.0; w_ih.len()];
        gemm(input, rows, g4, 1.0, View::rm_t(x, input), View::rm(&dgates, g4), 0.0, &mut g, g4);
        g
    });
    LstmGrads {
        dx,
        dw_ih,
        dw_hh: need[2].then_some(dw_hh),
        db: need[3].then(|| col_sums(&dgates, g4)),
    }
}
