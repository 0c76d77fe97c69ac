//! Channels-last convolution kernels over up to three spatial axes.
//!
//! Inputs are viewed as `[N, D, H, W, C]`; lower-rank convolutions set the
//! unused leading spatial extents to one.

use crate::gemm::{gemm, View};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_sp: [usize; 3],
    pub out_sp: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dilation: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn in_positions(&self) -> usize {
        self.in_sp.iter().product()
    }
    pub fn out_positions(&self) -> usize {
        self.out_sp.iter().product()
    }
    pub fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extent of a strided, padded, dilated convolution, if positive.
    pub fn conv_out(len: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = len + 2 * p;
        (padded >= span).then(|| (padded - span) / s + 1)
    }

    /// Output extent of a transposed convolution after cropping `p` per side.
    pub fn conv_t_out(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        let full = (len - 1) * s + k;
        (full > 2 * p).then(|| full - 2 * p)
    }

    /// Linear input position for output position `o` and kernel tap `kk`,
    /// or `None` when it falls into the zero padding.
    #[inline]
    fn src(&self, o: [usize; 3], kk: [usize; 3]) -> Option<usize> {
        let mut idx = 0;
        for a in 0..3 {
            let p = (o[a] * self.stride[a] + kk[a] * self.dilation[a]) as isize - self.pad[a] as isize;
            if p < 0 || p as usize >= self.in_sp[a] {
                return None;
            }
            idx = idx * self.in_sp[a] + p as usize;
        }
        Some(idx)
    }
}

fn unravel(mut i: usize, dims: [usize; 3]) -> [usize; 3] {
    let w = i % dims[2];
    i /= dims[2];
    let h = i % dims[1];
    let d = i / dims[1];
    [d, h, w]
}

/// Gathers the receptive fields of group `g` into `cols`
/// (`[N·P_out, kvol·C_in/groups]`).
fn im2col(geom: &ConvGeom, x: &[f64], g: usize, cols: &mut [f64]) {
    let cig = geom.c_in / geom.groups;
    let kvol = geom.kvol();
    let row_len = kvol * cig;
    let pin = geom.in_positions();
    let pout = geom.out_positions();
    for b in 0..geom.batch {
        for op in 0..pout {
            let o = unravel(op, geom.out_sp);
            let row = &mut cols[(b * pout + op) * row_len..(b * pout + op + 1) * row_len];
            for kk in 0..kvol {
                let k3 = unravel(kk, geom.kernel);
                let dst = &mut row[kk * cig..(kk + 1) * cig];
                match geom.src(o, k3) {
                    Some(ip) => {
                        let base = (b * pin + ip) * geom.c_in + g * cig;
                        dst.copy_from_slice(&x[base..base + cig]);
                    }
                    None => dst.fill(0.0),
                }
            }
        }
    }
}

fn col2im(geom: &ConvGeom, cols: &[f64], g: usize, dx: &mut [f64]) {
    let cig = geom.c_in / geom.groups;
    let kvol = geom.kvol();
    let row_len = kvol * cig;
    let pin = geom.in_positions();
    let pout = geom.out_positions();
    for b in 0..geom.batch {
        for op in 0..pout {
            let o = unravel(op, geom.out_sp);
            let row = &cols[(b * pout + op) * row_len..(b * pout + op + 1) * row_len];
            for kk in 0..kvol {
                let k3 = unravel(kk, geom.kernel);
                if let Some(ip) = geom.src(o, k3) {
                    let base = (b * pin + ip) * geom.c_in + g * cig;
                    for (d, s) in dx[base..base + cig].iter_mut().zip(&row[kk * cig..(kk + 1) * cig]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Weight layout `[k..., C_in/groups, C_out]`.
pub(crate) fn conv_forward(geom: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let rows = geom.batch * geom.out_positions();
    let cig = geom.c_in / geom.groups;
    let cog = geom.c_out / geom.groups;
    let kdim = geom.kvol() * cig;
    let mut y = vec![0.0; rows * geom.c_out];
    if let Some(b) = bias {
        for r in y.chunks_exact_mut(geom.c_out) {
            r.copy_from_slice(b);
        }
    }
    let mut cols = vec![0.0; rows * kdim];
    for g in 0..geom.groups {
        im2col(geom, x, g, &mut cols);
        let wg = View {
            data: &w[g * cog..],
            rs: geom.c_out,
            cs: 1,
        };
        gemm(rows, kdim, cog, 1.0, View::rm(&cols, kdim), wg, 1.0, &mut y[g * cog..], geom.c_out);
    }
    y
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    geom: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let rows = geom.batch * geom.out_positions();
    let cig = geom.c_in / geom.groups;
    let cog = geom.c_out / geom.groups;
    let kdim = geom.kvol() * cig;
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dw = need[1].then(|| vec![0.0; w.len()]);
    let db = need[2].then(|| col_sums(dy, geom.c_out));
    if need[0] || need[1] {
        let mut cols = vec![0.0; rows * kdim];
        let mut dcols = vec![0.0; rows * kdim];
        for g in 0..geom.groups {
            let dyg = View {
                data: &dy[g * cog..],
                rs: geom.c_out,
                cs: 1,
            };
            if let Some(dw) = dw.as_mut() {
                im2col(geom, x, g, &mut cols);
                // dW_g = colsᵀ · dY_g
                gemm(kdim, rows, cog, 1.0, View::rm_t(&cols, kdim), dyg, 1.0, &mut dw[g * cog..], geom.c_out);
            }
            if let Some(dx) = dx.as_mut() {
                let wgt = View {
                    data: &w[g * cog..],
                    rs: 1,
                    cs: geom.c_out,
                };
                gemm(rows, cog, kdim, 1.0, dyg, wgt, 0.0, &mut dcols, kdim);
                col2im(geom, &dcols, g, dx);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

pub(crate) fn col_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for r in m.chunks_exact(cols) {
        for (a, b) in s.iter_mut().zip(r) {
            *a += b;
        }
    }
    s
}

/// Output position for input position `ip` and tap `kk` in a transposed
/// convolution, after cropping.
#[inline]
fn t_dst(geom: &ConvGeom, ip: [usize; 3], kk: [usize; 3]) -> Option<usize> {
    let mut idx = 0;
    for a in 0..3 {
        let p = (ip[a] * geom.stride[a] + kk[a]) as isize - geom.pad[a] as isize;
        if p < 0 || p as usize >= geom.out_sp[a] {
            return None;
        }
        idx = idx * geom.out_sp[a] + p as usize;
    }
    Some(idx)
}

/// Transposed convolution; weight layout `[C_in, k..., C_out]`.
pub(crate) fn conv_t_forward(geom: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let pin = geom.in_positions();
    let pout = geom.out_positions();
    let kvol = geom.kvol();
    let co = geom.c_out;
    let rows = geom.batch * pin;
    let zc = kvol * co;
    let mut z = vec![0.0; rows * zc];
    gemm(rows, geom.c_in, zc, 1.0, View::rm(x, geom.c_in), View::rm(w, zc), 0.0, &mut z, zc);
    let mut y = vec![0.0; geom.batch * pout * co];
    if let Some(b) = bias {
        for r in y.chunks_exact_mut(co) {
            r.copy_from_slice(b);
        }
    }
    for b in 0..geom.batch {
        for ip in 0..pin {
            let i3 = unravel(ip, geom.in_sp);
            let zr = &z[(b * pin + ip) * zc..(b * pin + ip + 1) * zc];
            for kk in 0..kvol {
                if let Some(op) = t_dst(geom, i3, unravel(kk, geom.kernel)) {
                    let dst = &mut y[(b * pout + op) * co..(b * pout + op + 1) * co];
                    for (d, s) in dst.iter_mut().zip(&zr[kk * co..(kk + 1) * co]) {
                        *d += s;
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv_t_backward(
    geom: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let pin = geom.in_positions();
    let pout = geom.out_positions();
    let kvol = geom.kvol();
    let co = geom.c_out;
    let rows = geom.batch * pin;
    let zc = kvol * co;
    let db = need[2].then(|| col_sums(dy, co));
    let mut dx = None;
    let mut dw = None;
    if need[0] || need[1] {
        let mut dz = vec![0.0; rows * zc];
        for b in 0..geom.batch {
            for ip in 0..pin {
                let i3 = unravel(ip, geom.in_sp);
                let zr = &mut dz[(b * pin + ip) * zc..(b * pin + ip + 1) * zc];
                for kk in 0..kvol {
                    if let Some(op) = t_dst(geom, i3, unravel(kk, geom.kernel)) {
                        zr[kk * co..(kk + 1) * co].copy_from_slice(&dy[(b * pout + op) * co..(b * pout + op + 1) * co]);
                    }
                }
            }
        }
        if need[0] {
            let mut g = vec![0.0; x.len()];
            gemm(rows, zc, geom.c_in, 1.0, View::rm(&dz, zc), View::rm_t(w, zc), 0.0, &mut g, geom.c_in);
            dx = Some(g);
        }
        if need[1] {
            let mut g = vec![0.0; w.len()];
            gemm(geom.c_in, rows, zc, 1.0, View::rm_t(x, geom.c_in), View::rm(&dz, zc), 0.0, &mut g, zc);
            dw = Some(g);
        }
    }
    ConvGrads { dx, dw, db }
}
