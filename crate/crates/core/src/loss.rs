//! SI-SDR, multi-resolution delta-spectrum, hybrid and binary cross-entropy
//! losses, each available as a plain value and as a differentiable graph op.

use std::f64::consts::LN_10;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use savgrid_nn::{CustomOp, Graph, Tensor, Var};

use crate::error::{invalid, Result};
use crate::signal::{dot, energy, Window};

pub const SI_SDR_EPS: f64 = 1e-8;
pub const PROB_CLAMP: f64 = 1e-7;

struct SiSdrParts {
    alpha: f64,
    proj_energy: f64,
    res_energy: f64,
    /// Guard added to both energies; proportional to the estimate's energy.
    guard: f64,
}

fn si_sdr_parts(s: &[f64], est: &[f64]) -> Result<SiSdrParts> {
    if s.len() != est.len() {
        return invalid(format!("si-sdr needs equal lengths, got {} and {}", s.len(), est.len()));
    }
    let es = energy(s);
    if es <= 0.0 {
        return invalid("si-sdr reference has zero energy");
    }
    let alpha = dot(est, s) / es;
    let res_energy = s.iter().zip(est).map(|(a, b)| (b - alpha * a).powi(2)).sum();
    Ok(SiSdrParts {
        alpha,
        proj_energy: alpha * alpha * es,
        res_energy,
        guard: SI_SDR_EPS * energy(est) + f64::MIN_POSITIVE,
    })
}

fn loss_from_parts(p: &SiSdrParts) -> f64 {
    -10.0 * ((p.proj_energy + p.guard) / (p.res_energy + p.guard)).log10()
}

/// Negative scale-invariant SDR in dB, with `s` the reference.
pub fn si_sdr_loss(s: &[f64], est: &[f64]) -> Result<f64> {
    Ok(loss_from_parts(&si_sdr_parts(s, est)?))
}

/// Scale-invariant SDR in dB; exactly the negated loss.
pub fn si_sdr(s: &[f64], est: &[f64]) -> Result<f64> {
    Ok(-si_sdr_loss(s, est)?)
}

struct SiSdrOp {
    target: Vec<f64>,
    parts: SiSdrParts,
}

impl CustomOp for SiSdrOp {
    fn name(&self) -> &'static str {
        "si_sdr_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let est = inputs[0].data();
        let c = -10.0 / LN_10 * grad_out[0];
        let p = &self.parts;
        let pp = 2.0 / (p.proj_energy + p.guard);
        let rr = 2.0 / (p.res_energy + p.guard);
        let g = self
            .target
            .iter()
            .zip(est)
            .map(|(&s, &e)| {
                let guard = SI_SDR_EPS * e;
                c * (pp * (p.alpha * s + guard) - rr * (e - p.alpha * s + guard))
            })
            .collect();
        vec![Some(g)]
    }
}

/// Graph version of [`si_sdr_loss`] for a 1-D estimate variable.
pub fn si_sdr_loss_var(g: &mut Graph<'_>, est: Var, target: &[f64]) -> Result<Var> {
    let p = si_sdr_parts(target, g.value(est).data())?;
    let value = loss_from_parts(&p);
    let op = SiSdrOp {
        target: target.to_vec(),
        parts: p,
    };
    Ok(g.custom(&[est], Tensor::scalar(value), Box::new(op))?)
}

/// One STFT resolution of the delta-spectrum loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolution {
    pub fft_size: usize,
    pub hop_size: usize,
    pub window_length: usize,
}

impl Resolution {
    pub const fn new(fft_size: usize, hop_size: usize, window_length: usize) -> Self {
        Self {
            fft_size,
            hop_size,
            window_length,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hop_size == 0 || self.window_length == 0 || self.window_length > self.fft_size {
            return invalid(format!("bad resolution {self:?}"));
        }
        Ok(())
    }

    /// Fully populated frames in `len` samples.
    pub fn frames(&self, len: usize) -> Result<usize> {
        if len < self.window_length {
            return invalid(format!(
                "clip of {len} samples is shorter than one {}-sample frame",
                self.window_length
            ));
        }
        Ok(1 + (len - self.window_length) / self.hop_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Magnitude {
    Linear,
    /// `ln(|X| + 1e-5)`.
    Log,
}

const LOG_FLOOR: f64 = 1e-5;

impl Magnitude {
    fn apply(self, m: f64) -> f64 {
        match self {
            Magnitude::Linear => m,
            Magnitude::Log => (m + LOG_FLOOR).ln(),
        }
    }

    fn slope(self, m: f64) -> f64 {
        match self {
            Magnitude::Linear => 1.0,
            Magnitude::Log => 1.0 / (m + LOG_FLOOR),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridLossConfig {
    pub gamma: f64,
    pub resolutions: Vec<Resolution>,
    pub magnitude: Magnitude,
}

impl Default for HybridLossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            resolutions: vec![
                Resolution::new(512, 50, 240),
                Resolution::new(1024, 120, 600),
                Resolution::new(2048, 240, 1200),
            ],
            magnitude: Magnitude::Linear,
        }
    }
}

impl HybridLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return invalid(format!("gamma must be non-negative, got {}", self.gamma));
        }
        self.resolutions.iter().try_for_each(Resolution::validate)
    }
}

/// Complex spectra of every valid frame, `[T, fft/2+1]`.
fn frame_spectra(x: &[f64], r: &Resolution) -> Result<(usize, Vec<Complex64>)> {
    r.validate()?;
    let t = r.frames(x.len())?;
    let n = r.fft_size;
    let bins = n / 2 + 1;
    let w = Window::Hann.taps(r.window_length);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::default(); n];
    let mut out = Vec::with_capacity(t * bins);
    for ti in 0..t {
        buf.fill(Complex64::default());
        let start = ti * r.hop_size;
        for i in 0..r.window_length {
            buf[i].re = x[start + i] * w[i];
        }
        fft.process(&mut buf);
        out.extend_from_slice(&buf[..bins]);
    }
    Ok((t, out))
}

/// Temporal first differences of (possibly compressed) magnitudes, `[T-1, F]`.
fn deltas(spec: &[Complex64], t: usize, bins: usize, mag: Magnitude) -> Vec<f64> {
    let m: Vec<f64> = spec.iter().map(|c| mag.apply(c.norm())).collect();
    (0..t.saturating_sub(1) * bins).map(|i| m[i + bins] - m[i]).collect()
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Mean absolute difference between the temporal magnitude deltas of `s`
/// and `est` at one resolution. Zero when only one frame fits.
pub fn freq_delta_loss(s: &[f64], est: &[f64], r: &Resolution, mag: Magnitude) -> Result<f64> {
    if s.len() != est.len() {
        return invalid(format!("delta loss needs equal lengths, got {} and {}", s.len(), est.len()));
    }
    let bins = r.fft_size / 2 + 1;
    let (t, sa) = frame_spectra(s, r)?;
    let (_, sb) = frame_spectra(est, r)?;
    Ok(mean_abs_diff(&deltas(&sb, t, bins, mag), &deltas(&sa, t, bins, mag)))
}

struct DeltaOp {
    res: Resolution,
    mag: Magnitude,
    n_frames: usize,
    spectra: Vec<Complex64>,
    /// Sign of (Δ estimate − Δ target) per delta cell.
    signs: Vec<f64>,
}

impl CustomOp for DeltaOp {
    fn name(&self) -> &'static str {
        "freq_delta_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let len = inputs[0].len();
        let mut gx = vec![0.0; len];
        if self.signs.is_empty() {
            return vec![Some(gx)];
        }
        let r = &self.res;
        let n = r.fft_size;
        let bins = n / 2 + 1;
        let t = self.n_frames;
        let scale = grad_out[0] / self.signs.len() as f64;
        let w = Window::Hann.taps(r.window_length);
        let ifft = FftPlanner::new().plan_fft_inverse(n);
        let mut buf = vec![Complex64::default(); n];
        for ti in 0..t {
            buf.fill(Complex64::default());
            for k in 0..bins {
                // d loss / d m[t] collects the two deltas that touch frame t.
                let mut gm = 0.0;
                if ti > 0 {
                    gm += self.signs[(ti - 1) * bins + k];
                }
                if ti + 1 < t {
                    gm -= self.signs[ti * bins + k];
                }
                if gm == 0.0 {
                    continue;
                }
                let x = self.spectra[ti * bins + k];
                let a = x.norm();
                if a > 0.0 {
                    buf[k] = x * (scale * gm * self.mag.slope(a) / a);
                }
            }
            // x_n = Re Σ_k G_k e^{+2πikn/N} over the retained bins.
            ifft.process(&mut buf);
            let start = ti * r.hop_size;
            for i in 0..r.window_length {
                gx[start + i] += buf[i].re * w[i];
            }
        }
        vec![Some(gx)]
    }
}

pub fn freq_delta_loss_var(
    g: &mut Graph<'_>,
    est: Var,
    target: &[f64],
    r: &Resolution,
    mag: Magnitude,
) -> Result<Var> {
    let x = g.value(est).data();
    if x.len() != target.len() {
        return invalid(format!("delta loss needs equal lengths, got {} and {}", target.len(), x.len()));
    }
    let bins = r.fft_size / 2 + 1;
    let (t, st) = frame_spectra(target, r)?;
    let (_, se) = frame_spectra(x, r)?;
    let (dt, de) = (deltas(&st, t, bins, mag), deltas(&se, t, bins, mag));
    let value = mean_abs_diff(&de, &dt);
    let signs = de.iter().zip(&dt).map(|(a, b)| (a - b).signum() * f64::from(a != b)).collect();
    let op = DeltaOp {
        res: *r,
        mag,
        n_frames: t,
        spectra: se,
        signs,
    };
    Ok(g.custom(&[est], Tensor::scalar(value), Box::new(op))?)
}

/// SI-SDR loss plus the γ-weighted mean delta loss over all resolutions.
pub fn hybrid_loss(s: &[f64], est: &[f64], cfg: &HybridLossConfig) -> Result<f64> {
    cfg.validate()?;
    let mut total = si_sdr_loss(s, est)?;
    if cfg.gamma > 0.0 && !cfg.resolutions.is_empty() {
        let mut d = 0.0;
        for r in &cfg.resolutions {
            d += freq_delta_loss(s, est, r, cfg.magnitude)?;
        }
        total += cfg.gamma * d / cfg.resolutions.len() as f64;
    }
    Ok(total)
}

pub fn hybrid_loss_var(g: &mut Graph<'_>, est: Var, target: &[f64], cfg: &HybridLossConfig) -> Result<Var> {
    cfg.validate()?;
    let mut total = si_sdr_loss_var(g, est, target)?;
    if cfg.gamma > 0.0 && !cfg.resolutions.is_empty() {
        let mut parts = Vec::with_capacity(cfg.resolutions.len());
        for r in &cfg.resolutions {
            parts.push(freq_delta_loss_var(g, est, target, r, cfg.magnitude)?);
        }
        let mut sum = parts[0];
        for &p in &parts[1..] {
            sum = g.add(sum, p)?;
        }
        let scaled = g.scale(sum, cfg.gamma / cfg.resolutions.len() as f64)?;
        total = g.add(total, scaled)?;
    }
    Ok(total)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy of one prediction.
pub fn bce_loss(y: f64, p: f64) -> f64 {
    let p = clamp_prob(p);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

struct BceOp {
    labels: Vec<f64>,
}

impl CustomOp for BceOp {
    fn name(&self) -> &'static str {
        "bce_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = self.labels.len() as f64;
        let g = inputs[0]
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&p, &y)| {
                if p != clamp_prob(p) {
                    0.0
                } else {
                    grad_out[0] / n * (-y / p + (1.0 - y) / (1.0 - p))
                }
            })
            .collect();
        vec![Some(g)]
    }
}

/// Mean BCE of probability variable `p` (any shape) against `labels`.
pub fn bce_loss_var(g: &mut Graph<'_>, p: Var, labels: &[f64]) -> Result<Var> {
    let probs = g.value(p).data();
    if probs.len() != labels.len() || labels.is_empty() {
        return invalid(format!("{} probabilities for {} labels", probs.len(), labels.len()));
    }
    if let Some(v) = probs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return invalid(format!("probability {v} outside [0, 1]"));
    }
    let value = probs.iter().zip(labels).map(|(&p, &y)| bce_loss(y, p)).sum::<f64>() / labels.len() as f64;
    Ok(g.custom(
        &[p],
        Tensor::scalar(value),
        Box::new(BceOp {
            labels: labels.to_vec(),
        }),
    )?)
}
