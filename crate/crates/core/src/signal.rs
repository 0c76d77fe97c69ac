//! Short-time Fourier analysis and synthesis, SNR-controlled mixing and
//! temporal interpolation.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use savgrid_nn::{CustomOp, Graph, Tensor, Var};

use crate::error::{invalid, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        if samples.is_empty() {
            return invalid("audio clip is empty");
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return invalid(format!("sample {i} is not finite"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    /// `sin(π(n + ½)/N)`: the square root of a Hann window sampled at
    /// half-integer points, so no tap is exactly zero.
    SqrtHann,
    /// Periodic Hann `½(1 − cos(2πn/N))`.
    Hann,
    Rect,
}

impl Window {
    pub fn name(self) -> &'static str {
        match self {
            Window::SqrtHann => "sqrt-hann",
            Window::Hann => "hann",
            Window::Rect => "rect",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Window::SqrtHann, Window::Hann, Window::Rect].into_iter().find(|w| w.name() == name)
    }

    pub fn taps(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let i = i as f64;
                match self {
                    Window::SqrtHann => (PI * (i + 0.5) / n).sin(),
                    Window::Hann => 0.5 * (1.0 - (2.0 * PI * i / n).cos()),
                    Window::Rect => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop_size: usize,
    pub fft_size: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_size: 256,
            hop_size: 128,
            fft_size: 256,
            window: Window::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_size == 0 || self.hop_size > self.window_size || self.window_size > self.fft_size {
            return invalid(format!(
                "need 0 < hop ({}) <= window ({}) <= fft ({})",
                self.hop_size, self.window_size, self.fft_size
            ));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames needed to cover `len` samples with tail padding only.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len.saturating_sub(self.window_size).div_ceil(self.hop_size)
    }
}

/// Complex `T × F` spectrum, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: Vec<Complex64>,
    pub n_frames: usize,
    pub config: StftConfig,
    pub original_length: usize,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.config.bins()
    }

    pub fn at(&self, t: usize, f: usize) -> Complex64 {
        self.frames[t * self.n_bins() + f]
    }

    /// Real and imaginary parts interleaved as a channels-last `[T, F, 2]` block.
    pub fn to_channels(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn from_channels(data: &[f64], n_frames: usize, config: StftConfig, original_length: usize) -> Result<Self> {
        if data.len() != n_frames * config.bins() * 2 {
            return invalid(format!(
                "{} values for a {n_frames}×{}×2 spectrogram",
                data.len(),
                config.bins()
            ));
        }
        let frames = data.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
        Ok(Self {
            frames,
            n_frames,
            config,
            original_length,
        })
    }
}

pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<Spectrogram> {
    stft_samples(&clip.samples, cfg)
}

pub fn stft_samples(x: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if x.is_empty() {
        return invalid("cannot analyse an empty clip");
    }
    let (win, hop, n) = (cfg.window_size, cfg.hop_size, cfg.fft_size);
    let w = cfg.window.taps(win);
    let t = cfg.frames_for(x.len());
    let bins = cfg.bins();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::default(); n];
    let mut frames = Vec::with_capacity(t * bins);
    for ti in 0..t {
        buf.fill(Complex64::default());
        let start = ti * hop;
        for (i, slot) in buf.iter_mut().enumerate().take(win) {
            if let Some(&v) = x.get(start + i) {
                slot.re = v * w[i];
            }
        }
        fft.process(&mut buf);
        frames.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        frames,
        n_frames: t,
        config: *cfg,
        original_length: x.len(),
    })
}

/// Overlap-added squared synthesis window over the padded signal.
pub(crate) fn window_power(cfg: &StftConfig, n_frames: usize) -> Vec<f64> {
    let w = cfg.window.taps(cfg.window_size);
    let mut den = vec![0.0; (n_frames - 1) * cfg.hop_size + cfg.window_size];
    for t in 0..n_frames {
        for (i, wi) in w.iter().enumerate() {
            den[t * cfg.hop_size + i] += wi * wi;
        }
    }
    den
}

pub(crate) const WINDOW_FLOOR: f64 = 1e-8;

pub fn istft(spec: &Spectrogram) -> Result<AudioClip> {
    let y = istft_samples(spec)?;
    AudioClip::new(y, SAMPLE_RATE)
}

pub fn istft_samples(spec: &Spectrogram) -> Result<Vec<f64>> {
    let cfg = &spec.config;
    cfg.validate()?;
    if spec.n_frames == 0 || spec.frames.len() != spec.n_frames * cfg.bins() {
        return invalid("spectrogram frame data does not match its configuration");
    }
    if cfg.frames_for(spec.original_length) != spec.n_frames || spec.original_length == 0 {
        return invalid(format!(
            "{} frames cannot come from a {}-sample clip with hop {}",
            spec.n_frames, spec.original_length, cfg.hop_size
        ));
    }
    let (win, hop, n) = (cfg.window_size, cfg.hop_size, cfg.fft_size);
    let bins = cfg.bins();
    let w = cfg.window.taps(win);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut out = vec![0.0; (spec.n_frames - 1) * hop + win];
    let mut buf = vec![Complex64::default(); n];
    for t in 0..spec.n_frames {
        hermitian_fill(&spec.frames[t * bins..(t + 1) * bins], &mut buf);
        ifft.process(&mut buf);
        for i in 0..win {
            out[t * hop + i] += buf[i].re / n as f64 * w[i];
        }
    }
    let den = window_power(cfg, spec.n_frames);
    for (o, d) in out.iter_mut().zip(&den) {
        *o /= d.max(WINDOW_FLOOR);
    }
    out.truncate(spec.original_length);
    Ok(out)
}

/// Full-length spectrum from the non-negative bins; imaginary parts of the
/// DC and Nyquist bins are dropped.
pub(crate) fn hermitian_fill(half: &[Complex64], full: &mut [Complex64]) {
    let n = full.len();
    for k in 0..n {
        full[k] = if k < half.len() { half[k] } else { half[n - k].conj() };
    }
    full[0].im = 0.0;
    if n % 2 == 0 {
        full[n / 2].im = 0.0;
    }
}

/// Scales `interferer` so `10·log10(E_target / E_scaled) = snr_db` and adds it
/// to `target`. Returns the mixture and the scaled interferer.
pub fn mix_at_snr(target: &AudioClip, interferer: &AudioClip, snr_db: f64) -> Result<(AudioClip, AudioClip)> {
    if target.len() != interferer.len() || target.sample_rate != interferer.sample_rate {
        return invalid(format!(
            "mixing needs equal lengths and rates, got {}@{} and {}@{}",
            target.len(),
            target.sample_rate,
            interferer.len(),
            interferer.sample_rate
        ));
    }
    if !snr_db.is_finite() {
        return invalid("snr must be finite");
    }
    let alpha = snr_gain(&target.samples, &interferer.samples, snr_db)?;
    let scaled: Vec<f64> = interferer.samples.iter().map(|v| v * alpha).collect();
    let mix = target.samples.iter().zip(&scaled).map(|(a, b)| a + b).collect();
    Ok((
        AudioClip::new(mix, target.sample_rate)?,
        AudioClip::new(scaled, target.sample_rate)?,
    ))
}

/// Interferer gain that realizes `snr_db`.
pub fn snr_gain(target: &[f64], interferer: &[f64], snr_db: f64) -> Result<f64> {
    let (et, ei) = (energy(target), energy(interferer));
    if et <= 0.0 || ei <= 0.0 {
        return invalid("mixing needs nonzero target and interferer energy");
    }
    Ok((et / ei).sqrt() * 10f64.powf(-snr_db / 20.0))
}

pub fn snr_db(target: &[f64], noise: &[f64]) -> f64 {
    10.0 * (energy(target) / energy(noise)).log10()
}

/// Row-major `target_len × l_in` linear interpolation weights mapping
/// `[0, l_in−1]` onto `[0, target_len−1]`.
pub fn interp_matrix(l_in: usize, target_len: usize) -> Result<Vec<f64>> {
    if l_in == 0 || target_len == 0 {
        return invalid(format!("cannot interpolate {l_in} rows to {target_len}"));
    }
    let mut m = vec![0.0; target_len * l_in];
    for (i, (lo, hi, f)) in interp_positions(l_in, target_len).enumerate() {
        m[i * l_in + lo] += 1.0 - f;
        if f > 0.0 {
            m[i * l_in + hi] += f;
        }
    }
    Ok(m)
}

fn interp_positions(l_in: usize, target_len: usize) -> impl Iterator<Item = (usize, usize, f64)> {
    (0..target_len).map(move |i| {
        if l_in == 1 || target_len == 1 {
            return (0, 0, 0.0);
        }
        let p = (i * (l_in - 1)) as f64 / (target_len - 1) as f64;
        let lo = (p.floor() as usize).min(l_in - 1);
        let hi = (lo + 1).min(l_in - 1);
        (lo, hi, p - lo as f64)
    })
}

/// Piecewise-linear resampling of an `l_in × d` block along its rows.
pub fn interp_time(features: &[f64], d: usize, target_len: usize) -> Result<Vec<f64>> {
    if d == 0 || features.is_empty() || features.len() % d != 0 {
        return invalid(format!("{} values do not form rows of width {d}", features.len()));
    }
    let l_in = features.len() / d;
    if target_len == 0 {
        return invalid("target length must be positive");
    }
    let mut out = Vec::with_capacity(target_len * d);
    for (lo, hi, f) in interp_positions(l_in, target_len) {
        for c in 0..d {
            let a = features[lo * d + c];
            let b = features[hi * d + c];
            out.push(a + f * (b - a));
        }
    }
    Ok(out)
}

/// Differentiable inverse STFT of a channels-last `[T, F, 2]` variable.
pub fn istft_var(g: &mut Graph<'_>, spec: Var, cfg: &StftConfig, original_length: usize) -> Result<Var> {
    let shape = g.shape(spec).to_vec();
    if shape.len() != 3 || shape[1] != cfg.bins() || shape[2] != 2 {
        return invalid(format!("istft expects [T, {}, 2], got {shape:?}", cfg.bins()));
    }
    let s = Spectrogram::from_channels(g.value(spec).data(), shape[0], *cfg, original_length)?;
    let y = istft_samples(&s)?;
    let out = Tensor::new(&[y.len()], y)?;
    Ok(g.custom(&[spec], out, Box::new(IstftOp { cfg: *cfg, n_frames: shape[0] }))?)
}

struct IstftOp {
    cfg: StftConfig,
    n_frames: usize,
}

impl CustomOp for IstftOp {
    fn name(&self) -> &'static str {
        "istft"
    }

    // Adjoint of the synthesis: each output sample distributes its gradient
    // through the normalization, the synthesis window and the real inverse DFT.
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let cfg = &self.cfg;
        let (win, hop, n) = (cfg.window_size, cfg.hop_size, cfg.fft_size);
        let bins = cfg.bins();
        let w = cfg.window.taps(win);
        let den = window_power(cfg, self.n_frames);
        let fft = FftPlanner::new().plan_fft_forward(n);
        let mut buf = vec![Complex64::default(); n];
        let mut grad = vec![0.0; self.n_frames * bins * 2];
        for t in 0..self.n_frames {
            buf.fill(Complex64::default());
            for i in 0..win {
                if let Some(&g) = grad_out.get(t * hop + i) {
                    buf[i].re = g * w[i] / den[t * hop + i].max(WINDOW_FLOOR);
                }
            }
            fft.process(&mut buf);
            for k in 0..bins {
                let edge = k == 0 || (n % 2 == 0 && k == n / 2);
                let c = if edge { 1.0 } else { 2.0 } / n as f64;
                grad[(t * bins + k) * 2] = c * buf[k].re;
                grad[(t * bins + k) * 2 + 1] = if edge { 0.0 } else { c * buf[k].im };
            }
        }
        vec![Some(grad)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (d / energy(b)).sqrt()
    }

    #[test]
    fn zero_clip_gives_zero_spectrum() {
        let s = stft(&AudioClip::new(vec![0.0; 16000], SAMPLE_RATE).unwrap(), &StftConfig::default()).unwrap();
        assert_eq!(s.n_bins(), 129);
        assert!(s.frames.iter().all(|c| c.norm() == 0.0));
        assert!(istft_samples(&s).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn impulse_spectrum_is_flat_at_first_tap() {
        let mut x = vec![0.0; 1000];
        x[0] = 1.0;
        let cfg = StftConfig::default();
        let s = stft_samples(&x, &cfg).unwrap();
        let w0 = cfg.window.taps(256)[0];
        for f in 0..129 {
            assert!((s.at(0, f).norm() - w0).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_count_by_enumeration() {
        let cfg = StftConfig::default();
        for len in [1, 255, 256, 257, 383, 384, 385, 16000] {
            // Count frame starts until one frame covers the final sample.
            let mut starts = vec![0usize];
            while starts.last().unwrap() + cfg.window_size < len {
                starts.push(starts.last().unwrap() + cfg.hop_size);
            }
            assert_eq!(cfg.frames_for(len), starts.len(), "len {len}");
        }
        assert_eq!(cfg.frames_for(16000), 124);
    }

    #[test]
    fn round_trip_white_noise() {
        let x = noise(16000, 1);
        let s = stft_samples(&x, &StftConfig::default()).unwrap();
        let y = istft_samples(&s).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(rel_err(&y, &x) < 1e-6);
    }

    #[test]
    fn round_trip_odd_length_and_other_configs() {
        for (len, cfg) in [
            (1001, StftConfig::default()),
            (
                777,
                StftConfig {
                    window_size: 200,
                    hop_size: 50,
                    fft_size: 256,
                    window: Window::SqrtHann,
                },
            ),
            (
                300,
                StftConfig {
                    window_size: 64,
                    hop_size: 64,
                    fft_size: 64,
                    window: Window::Rect,
                },
            ),
        ] {
            let x = noise(len, len as u64);
            let y = istft_samples(&stft_samples(&x, &cfg).unwrap()).unwrap();
            assert_eq!(y.len(), len);
            assert!(rel_err(&y, &x) < 1e-6);
        }
    }

    #[test]
    fn sqrt_hann_power_is_constant_at_half_overlap() {
        let cfg = StftConfig::default();
        let den = window_power(&cfg, 10);
        for v in &den[cfg.hop_size..den.len() - cfg.hop_size] {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let x = noise(700, 3);
        let cfg = StftConfig::default();
        let s = stft_samples(&x, &cfg).unwrap();
        let w = cfg.window.taps(256);
        for t in 0..s.n_frames {
            let time: f64 = (0..256)
                .map(|i| x.get(t * 128 + i).map_or(0.0, |v| v * w[i]).powi(2))
                .sum();
            let mut full = vec![Complex64::default(); 256];
            hermitian_fill(&s.frames[t * 129..(t + 1) * 129], &mut full);
            let freq: f64 = full.iter().map(|c| c.norm_sqr()).sum::<f64>() / 256.0;
            assert!((time - freq).abs() < 1e-9 * time.max(1.0));
        }
    }

    #[test]
    fn mismatched_spectrogram_is_rejected() {
        let mut s = stft_samples(&noise(1000, 4), &StftConfig::default()).unwrap();
        s.original_length = 5000;
        assert!(istft_samples(&s).is_err());
        assert!(stft_samples(&[], &StftConfig::default()).is_err());
    }

    #[test]
    fn mixing_gains() {
        let a = AudioClip::new(vec![1.0, -1.0, 1.0, -1.0], SAMPLE_RATE).unwrap();
        let b = AudioClip::new(vec![-1.0, -1.0, 1.0, 1.0], SAMPLE_RATE).unwrap();
        let (_, s0) = mix_at_snr(&a, &b, 0.0).unwrap();
        assert_eq!(s0.samples, b.samples);
        let (m, s20) = mix_at_snr(&a, &b, 20.0).unwrap();
        for (x, y) in s20.samples.iter().zip(&b.samples) {
            assert!((x - 0.1 * y).abs() < 1e-15);
        }
        assert_eq!(m.samples[0], 1.0 + s20.samples[0]);
        let z = AudioClip::new(vec![0.0; 4], SAMPLE_RATE).unwrap();
        assert!(mix_at_snr(&a, &z, 0.0).is_err());
        assert!(mix_at_snr(&z, &a, 0.0).is_err());
    }

    #[test]
    fn interpolation_examples() {
        assert_eq!(interp_time(&[0.0, 2.0], 1, 3).unwrap(), vec![0.0, 1.0, 2.0]);
        let x = noise(12, 5);
        assert_eq!(interp_time(&x, 3, 4).unwrap(), x);
        assert_eq!(interp_time(&[1.0, 2.0], 2, 3).unwrap(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn interpolation_matches_scalar_oracle() {
        let x = noise(15, 6);
        let y = interp_time(&x, 3, 13).unwrap();
        let m = interp_matrix(5, 13).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..5).map(|r| x[r * 3 + c]).collect();
            for i in 0..13 {
                // Independent scalar interpolation at position i·4/12.
                let pos = i as f64 * 4.0 / 12.0;
                let k = (pos as usize).min(3);
                let t = pos - k as f64;
                let want = col[k] * (1.0 - t) + col[k + 1] * t;
                assert!((y[i * 3 + c] - want).abs() < 1e-12);
                let via_m: f64 = (0..5).map(|r| m[i * 5 + r] * col[r]).sum();
                assert!((via_m - want).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn reconstruction_is_exact(len in 1usize..3000, seed in any::<u64>()) {
            let x = noise(len, seed);
            let y = istft_samples(&stft_samples(&x, &StftConfig::default()).unwrap()).unwrap();
            prop_assert!(rel_err(&y, &x) < 1e-6);
        }

        #[test]
        fn stft_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
            let x = noise(900, seed);
            let y = noise(900, seed ^ 1);
            let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let cfg = StftConfig::default();
            let (sx, sy, sz) = (stft_samples(&x, &cfg).unwrap(), stft_samples(&y, &cfg).unwrap(), stft_samples(&z, &cfg).unwrap());
            for i in 0..sz.frames.len() {
                prop_assert!((sz.frames[i] - (sx.frames[i] * a + sy.frames[i] * b)).norm() < 1e-9);
            }
        }

        #[test]
        fn achieved_snr_matches_request(snr in -20.0f64..20.0, seed in any::<u64>()) {
            let t = AudioClip::new(noise(4000, seed), SAMPLE_RATE).unwrap();
            let i = AudioClip::new(noise(4000, seed ^ 7), SAMPLE_RATE).unwrap();
            let (_, s) = mix_at_snr(&t, &i, snr).unwrap();
            prop_assert!((snr_db(&t.samples, &s.samples) - snr).abs() < 1e-9);
        }

        #[test]
        fn interpolation_keeps_constants(l in 1usize..30, out in 1usize..80, c in -5.0f64..5.0) {
            let y = interp_time(&vec![c; l * 2], 2, out).unwrap();
            prop_assert!(y.iter().all(|v| *v == c));
        }
    }
}
