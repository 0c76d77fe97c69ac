//! Synthetic audio-visual scenes: harmonic speech-like targets, speech-like
//! or noise-like interferers, and face tracks driven by the target envelope.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{key, Configurable, Settings};
use crate::error::{invalid, CoreError, Result};
use crate::signal::{mix_at_snr, AudioClip, SAMPLE_RATE};
use crate::visual::{FaceTrack, VIDEO_FPS};
use crate::wav;

/// Interference type; noise is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Speech,
    Noise,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::Speech, Scenario::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Speech => "speech",
            Scenario::Noise => "noise",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Binary target for the classifier.
    pub fn label(self) -> f64 {
        match self {
            Scenario::Speech => 0.0,
            Scenario::Noise => 1.0,
        }
    }

    /// Inclusive SNR range, dB.
    pub fn snr_range(self) -> (f64, f64) {
        match self {
            Scenario::Speech => (-15.0, 5.0),
            Scenario::Noise => (-10.0, 10.0),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub target: AudioClip,
    /// Unscaled interferer; `mixture` applies the SNR gain.
    pub interferer: AudioClip,
    pub face_track: FaceTrack,
    pub scenario: Scenario,
    pub snr_db: f64,
    pub mixture: AudioClip,
}

impl Scene {
    pub fn assemble(
        scene_id: String,
        target: AudioClip,
        interferer: AudioClip,
        face_track: FaceTrack,
        scenario: Scenario,
        snr_db: f64,
    ) -> Result<Self> {
        let (mixture, _) = mix_at_snr(&target, &interferer, snr_db)?;
        Ok(Self {
            scene_id,
            target,
            interferer,
            face_track,
            scenario,
            snr_db,
            mixture,
        })
    }

    /// Copy with every stream cut to its first `seconds` (no-op when shorter).
    pub fn truncated(&self, seconds: f64) -> Result<Scene> {
        let n = ((seconds * self.target.sample_rate as f64).round() as usize).max(1);
        if n >= self.target.len() {
            return Ok(self.clone());
        }
        let cut = |c: &AudioClip| AudioClip::new(c.samples[..n].to_vec(), c.sample_rate);
        let tv = ((n as f64 / self.target.sample_rate as f64) * self.face_track.fps as f64).round().max(1.0) as usize;
        let tv = tv.min(self.face_track.n_frames);
        let px = self.face_track.height * self.face_track.width;
        let face = FaceTrack::new(
            self.face_track.frames[..tv * px].to_vec(),
            tv,
            self.face_track.height,
            self.face_track.width,
            self.face_track.fps,
        )?;
        Ok(Scene {
            scene_id: self.scene_id.clone(),
            target: cut(&self.target)?,
            interferer: cut(&self.interferer)?,
            face_track: face,
            scenario: self.scenario,
            snr_db: self.snr_db,
            mixture: cut(&self.mixture)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub count: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Fraction of noise-scenario scenes.
    pub noise_ratio: f64,
    pub seed: u64,
    pub face_height: usize,
    pub face_width: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            count: 100,
            duration_s: 1.0,
            sample_rate: SAMPLE_RATE,
            noise_ratio: 0.5,
            seed: 7,
            face_height: 16,
            face_width: 16,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s >= 0.5 && self.duration_s.is_finite()) {
            return Err(CoreError::Config(format!("scene duration {} s is below 0.5 s", self.duration_s)));
        }
        if self.sample_rate != SAMPLE_RATE {
            return Err(CoreError::Config(format!("only {SAMPLE_RATE} Hz scenes are supported")));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return Err(CoreError::Config(format!("noise ratio {} outside [0, 1]", self.noise_ratio)));
        }
        if self.face_height == 0 || self.face_width == 0 {
            return Err(CoreError::Config("face track size must be positive".into()));
        }
        Ok(())
    }

    /// Scenario of scene `index`: noise scenes are spread evenly at the spec's ratio.
    pub fn scenario_of(&self, index: usize) -> Scenario {
        let r = self.noise_ratio;
        if ((index + 1) as f64 * r).floor() > (index as f64 * r).floor() {
            Scenario::Noise
        } else {
            Scenario::Speech
        }
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

impl Configurable for SceneSpec {
    fn read_settings(&mut self, s: &mut Settings, prefix: &str) -> Result<()> {
        s.take(&key(prefix, "count"), &mut self.count)?;
        s.take(&key(prefix, "duration_s"), &mut self.duration_s)?;
        s.take(&key(prefix, "sample_rate"), &mut self.sample_rate)?;
        s.take(&key(prefix, "noise_ratio"), &mut self.noise_ratio)?;
        s.take(&key(prefix, "seed"), &mut self.seed)?;
        s.take(&key(prefix, "face_height"), &mut self.face_height)?;
        s.take(&key(prefix, "face_width"), &mut self.face_width)
    }

    fn write_settings(&self, s: &mut Settings, prefix: &str) {
        s.set(key(prefix, "count"), self.count);
        s.set(key(prefix, "duration_s"), self.duration_s);
        s.set(key(prefix, "sample_rate"), self.sample_rate);
        s.set(key(prefix, "noise_ratio"), self.noise_ratio);
        s.set(key(prefix, "seed"), self.seed);
        s.set(key(prefix, "face_height"), self.face_height);
        s.set(key(prefix, "face_width"), self.face_width);
    }
}

fn peak_normalize(mut x: Vec<f64>) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut x {
            *v /= peak;
        }
    }
    x
}

fn n_samples(duration: f64, sample_rate: u32) -> usize {
    ((duration * sample_rate as f64).round() as usize).max(1)
}

/// Harmonic source with a wandering 80–300 Hz pitch, formant envelope that
/// moves once per syllable, and 3–6 Hz syllabic amplitude modulation.
pub fn gen_speechlike(rng: &mut impl Rng, duration: f64, sample_rate: u32) -> Result<AudioClip> {
    if !(duration > 0.0) {
        return invalid("duration must be positive");
    }
    let n = n_samples(duration, sample_rate);
    let sr = sample_rate as f64;
    let base_f0: f64 = rng.gen_range(100.0..240.0);
    let vib_rate: f64 = rng.gen_range(0.5..2.0);
    let vib_depth: f64 = rng.gen_range(0.05..0.2);
    let vib_phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let syl_rate: f64 = rng.gen_range(3.0..6.0);
    let syl_phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let syllables = (duration * syl_rate).ceil() as usize + 2;
    let formants: Vec<[f64; 3]> = (0..syllables)
        .map(|_| {
            [
                rng.gen_range(300.0..900.0),
                rng.gen_range(900.0..2300.0),
                rng.gen_range(2300.0..3400.0),
            ]
        })
        .collect();
    let widths = [120.0, 200.0, 300.0];
    let gains = [1.0, 0.6, 0.3];
    let max_harmonics = 48;
    let mut phases: Vec<f64> = (0..max_harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f0 = (base_f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t + vib_phase).sin())).clamp(80.0, 300.0);
        let pos = t * syl_rate;
        let k = pos.floor() as usize;
        let frac = pos - k as f64;
        let fm: Vec<f64> = (0..3)
            .map(|j| formants[k][j] + frac * (formants[k + 1][j] - formants[k][j]))
            .collect();
        let env = 0.5 * (1.0 - (2.0 * PI * syl_rate * t + syl_phase).cos());
        let mut v = 0.0;
        for (h, ph) in phases.iter_mut().enumerate() {
            let f = f0 * (h + 1) as f64;
            if f >= 0.45 * sr {
                break;
            }
            *ph += 2.0 * PI * f / sr;
            let amp: f64 = (0..3).map(|j| gains[j] * (-((f - fm[j]) / widths[j]).powi(2)).exp()).sum::<f64>() + 0.01;
            v += amp * ph.sin();
        }
        *o = env * env.sqrt() * v;
    }
    for p in &mut phases {
        *p %= 2.0 * PI;
    }
    AudioClip::new(peak_normalize(out), sample_rate)
}

/// Gaussian noise through a one-pole filter of random tilt, optionally with
/// short loud bursts.
pub fn gen_noiselike(rng: &mut impl Rng, duration: f64, sample_rate: u32) -> Result<AudioClip> {
    if !(duration > 0.0) {
        return invalid("duration must be positive");
    }
    let n = n_samples(duration, sample_rate);
    let a: f64 = rng.gen_range(-0.9..0.95);
    let mut y = 0.0;
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
            y = g + a * y;
            y
        })
        .collect();
    if rng.gen_bool(0.5) {
        let bursts = rng.gen_range(1..=3);
        for _ in 0..bursts {
            let len = ((rng.gen_range(0.02..0.1) * sample_rate as f64) as usize).min(n);
            let start = rng.gen_range(0..=n - len);
            let gain: f64 = rng.gen_range(2.0..4.0);
            for v in &mut out[start..start + len] {
                *v *= gain;
            }
        }
    }
    AudioClip::new(peak_normalize(out), sample_rate)
}

/// Frame RMS of `x` over consecutive `hop`-sample windows, `frames` values.
fn frame_envelope(x: &[f64], hop: usize, frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|k| {
            let lo = (k * hop).min(x.len());
            let hi = ((k + 1) * hop).min(x.len());
            if hi == lo {
                0.0
            } else {
                (x[lo..hi].iter().map(|v| v * v).sum::<f64>() / (hi - lo) as f64).sqrt()
            }
        })
        .collect()
}

pub const MOUTH_ROWS: std::ops::Range<f64> = 0.6..0.9;
pub const MOUTH_COLS: std::ops::Range<f64> = 0.25..0.75;

/// 25 fps track whose mouth region brightens with the target's amplitude
/// envelope, over a static per-scene texture.
pub fn gen_face_track(target: &AudioClip, rng: &mut impl Rng, height: usize, width: usize) -> Result<FaceTrack> {
    if height == 0 || width == 0 {
        return invalid("face track size must be positive");
    }
    let frames = ((target.duration() * VIDEO_FPS as f64).round() as usize).max(1);
    let hop = (target.sample_rate / VIDEO_FPS) as usize;
    let env = frame_envelope(&target.samples, hop, frames);
    let peak = env.iter().fold(0.0f64, |m, &v| m.max(v));
    let mask: Vec<f64> = (0..height * width)
        .map(|p| {
            let (r, c) = ((p / width) as f64 / height as f64, (p % width) as f64 / width as f64);
            if MOUTH_ROWS.contains(&r) && MOUTH_COLS.contains(&c) {
                1.0
            } else {
                0.15
            }
        })
        .collect();
    let texture: Vec<f64> = (0..height * width).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let mut data = Vec::with_capacity(frames * height * width);
    for &e in &env {
        let level = if peak > 0.0 { e / peak } else { 0.0 };
        for p in 0..height * width {
            data.push((0.3 + 0.4 * level * mask[p] + texture[p]).clamp(0.0, 1.0) as f32);
        }
    }
    FaceTrack::new(data, frames, height, width, VIDEO_FPS)
}

/// Peak level of stored mixtures.
const MIX_PEAK: f64 = 0.9;

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Builds one scene from fresh sources. Stems are PCM16-representable so the
/// scene survives a round trip through WAV files unchanged.
pub fn compose_scene(
    scene_id: String,
    target: &AudioClip,
    interferer: &AudioClip,
    face_track: FaceTrack,
    scenario: Scenario,
    snr_db: f64,
) -> Result<Scene> {
    let (mix, _) = mix_at_snr(target, interferer, snr_db)?;
    let peak = mix.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > MIX_PEAK { MIX_PEAK / peak } else { 1.0 };
    let t: Vec<f64> = target.samples.iter().map(|v| v * gain).collect();
    let target = AudioClip::new(wav::quantize_all(&t), target.sample_rate)?;
    let interferer = AudioClip::new(wav::quantize_all(&interferer.samples), interferer.sample_rate)?;
    Scene::assemble(scene_id, target, interferer, face_track, scenario, snr_db)
}

pub fn scene_id(index: usize) -> String {
    format!("scene{index:05}")
}

fn draw_snr(rng: &mut impl Rng, scenario: Scenario) -> f64 {
    let (lo, hi) = scenario.snr_range();
    rng.gen_range(lo..=hi)
}

/// Scene `index` of the dataset described by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = scene_rng(spec.seed, index as u64);
    let scenario = spec.scenario_of(index);
    let dur = spec.samples() as f64 / spec.sample_rate as f64;
    let target = gen_speechlike(&mut rng, dur, spec.sample_rate)?;
    let interferer = match scenario {
        Scenario::Speech => gen_speechlike(&mut rng, dur, spec.sample_rate)?,
        Scenario::Noise => gen_noiselike(&mut rng, dur, spec.sample_rate)?,
    };
    let snr = draw_snr(&mut rng, scenario);
    let face = gen_face_track(&target, &mut rng, spec.face_height, spec.face_width)?;
    compose_scene(scene_id(index), &target, &interferer, face, scenario, snr)
}

pub fn generate(spec: &SceneSpec) -> Result<Vec<Scene>> {
    (0..spec.count).map(|i| generate_scene(spec, i)).collect()
}

/// Sources for on-the-fly mixing.
#[derive(Clone, Debug, Default)]
pub struct SourcePool {
    pub targets: Vec<(AudioClip, FaceTrack)>,
    pub speech: Vec<AudioClip>,
    pub noise: Vec<AudioClip>,
}

impl SourcePool {
    /// Targets with their faces plus each scene's interferer under its scenario.
    pub fn from_scenes(scenes: &[Scene]) -> Self {
        let mut pool = Self::default();
        for s in scenes {
            pool.targets.push((s.target.clone(), s.face_track.clone()));
            match s.scenario {
                Scenario::Speech => pool.speech.push(s.interferer.clone()),
                Scenario::Noise => pool.noise.push(s.interferer.clone()),
            }
        }
        pool
    }

    pub fn interferers(&self, scenario: Scenario) -> &[AudioClip] {
        match scenario {
            Scenario::Speech => &self.speech,
            Scenario::Noise => &self.noise,
        }
    }
}

/// Draws a fresh target, interferer and SNR. `noise_ratio` is the chance of a
/// noise scenario; scenarios without interferers in the pool are never drawn.
pub fn dynamic_mix(rng: &mut impl Rng, pool: &SourcePool, noise_ratio: f64, scene_id: String) -> Result<Scene> {
    if pool.targets.is_empty() {
        return invalid("source pool has no targets");
    }
    let scenario = match (pool.speech.is_empty(), pool.noise.is_empty()) {
        (true, true) => return invalid("source pool has no interferers"),
        (true, false) => Scenario::Noise,
        (false, true) => Scenario::Speech,
        (false, false) => {
            if rng.gen_bool(noise_ratio.clamp(0.0, 1.0)) {
                Scenario::Noise
            } else {
                Scenario::Speech
            }
        }
    };
    let (target, face) = &pool.targets[rng.gen_range(0..pool.targets.len())];
    let list = pool.interferers(scenario);
    let interferer = &list[rng.gen_range(0..list.len())];
    let n = target.len().min(interferer.len());
    let cut = |c: &AudioClip| AudioClip::new(c.samples[..n].to_vec(), c.sample_rate);
    let snr = draw_snr(rng, scenario);
    Scene::assemble(scene_id, cut(target)?, cut(interferer)?, face.clone(), scenario, snr)
}

pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: [&str; 7] = ["scene_id", "target", "interferer", "mixture", "face", "scenario", "snr_db"];

/// One manifest row; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub target: PathBuf,
    pub interferer: PathBuf,
    pub mixture: PathBuf,
    pub face: PathBuf,
    pub scenario: Scenario,
    pub snr_db: f64,
}

fn manifest_err(detail: impl Into<String>) -> CoreError {
    CoreError::Format {
        kind: "scene manifest",
        detail: detail.into(),
    }
}

pub fn format_manifest(entries: &[ManifestEntry]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    let en = |e: csv::Error| manifest_err(e.to_string());
    w.write_record(MANIFEST_HEADER).map_err(en)?;
    for e in entries {
        let path = |p: &Path| p.to_string_lossy().into_owned();
        w.write_record([
            e.scene_id.clone(),
            path(&e.target),
            path(&e.interferer),
            path(&e.mixture),
            path(&e.face),
            e.scenario.name().to_string(),
            e.snr_db.to_string(),
        ])
        .map_err(en)?;
    }
    w.into_inner().map_err(|e| manifest_err(e.to_string()))
}

pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .quoting(false)
        .from_reader(bytes);
    let header = r.headers().map_err(|e| manifest_err(e.to_string()))?;
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(manifest_err(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| manifest_err(e.to_string()))?;
        let at = |what: &str| format!("row {}: {what}", line + 1);
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(manifest_err(at(&format!("{} fields", rec.len()))));
        }
        let scenario = Scenario::from_name(&rec[5]).ok_or_else(|| manifest_err(at(&format!("scenario {:?}", &rec[5]))))?;
        let snr_db: f64 = rec[6].parse().map_err(|_| manifest_err(at(&format!("snr {:?}", &rec[6]))))?;
        let (lo, hi) = scenario.snr_range();
        if !(lo..=hi).contains(&snr_db) {
            return Err(manifest_err(at(&format!("snr {snr_db} outside the {scenario} range"))));
        }
        if rec[0].is_empty() || !seen.insert(rec[0].to_string()) {
            return Err(manifest_err(at(&format!("empty or duplicate scene id {:?}", &rec[0]))));
        }
        out.push(ManifestEntry {
            scene_id: rec[0].to_string(),
            target: PathBuf::from(&rec[1]),
            interferer: PathBuf::from(&rec[2]),
            mixture: PathBuf::from(&rec[3]),
            face: PathBuf::from(&rec[4]),
            scenario,
            snr_db,
        });
    }
    Ok(out)
}

fn entry_for(scene: &Scene) -> ManifestEntry {
    let id = &scene.scene_id;
    ManifestEntry {
        scene_id: id.clone(),
        target: PathBuf::from(format!("audio/{id}_target.wav")),
        interferer: PathBuf::from(format!("audio/{id}_interferer.wav")),
        mixture: PathBuf::from(format!("audio/{id}_mixture.wav")),
        face: PathBuf::from(format!("face/{id}.ftrk")),
        scenario: scene.scenario,
        snr_db: scene.snr_db,
    }
}

fn with_scene<T>(id: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        CoreError::Io { path, source } => CoreError::Io {
            path,
            source: std::io::Error::new(source.kind(), format!("scene {id}: {source}")),
        },
        CoreError::Format { kind, detail } => CoreError::Format {
            kind,
            detail: format!("scene {id}: {detail}"),
        },
        other => other,
    })
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| CoreError::io(p, e))
}

/// Writes scenes, their stems and face tracks under `dir` with a manifest.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<Vec<ManifestEntry>> {
    mkdir(&dir.join("audio"))?;
    mkdir(&dir.join("face"))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for s in scenes {
        let e = entry_for(s);
        with_scene(&s.scene_id, (|| {
            wav::write(&dir.join(&e.target), &s.target)?;
            wav::write(&dir.join(&e.interferer), &s.interferer)?;
            wav::write(&dir.join(&e.mixture), &s.mixture)?;
            s.face_track.write(&dir.join(&e.face))
        })())?;
        entries.push(e);
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, format_manifest(&entries)?).map_err(|e| CoreError::io(&path, e))?;
    Ok(entries)
}

/// Generates the dataset for `spec` into `dir`, including a copy of the spec.
pub fn build_dataset(spec: &SceneSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    let scenes = generate(spec)?;
    let entries = write_dataset(dir, &scenes)?;
    let mut s = Settings::new();
    spec.write_settings(&mut s, "scenes");
    s.save(&dir.join("spec.ini"))?;
    Ok(entries)
}

/// Loads every scene listed in `dir/manifest.tsv`. The stored mixture must
/// equal the PCM16 rendering of the stems remixed at the stored SNR.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = std::fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
    let entries = parse_manifest(&bytes)?;
    entries
        .iter()
        .map(|e| with_scene(&e.scene_id, load_entry(dir, e)))
        .collect()
}

fn load_entry(dir: &Path, e: &ManifestEntry) -> Result<Scene> {
    let target = wav::read(&dir.join(&e.target))?;
    let interferer = wav::read(&dir.join(&e.interferer))?;
    let stored = wav::read(&dir.join(&e.mixture))?;
    let face = FaceTrack::read(&dir.join(&e.face))?;
    let scene = Scene::assemble(e.scene_id.clone(), target, interferer, face, e.scenario, e.snr_db)?;
    if wav::quantize_all(&scene.mixture.samples) != stored.samples {
        return Err(manifest_err("stored mixture does not match its stems"));
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex64;
    use rustfft::FftPlanner;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn power_spectrum(x: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        buf[1..buf.len() / 2].iter().map(|c| c.norm_sqr()).collect()
    }

    fn flatness(x: &[f64]) -> f64 {
        let p = power_spectrum(x);
        let n = p.len() as f64;
        let geo = (p.iter().map(|v| (v + 1e-30).ln()).sum::<f64>() / n).exp();
        geo / (p.iter().sum::<f64>() / n)
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_speechlike(&mut rng(1), 1.0, SAMPLE_RATE).unwrap();
        let b = gen_speechlike(&mut rng(1), 1.0, SAMPLE_RATE).unwrap();
        assert_eq!(a, b);
        let c = gen_noiselike(&mut rng(1), 1.0, SAMPLE_RATE).unwrap();
        assert_eq!(c, gen_noiselike(&mut rng(1), 1.0, SAMPLE_RATE).unwrap());
        assert_ne!(c, gen_noiselike(&mut rng(2), 1.0, SAMPLE_RATE).unwrap());
        assert_eq!(a.len(), 16000);
        let peak = a.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(peak, 1.0);
    }

    #[test]
    fn speechlike_is_less_flat_than_white_noise() {
        let mut r = rng(3);
        let white: Vec<f64> = (0..16000).map(|_| r.gen_range(-1.0..1.0)).collect();
        let wf = flatness(&white);
        for seed in 0..5 {
            let s = gen_speechlike(&mut rng(seed), 1.0, SAMPLE_RATE).unwrap();
            assert!(flatness(&s.samples) < 0.5 * wf, "{} vs {wf}", flatness(&s.samples));
        }
    }

    #[test]
    fn speechlike_envelope_modulates_at_syllable_rate() {
        for seed in 0..5 {
            let s = gen_speechlike(&mut rng(seed), 2.0, SAMPLE_RATE).unwrap();
            // 100 Hz envelope, mean removed, zero-padded to 10 s for 0.1 Hz bins.
            let env = frame_envelope(&s.samples, 160, 200);
            let m = env.iter().sum::<f64>() / env.len() as f64;
            let mut padded: Vec<f64> = env.iter().map(|v| v - m).collect();
            padded.resize(1000, 0.0);
            let p = power_spectrum(&padded);
            let peak_bin = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 + 1;
            let hz = peak_bin as f64 * 0.1;
            assert!((2.9..=6.1).contains(&hz), "seed {seed}: envelope peak at {hz} Hz");
        }
    }

    #[test]
    fn noiselike_has_no_pitch_periodicity() {
        for seed in 0..8 {
            let x = gen_noiselike(&mut rng(seed), 1.0, SAMPLE_RATE).unwrap().samples;
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let c: Vec<f64> = x.iter().map(|v| v - m).collect();
            let r0: f64 = c.iter().map(|v| v * v).sum();
            for lag in 53..=200 {
                let r: f64 = c[..c.len() - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum();
                assert!((r / r0).abs() < 0.3, "seed {seed} lag {lag}: {}", r / r0);
            }
        }
    }

    #[test]
    fn speechlike_is_periodic_in_pitch_range() {
        // Positive control for the autocorrelation oracle above.
        let x = gen_speechlike(&mut rng(4), 1.0, SAMPLE_RATE).unwrap().samples;
        let r0: f64 = x.iter().map(|v| v * v).sum();
        let best = (53..=200)
            .map(|lag| x[..x.len() - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>() / r0)
            .fold(f64::MIN, f64::max);
        assert!(best > 0.3, "{best}");
    }

    #[test]
    fn face_track_follows_envelope() {
        let target = gen_speechlike(&mut rng(5), 1.0, SAMPLE_RATE).unwrap();
        let track = gen_face_track(&target, &mut rng(6), 16, 16).unwrap();
        assert_eq!(track.n_frames, 25);
        let env = frame_envelope(&target.samples, 640, 25);
        let means: Vec<f64> = (0..25).map(|t| track.frame_mean(t)).collect();
        let corr = pearson(&env, &means);
        assert!(corr > 0.9, "{corr}");

        let silent = AudioClip::new(vec![0.0; 12_345], SAMPLE_RATE).unwrap();
        let track = gen_face_track(&silent, &mut rng(6), 16, 16).unwrap();
        assert_eq!(track.n_frames, 19);
        for t in 1..track.n_frames {
            assert_eq!(track.frame(t), track.frame(0));
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn scenario_interleaving_honors_ratio() {
        let spec = SceneSpec {
            noise_ratio: 0.25,
            ..SceneSpec::default()
        };
        let noise = (0..100).filter(|&i| spec.scenario_of(i) == Scenario::Noise).count();
        assert_eq!(noise, 25);
        let half = SceneSpec::default();
        assert_eq!(half.scenario_of(0), Scenario::Speech);
        assert_eq!(half.scenario_of(1), Scenario::Noise);
        let none = SceneSpec {
            noise_ratio: 0.0,
            ..SceneSpec::default()
        };
        assert!((0..50).all(|i| none.scenario_of(i) == Scenario::Speech));
    }

    #[test]
    fn scenes_satisfy_invariants() {
        let spec = SceneSpec {
            count: 6,
            ..SceneSpec::default()
        };
        for s in generate(&spec).unwrap() {
            let (lo, hi) = s.scenario.snr_range();
            assert!((lo..=hi).contains(&s.snr_db));
            let (mix, _) = mix_at_snr(&s.target, &s.interferer, s.snr_db).unwrap();
            assert_eq!(mix, s.mixture);
            assert_eq!(wav::quantize_all(&s.target.samples), s.target.samples);
            assert!(s.mixture.samples.iter().all(|v| v.abs() <= 0.9 + 1e-4));
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            count: 3,
            duration_s: 0.5,
            ..SceneSpec::default()
        };
        build_dataset(&spec, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, generate(&spec).unwrap());

        // Tampering with the stored mixture is detected.
        let m = dir.path().join("audio/scene00001_mixture.wav");
        let mut clip = wav::read(&m).unwrap();
        clip.samples[10] += 3.0 / 32767.0;
        wav::write(&m, &clip).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("scene00001"), "{err}");
    }

    #[test]
    fn manifest_parsing() {
        let e = ManifestEntry {
            scene_id: "a".into(),
            target: "t.wav".into(),
            interferer: "i.wav".into(),
            mixture: "m.wav".into(),
            face: "f.ftrk".into(),
            scenario: Scenario::Noise,
            snr_db: -3.25,
        };
        let bytes = format_manifest(std::slice::from_ref(&e)).unwrap();
        assert_eq!(parse_manifest(&bytes).unwrap(), vec![e.clone()]);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("scene_id\ttarget\t"));
        assert!(parse_manifest(text.replace("noise", "music").as_bytes()).is_err());
        assert!(parse_manifest(text.replace("-3.25", "12").as_bytes()).is_err());
        let dup = format_manifest(&[e.clone(), e]).unwrap();
        assert!(parse_manifest(&dup).is_err());
        assert!(parse_manifest(b"x\ty\n").is_err());
    }

    #[test]
    fn truncation_keeps_streams_aligned() {
        let s = generate_scene(&SceneSpec::default(), 0).unwrap();
        let t = s.truncated(0.6).unwrap();
        assert_eq!(t.mixture.len(), 9600);
        assert_eq!(t.face_track.n_frames, 15);
        assert_eq!(t.mixture.samples[..], s.mixture.samples[..9600]);
        assert_eq!(s.truncated(5.0).unwrap(), s);
    }
}
