//! Audio-visual scenario classifier: speech and visual front-ends, a TCN
//! back-end and a sigmoid head giving the probability of a noise interferer.

use std::path::Path;

use savgrid_nn::checkpoint;
use savgrid_nn::layers::{Conv1d, LayerNorm, Linear, Prelu};
use savgrid_nn::{Conv1dSpec, Graph, ParamStore, Tensor, Var};

use crate::config::{key, manifest_path, Configurable, Settings};
use crate::error::{invalid, CoreError, Result};
use crate::gridnet::with_path;
use crate::scene::Scenario;
use crate::signal::{AudioClip, SAMPLE_RATE};
use crate::visual::{check_alignment, FaceTrack, VisualConfig, VisualFrontend};

/// Probabilities at or above this threshold are labelled noise.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioPrediction {
    pub prob: f64,
    pub label: Scenario,
}

impl ScenarioPrediction {
    pub fn from_prob(prob: f64) -> Self {
        let label = if prob >= THRESHOLD { Scenario::Noise } else { Scenario::Speech };
        Self { prob, label }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// Channels of the strided waveform convolution.
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    /// Average-pooling factor after the waveform convolution.
    pub pool: usize,
    /// Inner channels of every TCN block.
    pub tcn_hidden: usize,
    /// Audio TCN dilations run 1, 2, 4, … up to this value.
    pub audio_max_dilation: usize,
    pub visual: VisualConfig,
    /// Channels of the fused back-end.
    pub backend_channels: usize,
    pub backend_max_dilation: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            conv_channels: 16,
            conv_kernel: 40,
            conv_stride: 20,
            pool: 4,
            tcn_hidden: 32,
            audio_max_dilation: 8,
            visual: VisualConfig::default(),
            backend_channels: 16,
            backend_max_dilation: 4,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.conv_channels,
            self.conv_kernel,
            self.conv_stride,
            self.pool,
            self.tcn_hidden,
            self.audio_max_dilation,
            self.backend_channels,
            self.backend_max_dilation,
        ];
        if sizes.contains(&0) {
            return Err(CoreError::Config(format!("classifier sizes must be positive: {self:?}")));
        }
        self.visual.validate()
    }

    /// Samples needed for at least one pooled audio feature.
    pub fn min_samples(&self) -> usize {
        let frames = self.pool;
        (frames - 1) * self.conv_stride + self.conv_kernel - 2 * (self.conv_kernel / 4)
    }
}

fn dilations(max: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |d| Some(d * 2)).take_while(|&d| d <= max).collect()
}

impl Configurable for ClassifierConfig {
    fn read_settings(&mut self, s: &mut Settings, prefix: &str) -> Result<()> {
        s.take(&key(prefix, "conv_channels"), &mut self.conv_channels)?;
        s.take(&key(prefix, "conv_kernel"), &mut self.conv_kernel)?;
        s.take(&key(prefix, "conv_stride"), &mut self.conv_stride)?;
        s.take(&key(prefix, "pool"), &mut self.pool)?;
        s.take(&key(prefix, "tcn_hidden"), &mut self.tcn_hidden)?;
        s.take(&key(prefix, "audio_max_dilation"), &mut self.audio_max_dilation)?;
        self.visual.read_settings(s, &key(prefix, "visual"))?;
        s.take(&key(prefix, "backend_channels"), &mut self.backend_channels)?;
        s.take(&key(prefix, "backend_max_dilation"), &mut self.backend_max_dilation)
    }

    fn write_settings(&self, s: &mut Settings, prefix: &str) {
        s.set(key(prefix, "conv_channels"), self.conv_channels);
        s.set(key(prefix, "conv_kernel"), self.conv_kernel);
        s.set(key(prefix, "conv_stride"), self.conv_stride);
        s.set(key(prefix, "pool"), self.pool);
        s.set(key(prefix, "tcn_hidden"), self.tcn_hidden);
        s.set(key(prefix, "audio_max_dilation"), self.audio_max_dilation);
        self.visual.write_settings(s, &key(prefix, "visual"));
        s.set(key(prefix, "backend_channels"), self.backend_channels);
        s.set(key(prefix, "backend_max_dilation"), self.backend_max_dilation);
    }
}

/// Residual block: 1×1 up, PReLU, LN, dilated depthwise k=3, PReLU, LN, 1×1 down.
pub struct TcnBlock {
    up: Conv1d,
    act1: Prelu,
    norm1: LayerNorm,
    depthwise: Conv1d,
    act2: Prelu,
    norm2: LayerNorm,
    down: Conv1d,
}

impl TcnBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, dilation: usize) -> Result<Self> {
        let dw = Conv1dSpec {
            stride: 1,
            padding: dilation,
            dilation,
            groups: hidden,
        };
        let pw = Conv1dSpec::default();
        Ok(Self {
            up: Conv1d::new(store, &format!("{name}.up"), channels, hidden, 1, pw, true)?,
            act1: Prelu::new(store, &format!("{name}.act1"), hidden)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), hidden)?,
            depthwise: Conv1d::new(store, &format!("{name}.depthwise"), hidden, hidden, 3, dw, true)?,
            act2: Prelu::new(store, &format!("{name}.act2"), hidden)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), hidden)?,
            down: Conv1d::new(store, &format!("{name}.down"), hidden, channels, 1, pw, true)?,
        })
    }

    /// `x` is `[1, L, C]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.up.forward(g, x)?;
        let y = self.act1.forward(g, y)?;
        let y = self.norm1.forward(g, y)?;
        let y = self.depthwise.forward(g, y)?;
        let y = self.act2.forward(g, y)?;
        let y = self.norm2.forward(g, y)?;
        let y = self.down.forward(g, y)?;
        Ok(g.add(x, y)?)
    }
}

pub struct ClassifierNet {
    cfg: ClassifierConfig,
    conv: Conv1d,
    audio_tcn: Vec<TcnBlock>,
    visual: VisualFrontend,
    fuse: Conv1d,
    backend: Vec<TcnBlock>,
    head: Linear,
}

const RMS_FLOOR: f64 = 1e-8;

impl ClassifierNet {
    pub fn new(store: &mut ParamStore, cfg: &ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let ca = cfg.conv_channels;
        let conv_spec = Conv1dSpec {
            stride: cfg.conv_stride,
            padding: cfg.conv_kernel / 4,
            ..Conv1dSpec::default()
        };
        let conv = Conv1d::new(store, "speech.conv", 1, ca, cfg.conv_kernel, conv_spec, true)?;
        let audio_tcn = dilations(cfg.audio_max_dilation)
            .into_iter()
            .enumerate()
            .map(|(i, d)| TcnBlock::new(store, &format!("speech.tcn.{i}"), ca, cfg.tcn_hidden, d))
            .collect::<Result<_>>()?;
        let visual = VisualFrontend::new(store, "visual", &cfg.visual)?;
        let cb = cfg.backend_channels;
        let fuse = Conv1d::new(store, "backend.fuse", ca + cfg.visual.dv(), cb, 1, Conv1dSpec::default(), true)?;
        let backend = dilations(cfg.backend_max_dilation)
            .into_iter()
            .enumerate()
            .map(|(i, d)| TcnBlock::new(store, &format!("backend.tcn.{i}"), cb, cfg.tcn_hidden, d))
            .collect::<Result<_>>()?;
        let head = Linear::new(store, "backend.head", cb, 1, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            conv,
            audio_tcn,
            visual,
            fuse,
            backend,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    /// Speech front-end features `[1, Tv, C]` at the video frame rate.
    pub fn speech_features(&self, g: &mut Graph<'_>, mixture: &[f64], tv: usize) -> Result<Var> {
        let n = mixture.len();
        let rms = (mixture.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt().max(RMS_FLOOR);
        let x = g.constant(Tensor::new(&[1, n, 1], mixture.iter().map(|v| v / rms).collect())?);
        let y = self.conv.forward(g, x)?;
        let y = g.relu(y)?;
        // log(1 + x) compresses the level spread of bursts and onsets.
        let y = g.offset(y, 1.0)?;
        let y = g.ln(y)?;
        let y = g.avg_pool1d(y, self.cfg.pool, self.cfg.pool)?;
        let mut y = g.adaptive_avg_pool1d(y, tv)?;
        for b in &self.audio_tcn {
            y = b.forward(g, y)?;
        }
        Ok(y)
    }

    /// Noise probability as a one-element variable.
    pub fn forward(&self, g: &mut Graph<'_>, mixture: &[f64], face: &FaceTrack) -> Result<Var> {
        if mixture.len() < self.cfg.min_samples() {
            return invalid(format!(
                "mixture of {} samples is shorter than the classifier's {} sample minimum",
                mixture.len(),
                self.cfg.min_samples()
            ));
        }
        check_alignment(face, mixture.len(), SAMPLE_RATE)?;
        let tv = face.n_frames;
        let a = self.speech_features(g, mixture, tv)?;
        let v = self.visual.forward(g, face)?;
        let v = g.reshape(v, &[1, tv, self.cfg.visual.dv()])?;
        let x = g.concat(&[a, v], 2)?;
        let mut y = self.fuse.forward(g, x)?;
        for b in &self.backend {
            y = b.forward(g, y)?;
        }
        let y = g.adaptive_avg_pool1d(y, 1)?;
        let y = g.reshape(y, &[1, self.cfg.backend_channels])?;
        let z = self.head.forward(g, y)?;
        let p = g.sigmoid(z)?;
        Ok(g.reshape(p, &[1])?)
    }
}

pub struct Classifier {
    pub store: ParamStore,
    pub net: ClassifierNet,
}

impl Classifier {
    pub fn new(cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let net = ClassifierNet::new(&mut store, cfg)?;
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &ClassifierConfig {
        self.net.config()
    }

    pub fn predict_samples(&self, mixture: &[f64], face: &FaceTrack) -> Result<ScenarioPrediction> {
        let mut g = Graph::inference(&self.store);
        let p = self.net.forward(&mut g, mixture, face)?;
        Ok(ScenarioPrediction::from_prob(g.value(p).data()[0]))
    }

    pub fn classify(&self, mixture: &AudioClip, face: &FaceTrack) -> Result<ScenarioPrediction> {
        self.predict_samples(&mixture.samples, face)
    }

    pub fn manifest(&self) -> Settings {
        let mut s = Settings::new();
        s.set("model.kind", "classifier");
        s.set("model.seed", self.store.seed());
        self.config().write_settings(&mut s, "classifier");
        s
    }

    pub fn save(&self, path: &Path, extra: &Settings) -> Result<()> {
        checkpoint::save_store(path, &self.store).map_err(|e| with_path(e.into(), path))?;
        let mut m = self.manifest();
        m.merge(extra.clone());
        m.save(&manifest_path(path))
    }

    pub fn load(path: &Path) -> Result<(Self, Settings)> {
        let mpath = manifest_path(path);
        let manifest = Settings::load(&mpath)?;
        let mut m = manifest.clone();
        let kind = m.take_str("model.kind").unwrap_or_default();
        if kind != "classifier" {
            return Err(CoreError::Config(format!("{} describes a {kind:?} model, not a classifier", mpath.display())));
        }
        let mut seed = 0u64;
        m.take("model.seed", &mut seed)?;
        let mut cfg = ClassifierConfig::default();
        cfg.read_settings(&mut m, "classifier")?;
        let mut c = Self::new(&cfg, seed)?;
        checkpoint::load_store(path, &mut c.store).map_err(|e| with_path(e.into(), path))?;
        Ok((c, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn threshold_tie_is_noise() {
        assert_eq!(ScenarioPrediction::from_prob(0.5).label, Scenario::Noise);
        assert_eq!(ScenarioPrediction::from_prob(0.4999999).label, Scenario::Speech);
        assert_eq!(ScenarioPrediction::from_prob(0.9).label, Scenario::Noise);
        assert_eq!(ScenarioPrediction::from_prob(0.1).label, Scenario::Speech);
    }

    #[test]
    fn dilation_plan() {
        assert_eq!(dilations(8), vec![1, 2, 4, 8]);
        assert_eq!(dilations(5), vec![1, 2, 4]);
        assert_eq!(dilations(1), vec![1]);
    }

    #[test]
    fn untrained_output_is_a_probability() {
        let c = Classifier::new(&ClassifierConfig::default(), 3).unwrap();
        let spec = SceneSpec::default();
        for i in 0..2 {
            let s = generate_scene(&spec, i).unwrap();
            let p = c.classify(&s.mixture, &s.face_track).unwrap();
            assert!(p.prob > 0.0 && p.prob < 1.0 && p.prob.is_finite());
        }
    }

    #[test]
    fn visual_path_influences_prediction() {
        let c = Classifier::new(&ClassifierConfig::default(), 4).unwrap();
        let s = generate_scene(&SceneSpec::default(), 0).unwrap();
        let base = c.classify(&s.mixture, &s.face_track).unwrap().prob;
        let mut bumped = s.face_track.clone();
        let px = 16 * 16;
        for t in 0..bumped.n_frames {
            bumped.frames[t * px + 12 * 16 + 8] += 0.01;
        }
        let moved = c.classify(&s.mixture, &bumped).unwrap().prob;
        assert!((moved - base).abs() > 0.0, "finite-difference response is zero");
        let zeroed = FaceTrack::constant(s.face_track.n_frames, 16, 16, 0.0).unwrap();
        assert_ne!(c.classify(&s.mixture, &zeroed).unwrap().prob, base);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let c = Classifier::new(&ClassifierConfig::default(), 5).unwrap();
        let s = generate_scene(&SceneSpec::default(), 0).unwrap();
        let short = FaceTrack::constant(10, 16, 16, 0.5).unwrap();
        assert!(matches!(c.classify(&s.mixture, &short), Err(CoreError::InvalidInput(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.ckpt");
        let c = Classifier::new(&ClassifierConfig::default(), 6).unwrap();
        c.save(&path, &Settings::new()).unwrap();
        let (back, _) = Classifier::load(&path).unwrap();
        let s = generate_scene(&SceneSpec::default(), 1).unwrap();
        assert_eq!(
            back.classify(&s.mixture, &s.face_track).unwrap(),
            c.classify(&s.mixture, &s.face_track).unwrap()
        );
        assert!(crate::gridnet::Extractor::load(&path).is_err());
    }
}
