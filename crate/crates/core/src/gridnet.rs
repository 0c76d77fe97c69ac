//! TF-domain GridNet extractor with optional per-block visual fusion.
//!
//! Embeddings are channels-last `[T, F, D]`. Each block runs an intra-frame
//! BLSTM across frequency, a sub-band BLSTM across time and a full-band
//! multi-head self-attention across time, each wrapped in a residual.

use std::path::Path;

use savgrid_nn::checkpoint;
use savgrid_nn::layers::{attention, Blstm, Conv2d, ConvTranspose1d, ConvTranspose2d, LayerNorm, Linear};
use savgrid_nn::{Graph, ParamStore, Tensor, Var};

use crate::config::{key, manifest_path, Configurable, Settings};
use crate::error::{invalid, CoreError, Result};
use crate::signal::{istft_var, stft_samples, AudioClip, Spectrogram, StftConfig, Window, SAMPLE_RATE};
use crate::visual::{check_alignment, FaceTrack, Fusion, VisualConfig, VisualFrontend};

#[derive(Clone, Debug, PartialEq)]
pub struct GridNetConfig {
    /// Embedding channels `D`.
    pub d: usize,
    /// Block count `B`.
    pub blocks: usize,
    /// Deconvolution kernel `I`.
    pub kernel: usize,
    /// Deconvolution stride `J`.
    pub stride: usize,
    /// BLSTM units per direction `H`.
    pub hidden: usize,
    /// Attention heads `L`.
    pub heads: usize,
    /// Query/key channels per head and frequency bin `E`.
    pub key_dim: usize,
    pub stft: StftConfig,
    /// `None` gives the audio-only backbone.
    pub visual: Option<VisualConfig>,
}

impl Default for GridNetConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl GridNetConfig {
    pub fn toy() -> Self {
        Self {
            d: 8,
            blocks: 2,
            kernel: 4,
            stride: 1,
            hidden: 16,
            heads: 4,
            key_dim: 4,
            stft: StftConfig::default(),
            visual: Some(VisualConfig::default()),
        }
    }

    pub fn full() -> Self {
        Self {
            d: 48,
            blocks: 6,
            hidden: 192,
            visual: Some(VisualConfig {
                repeats: 5,
                ..VisualConfig::default()
            }),
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.d, self.blocks, self.kernel, self.stride, self.hidden, self.heads, self.key_dim];
        if sizes.contains(&0) {
            return Err(CoreError::Config(format!("extractor sizes must be positive: {self:?}")));
        }
        if self.stride > self.kernel {
            return Err(CoreError::Config(format!(
                "deconvolution stride {} exceeds kernel {}",
                self.stride, self.kernel
            )));
        }
        if self.d % self.heads != 0 {
            return Err(CoreError::Config(format!("D = {} is not divisible by {} heads", self.d, self.heads)));
        }
        self.stft.validate().map_err(|e| CoreError::Config(e.to_string()))?;
        if let Some(v) = &self.visual {
            v.validate()?;
        }
        Ok(())
    }
}

impl Configurable for StftConfig {
    fn read_settings(&mut self, s: &mut Settings, prefix: &str) -> Result<()> {
        s.take(&key(prefix, "window_size"), &mut self.window_size)?;
        s.take(&key(prefix, "hop_size"), &mut self.hop_size)?;
        s.take(&key(prefix, "fft_size"), &mut self.fft_size)?;
        s.take_with(&key(prefix, "window"), &mut self.window, Window::from_name)
    }

    fn write_settings(&self, s: &mut Settings, prefix: &str) {
        s.set(key(prefix, "window_size"), self.window_size);
        s.set(key(prefix, "hop_size"), self.hop_size);
        s.set(key(prefix, "fft_size"), self.fft_size);
        s.set(key(prefix, "window"), self.window.name());
    }
}

impl Configurable for VisualConfig {
    fn read_settings(&mut self, s: &mut Settings, prefix: &str) -> Result<()> {
        s.take(&key(prefix, "height"), &mut self.height)?;
        s.take(&key(prefix, "width"), &mut self.width)?;
        s.take(&key(prefix, "conv3d_channels"), &mut self.conv3d_channels)?;
        for i in 0..4 {
            s.take(&key(prefix, &format!("stub_channels.{i}")), &mut self.stub_channels[i])?;
        }
        s.take(&key(prefix, "repeats"), &mut self.repeats)?;
        s.take(&key(prefix, "frozen_seed"), &mut self.frozen_seed)
    }

    fn write_settings(&self, s: &mut Settings, prefix: &str) {
        s.set(key(prefix, "height"), self.height);
        s.set(key(prefix, "width"), self.width);
        s.set(key(prefix, "conv3d_channels"), self.conv3d_channels);
        for (i, c) in self.stub_channels.iter().enumerate() {
            s.set(key(prefix, &format!("stub_channels.{i}")), c);
        }
        s.set(key(prefix, "repeats"), self.repeats);
        s.set(key(prefix, "frozen_seed"), self.frozen_seed);
    }
}

impl Configurable for GridNetConfig {
    fn read_settings(&mut self, s: &mut Settings, prefix: &str) -> Result<()> {
        s.take(&key(prefix, "d"), &mut self.d)?;
        s.take(&key(prefix, "blocks"), &mut self.blocks)?;
        s.take(&key(prefix, "kernel"), &mut self.kernel)?;
        s.take(&key(prefix, "stride"), &mut self.stride)?;
        s.take(&key(prefix, "hidden"), &mut self.hidden)?;
        s.take(&key(prefix, "heads"), &mut self.heads)?;
        s.take(&key(prefix, "key_dim"), &mut self.key_dim)?;
        self.stft.read_settings(s, &key(prefix, "stft"))?;
        let mut audio_visual = self.visual.is_some();
        s.take(&key(prefix, "audio_visual"), &mut audio_visual)?;
        let mut visual = self.visual.clone().unwrap_or_default();
        visual.read_settings(s, &key(prefix, "visual"))?;
        self.visual = audio_visual.then_some(visual);
        Ok(())
    }

    fn write_settings(&self, s: &mut Settings, prefix: &str) {
        s.set(key(prefix, "d"), self.d);
        s.set(key(prefix, "blocks"), self.blocks);
        s.set(key(prefix, "kernel"), self.kernel);
        s.set(key(prefix, "stride"), self.stride);
        s.set(key(prefix, "hidden"), self.hidden);
        s.set(key(prefix, "heads"), self.heads);
        s.set(key(prefix, "key_dim"), self.key_dim);
        self.stft.write_settings(s, &key(prefix, "stft"));
        s.set(key(prefix, "audio_visual"), self.visual.is_some());
        if let Some(v) = &self.visual {
            v.write_settings(s, &key(prefix, "visual"));
        }
    }
}

/// LN, BLSTM along axis 1, transposed conv back to `D`, tail crop, residual.
pub struct SequenceModule {
    pub norm: LayerNorm,
    pub rnn: Blstm,
    pub deconv: ConvTranspose1d,
    stride: usize,
}

impl SequenceModule {
    fn new(store: &mut ParamStore, name: &str, cfg: &GridNetConfig) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d)?,
            rnn: Blstm::new(store, &format!("{name}.rnn"), cfg.d, cfg.hidden)?,
            deconv: ConvTranspose1d::new(store, &format!("{name}.deconv"), 2 * cfg.hidden, cfg.d, cfg.kernel, cfg.stride, 0)?,
            stride: cfg.stride,
        })
    }

    /// `[N, L, D]` to `[N, L, D]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let len = g.shape(x)[1];
        let mut y = self.norm.forward(g, x)?;
        if self.stride > 1 {
            y = g.take_every(y, 1, self.stride)?;
        }
        let y = self.rnn.forward(g, y)?;
        let y = self.deconv.forward(g, y)?;
        let y = g.narrow(y, 1, 0, len)?;
        Ok(g.add(x, y)?)
    }
}

/// Full-band self-attention over time with `F·E` query channels per head.
pub struct FullBandAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    heads: usize,
    key_dim: usize,
}

impl FullBandAttention {
    fn new(store: &mut ParamStore, name: &str, cfg: &GridNetConfig) -> Result<Self> {
        let (d, qk) = (cfg.d, cfg.heads * cfg.key_dim);
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            q: Linear::new(store, &format!("{name}.q"), d, qk, true)?,
            k: Linear::new(store, &format!("{name}.k"), d, qk, true)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, true)?,
            heads: cfg.heads,
            key_dim: cfg.key_dim,
        })
    }

    fn split_heads(&self, g: &mut Graph<'_>, x: Var, per_head: usize) -> Result<Var> {
        let (t, f) = (g.shape(x)[0], g.shape(x)[1]);
        let x = g.reshape(x, &[t, f, self.heads, per_head])?;
        let x = g.permute(x, &[2, 0, 1, 3])?;
        Ok(g.reshape(x, &[self.heads, t, f * per_head])?)
    }

    /// `[T, F, D]` to `[T, F, D]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (t, f, d) = (s[0], s[1], s[2]);
        let dv = d / self.heads;
        let y = self.norm.forward(g, x)?;
        let q = self.q.forward(g, y)?;
        let k = self.k.forward(g, y)?;
        let v = self.v.forward(g, y)?;
        let q = self.split_heads(g, q, self.key_dim)?;
        let k = self.split_heads(g, k, self.key_dim)?;
        let v = self.split_heads(g, v, dv)?;
        let a = attention(g, q, k, v)?;
        let a = g.reshape(a, &[self.heads, t, f, dv])?;
        let a = g.permute(a, &[1, 2, 0, 3])?;
        let a = g.reshape(a, &[t, f, d])?;
        let o = self.out.forward(g, a)?;
        Ok(g.add(x, o)?)
    }
}

pub struct GridNetBlock {
    pub intra: SequenceModule,
    pub inter: SequenceModule,
    pub attn: FullBandAttention,
}

impl GridNetBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &GridNetConfig) -> Result<Self> {
        Ok(Self {
            intra: SequenceModule::new(store, &format!("{name}.intra"), cfg)?,
            inter: SequenceModule::new(store, &format!("{name}.inter"), cfg)?,
            attn: FullBandAttention::new(store, &format!("{name}.attn"), cfg)?,
        })
    }

    /// Sub-band temporal module alone: sequences over `T`, one per bin.
    pub fn sub_band(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = g.transpose(x, 0, 1)?;
        let y = self.inter.forward(g, y)?;
        Ok(g.transpose(y, 0, 1)?)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.intra.forward(g, x)?;
        let y = self.sub_band(g, y)?;
        self.attn.forward(g, y)
    }
}

pub struct GridNet {
    cfg: GridNetConfig,
    pub encoder: Conv2d,
    pub encoder_norm: LayerNorm,
    pub blocks: Vec<GridNetBlock>,
    pub fusions: Vec<Fusion>,
    pub visual: Option<VisualFrontend>,
    pub decoder: ConvTranspose2d,
}

/// Lower bound on the RMS used to normalize the input mixture.
const RMS_FLOOR: f64 = 1e-8;

impl GridNet {
    pub fn new(store: &mut ParamStore, cfg: &GridNetConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let encoder = Conv2d::new(store, "encoder.conv", 2, d, [3, 3], [1, 1], [1, 1], false)?;
        let encoder_norm = LayerNorm::new(store, "encoder.norm", d)?;
        let blocks = (0..cfg.blocks)
            .map(|b| GridNetBlock::new(store, &format!("blocks.{b}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let (visual, fusions) = match &cfg.visual {
            Some(vc) => {
                let fe = VisualFrontend::new(store, "visual", vc)?;
                let fusions = (0..cfg.blocks)
                    .map(|b| Fusion::new(store, &format!("fusion.{b}"), d, vc.dv()))
                    .collect::<Result<Vec<_>>>()?;
                (Some(fe), fusions)
            }
            None => (None, Vec::new()),
        };
        let decoder = ConvTranspose2d::new(store, "decoder", d, 2, [3, 3], [1, 1], [1, 1])?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            encoder_norm,
            blocks,
            fusions,
            visual,
            decoder,
        })
    }

    pub fn config(&self) -> &GridNetConfig {
        &self.cfg
    }

    /// Encoder convolution output `[T, F, D]` ahead of layer normalization.
    pub fn encode_pre_norm(&self, g: &mut Graph<'_>, spec: &Spectrogram) -> Result<Var> {
        if spec.config != self.cfg.stft {
            return invalid(format!("spectrogram uses {:?}, model expects {:?}", spec.config, self.cfg.stft));
        }
        let (t, f) = (spec.n_frames, spec.n_bins());
        let x = g.constant(Tensor::new(&[1, t, f, 2], spec.to_channels())?);
        let y = self.encoder.forward(g, x)?;
        Ok(g.reshape(y, &[t, f, self.cfg.d])?)
    }

    pub fn encode(&self, g: &mut Graph<'_>, spec: &Spectrogram) -> Result<Var> {
        let y = self.encode_pre_norm(g, spec)?;
        Ok(self.encoder_norm.forward(g, y)?)
    }

    /// `[T, F, D]` embedding to a waveform variable of `original_length` samples.
    pub fn decode(&self, g: &mut Graph<'_>, emb: Var, original_length: usize) -> Result<Var> {
        let s = g.shape(emb).to_vec();
        if s.len() != 3 || s[1] != self.cfg.stft.bins() || s[2] != self.cfg.d {
            return invalid(format!("decoder expects [T, {}, {}], got {s:?}", self.cfg.stft.bins(), self.cfg.d));
        }
        let x = g.reshape(emb, &[1, s[0], s[1], s[2]])?;
        let y = self.decoder.forward(g, x)?;
        let y = g.reshape(y, &[s[0], s[1], 2])?;
        istft_var(g, y, &self.cfg.stft, original_length)
    }

    /// Visual embedding `V`, computed once per forward pass and shared by every block.
    pub fn visual_embedding(&self, g: &mut Graph<'_>, face: Option<&FaceTrack>, samples: usize) -> Result<Option<Var>> {
        match (&self.visual, face) {
            (None, _) => Ok(None),
            (Some(_), None) => invalid("audio-visual extractor needs a face track"),
            (Some(fe), Some(track)) => {
                check_alignment(track, samples, SAMPLE_RATE)?;
                Ok(Some(fe.forward(g, track)?))
            }
        }
    }

    /// Estimated target waveform `[N]`, at the scale of the input mixture.
    pub fn forward(&self, g: &mut Graph<'_>, mixture: &[f64], face: Option<&FaceTrack>) -> Result<Var> {
        if mixture.is_empty() {
            return invalid("empty mixture");
        }
        let n = mixture.len();
        let v = self.visual_embedding(g, face, n)?;
        let rms = (mixture.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt().max(RMS_FLOOR);
        let normed: Vec<f64> = mixture.iter().map(|x| x / rms).collect();
        let spec = stft_samples(&normed, &self.cfg.stft)?;
        let mut e = self.encode(g, &spec)?;
        for (b, block) in self.blocks.iter().enumerate() {
            if let Some(v) = v {
                e = self.fusions[b].forward(g, e, v)?;
            }
            e = block.forward(g, e)?;
        }
        let y = self.decode(g, e, n)?;
        Ok(g.scale(y, rms)?)
    }
}

/// A GridNet with its parameters.
pub struct Extractor {
    pub store: ParamStore,
    pub net: GridNet,
}

impl Extractor {
    pub fn new(cfg: &GridNetConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let net = GridNet::new(&mut store, cfg)?;
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &GridNetConfig {
        self.net.config()
    }

    pub fn extract_samples(&self, mixture: &[f64], face: Option<&FaceTrack>) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.store);
        let y = self.net.forward(&mut g, mixture, face)?;
        Ok(g.value(y).data().to_vec())
    }

    pub fn extract(&self, mixture: &AudioClip, face: Option<&FaceTrack>) -> Result<AudioClip> {
        AudioClip::new(self.extract_samples(&mixture.samples, face)?, mixture.sample_rate)
    }

    pub fn manifest(&self) -> Settings {
        let mut s = Settings::new();
        s.set("model.kind", "extractor");
        s.set("model.seed", self.store.seed());
        self.config().write_settings(&mut s, "gridnet");
        s
    }

    /// Writes the checkpoint and its manifest; `extra` keys are added to the manifest.
    pub fn save(&self, path: &Path, extra: &Settings) -> Result<()> {
        checkpoint::save_store(path, &self.store).map_err(|e| with_path(e.into(), path))?;
        let mut m = self.manifest();
        m.merge(extra.clone());
        m.save(&manifest_path(path))
    }

    /// Loads a checkpoint written by [`Extractor::save`], returning the manifest alongside.
    pub fn load(path: &Path) -> Result<(Self, Settings)> {
        let mpath = manifest_path(path);
        let manifest = Settings::load(&mpath)?;
        let mut m = manifest.clone();
        let kind = m.take_str("model.kind").unwrap_or_default();
        if kind != "extractor" {
            return Err(CoreError::Config(format!("{} describes a {kind:?} model, not an extractor", mpath.display())));
        }
        let mut seed = 0u64;
        m.take("model.seed", &mut seed)?;
        let mut cfg = GridNetConfig::toy();
        cfg.read_settings(&mut m, "gridnet")?;
        let mut ex = Self::new(&cfg, seed)?;
        checkpoint::load_store(path, &mut ex.store).map_err(|e| with_path(e.into(), path))?;
        Ok((ex, manifest))
    }
}

pub(crate) fn with_path(e: CoreError, path: &Path) -> CoreError {
    match e {
        CoreError::Format { kind, detail } => CoreError::Format {
            kind,
            detail: format!("{}: {detail}", path.display()),
        },
        CoreError::Nn(savgrid_nn::NnError::Io(source)) => CoreError::io(path, source),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> GridNetConfig {
        GridNetConfig {
            d: 4,
            blocks: 1,
            hidden: 3,
            heads: 2,
            key_dim: 2,
            stft: StftConfig {
                window_size: 32,
                hop_size: 16,
                fft_size: 32,
                window: Window::SqrtHann,
            },
            visual: Some(VisualConfig {
                stub_channels: [4, 4, 4, 4],
                conv3d_channels: 2,
                repeats: 1,
                ..VisualConfig::default()
            }),
            ..GridNetConfig::toy()
        }
    }

    fn clip(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(2654435761) | 1;
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 2001) as f64 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(GridNetConfig::toy().validate().is_ok());
        assert!(GridNetConfig::full().validate().is_ok());
        let bad = GridNetConfig {
            stride: 5,
            ..GridNetConfig::toy()
        };
        assert!(matches!(bad.validate(), Err(CoreError::Config(_))));
        let bad = GridNetConfig {
            heads: 3,
            ..GridNetConfig::toy()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn settings_round_trip() {
        for cfg in [GridNetConfig::toy(), GridNetConfig::full(), GridNetConfig { visual: None, ..tiny_cfg() }] {
            let mut s = Settings::new();
            cfg.write_settings(&mut s, "x");
            let mut back = GridNetConfig {
                d: 99,
                visual: None,
                ..GridNetConfig::toy()
            };
            let mut parsed = Settings::parse(&s.to_ini()).unwrap();
            back.read_settings(&mut parsed, "x").unwrap();
            parsed.finish().unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn toy_shapes() {
        let ex = Extractor::new(&GridNetConfig::toy(), 1).unwrap();
        let mut g = Graph::inference(&ex.store);
        let spec = stft_samples(&clip(1408, 1), &ex.config().stft).unwrap();
        assert_eq!(spec.n_frames, 10);
        let e = ex.net.encode(&mut g, &spec).unwrap();
        assert_eq!(g.shape(e), &[10, 129, 8]);
        let y = ex.net.blocks[0].forward(&mut g, e).unwrap();
        assert_eq!(g.shape(y), &[10, 129, 8]);
    }

    #[test]
    fn output_length_matches_input() {
        let cfg = tiny_cfg();
        let ex = Extractor::new(&cfg, 2).unwrap();
        for n in [640, 1000, 1937] {
            let tv = ((n as f64 / 16000.0) * 25.0).round().max(1.0) as usize;
            let face = FaceTrack::constant(tv, 16, 16, 0.4).unwrap();
            let y = ex.extract_samples(&clip(n, n as u64), Some(&face)).unwrap();
            assert_eq!(y.len(), n);
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn duration_mismatch_is_rejected() {
        let ex = Extractor::new(&tiny_cfg(), 3).unwrap();
        let face = FaceTrack::constant(10, 16, 16, 0.4).unwrap();
        let err = ex.extract_samples(&clip(16000, 1), Some(&face)).unwrap_err();
        assert!(matches!(err, CoreError::InvalidInput(_)), "{err}");
        assert!(ex.extract_samples(&clip(16000, 1), None).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ex = Extractor::new(&tiny_cfg(), 4).unwrap();
        let mut extra = Settings::new();
        extra.set("meta.role", "universal");
        ex.save(&path, &extra).unwrap();
        let (back, manifest) = Extractor::load(&path).unwrap();
        assert_eq!(back.config(), ex.config());
        assert_eq!(manifest.get("meta.role"), Some("universal"));
        let x = clip(800, 5);
        let face = FaceTrack::constant(1, 16, 16, 0.2).unwrap();
        assert_eq!(
            ex.extract_samples(&x, Some(&face)).unwrap(),
            back.extract_samples(&x, Some(&face)).unwrap()
        );
    }
}
