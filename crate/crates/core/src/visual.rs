//! Face tracks and the visual front-end: frozen Conv3D and per-frame conv
//! stub, a trainable V-TCN, and the per-block audio-visual fusion layer.

use std::path::Path;

use savgrid_nn::layers::{Conv2d, Conv3d, Conv1d, LayerNorm, Linear, Prelu};
use savgrid_nn::{Conv1dSpec, Graph, ParamStore, Tensor, Var};

use crate::error::{invalid, CoreError, Result};
use crate::signal::interp_matrix;

pub const VIDEO_FPS: u32 = 25;
pub const FACE_MAGIC: &[u8; 4] = b"FTRK";
/// Upper bound on `Tv·H·W` accepted from a file (one hour of 64×64 video).
const MAX_FACE_VALUES: u64 = 90_000 * 64 * 64;

/// Grayscale `Tv × H × W` face crops with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceTrack {
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
}

impl FaceTrack {
    pub fn new(frames: Vec<f32>, n_frames: usize, height: usize, width: usize, fps: u32) -> Result<Self> {
        if n_frames == 0 || height == 0 || width == 0 {
            return invalid(format!("face track dimensions {n_frames}×{height}×{width} must be positive"));
        }
        if fps == 0 {
            return invalid("face track fps must be positive");
        }
        if frames.len() != n_frames * height * width {
            return invalid(format!(
                "face track holds {} values, expected {n_frames}×{height}×{width}",
                frames.len()
            ));
        }
        if let Some(v) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self {
            frames,
            n_frames,
            height,
            width,
            fps,
        })
    }

    pub fn constant(n_frames: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(vec![value; n_frames * height * width], n_frames, height, width, VIDEO_FPS)
    }

    pub fn duration(&self) -> f64 {
        self.n_frames as f64 / self.fps as f64
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn frame_mean(&self, t: usize) -> f64 {
        let f = self.frame(t);
        f.iter().map(|&v| v as f64).sum::<f64>() / f.len() as f64
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.frames.len());
        out.extend_from_slice(FACE_MAGIC);
        for v in [self.n_frames as u32, self.height as u32, self.width as u32, self.fps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.frames {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| CoreError::Format { kind: "face track", detail };
        if bytes.len() < 20 {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != FACE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (tv, h, w, fps) = (word(0), word(1), word(2), word(3));
        let count = u64::from(tv) * u64::from(h) * u64::from(w);
        if count == 0 || count > MAX_FACE_VALUES {
            return Err(bad(format!("implausible dimensions {tv}×{h}×{w}")));
        }
        let payload = &bytes[20..];
        if payload.len() as u64 != 4 * count {
            return Err(bad(format!("payload is {} bytes, header implies {}", payload.len(), 4 * count)));
        }
        let frames = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(frames, tv as usize, h as usize, w as usize, fps).map_err(|e| bad(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            CoreError::Format { kind, detail } => CoreError::Format {
                kind,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| CoreError::io(path, e))
    }
}

/// Checks that a face track covers `samples` audio samples to within one video frame.
pub fn check_alignment(track: &FaceTrack, samples: usize, sample_rate: u32) -> Result<()> {
    let audio = samples as f64 / sample_rate as f64;
    let frame = 1.0 / track.fps as f64;
    if (track.duration() - audio).abs() > frame + 1e-9 {
        return invalid(format!(
            "face track lasts {:.3} s but audio lasts {audio:.3} s",
            track.duration()
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualConfig {
    pub height: usize,
    pub width: usize,
    pub conv3d_channels: usize,
    /// Output channels of the four stride-2 stub stages; the last is `Dv`.
    pub stub_channels: [usize; 4],
    /// V-TCN repetitions `R`; repetition `r` dilates by `2^r`.
    pub repeats: usize,
    /// Seed of the frozen layers, shared by every model that uses this config.
    pub frozen_seed: u64,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            conv3d_channels: 4,
            stub_channels: [8, 16, 16, 16],
            repeats: 2,
            frozen_seed: 0x1a9_5eed,
        }
    }
}

impl VisualConfig {
    pub fn dv(&self) -> usize {
        self.stub_channels[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.conv3d_channels == 0 || self.stub_channels.contains(&0) {
            return Err(CoreError::Config(format!("visual sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

struct VtcnBlock {
    norm: LayerNorm,
    depthwise: Conv1d,
    pointwise: Conv1d,
    act: Prelu,
}

/// Visual encoder producing one `Dv`-dimensional row per video frame.
pub struct VisualFrontend {
    cfg: VisualConfig,
    conv3d: Conv3d,
    stub: Vec<Conv2d>,
    vtcn: Vec<VtcnBlock>,
}

fn frozen_layers(store: &mut ParamStore, prefix: &str, cfg: &VisualConfig) -> Result<(Conv3d, Vec<Conv2d>)> {
    let conv3d = Conv3d::new(
        store,
        &format!("{prefix}.conv3d"),
        1,
        cfg.conv3d_channels,
        [3, 3, 3],
        [1, 1, 1],
        [1, 1, 1],
        true,
    )?;
    let mut stub = Vec::with_capacity(4);
    let mut c_in = cfg.conv3d_channels;
    for (i, &c) in cfg.stub_channels.iter().enumerate() {
        stub.push(Conv2d::new(store, &format!("{prefix}.stub.{i}"), c_in, c, [3, 3], [2, 2], [1, 1], true)?);
        c_in = c;
    }
    // He-uniform scale keeps activations from shrinking through the relu stack.
    let mut ids = vec![conv3d.w];
    ids.extend(stub.iter().map(|s| s.w));
    for id in ids {
        for v in store.get_mut(id).tensor.data_mut() {
            *v *= 6f64.sqrt();
        }
    }
    Ok((conv3d, stub))
}

impl VisualFrontend {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &VisualConfig) -> Result<Self> {
        cfg.validate()?;
        let (conv3d, stub) = frozen_layers(store, prefix, cfg)?;
        // Frozen weights come from their own seed so every model sees the same stub.
        let mut shared = ParamStore::new(cfg.frozen_seed);
        frozen_layers(&mut shared, prefix, cfg)?;
        store.load_named(&shared.named_tensors(), false)?;

        let dv = cfg.dv();
        let mut vtcn = Vec::with_capacity(cfg.repeats);
        for r in 0..cfg.repeats {
            let name = format!("{prefix}.vtcn.{r}");
            let dilation = 1 << r;
            let spec = Conv1dSpec {
                stride: 1,
                padding: dilation,
                dilation,
                groups: dv,
            };
            vtcn.push(VtcnBlock {
                norm: LayerNorm::new(store, &format!("{name}.norm"), dv)?,
                depthwise: Conv1d::new(store, &format!("{name}.depthwise"), dv, dv, 3, spec, true)?,
                pointwise: Conv1d::new(store, &format!("{name}.pointwise"), dv, dv, 1, Conv1dSpec::default(), true)?,
                act: Prelu::new(store, &format!("{name}.act"), dv)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            conv3d,
            stub,
            vtcn,
        })
    }

    pub fn config(&self) -> &VisualConfig {
        &self.cfg
    }

    /// Frozen features `[Tv, Dv]` ahead of the V-TCN.
    pub fn frozen_features(&self, g: &mut Graph<'_>, track: &FaceTrack) -> Result<Var> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        if track.height != h || track.width != w {
            return invalid(format!(
                "face track is {}×{} px, model expects {h}×{w}",
                track.height, track.width
            ));
        }
        let tv = track.n_frames;
        let data = track.frames.iter().map(|&v| v as f64).collect();
        let x = g.constant(Tensor::new(&[1, tv, h, w, 1], data)?);
        let y = self.conv3d.forward(g, x)?;
        let mut y = g.relu(y)?;
        y = g.reshape(y, &[tv, h, w, self.cfg.conv3d_channels])?;
        for stage in &self.stub {
            let z = stage.forward(g, y)?;
            y = g.relu(z)?;
        }
        let s = g.shape(y).to_vec();
        let flat = g.reshape(y, &[tv, s[1] * s[2], s[3]])?;
        let pooled = g.adaptive_avg_pool1d(flat, 1)?;
        Ok(g.reshape(pooled, &[tv, self.cfg.dv()])?)
    }

    /// Visual embedding `V` of shape `[Tv, Dv]`.
    pub fn forward(&self, g: &mut Graph<'_>, track: &FaceTrack) -> Result<Var> {
        let tv = track.n_frames;
        let dv = self.cfg.dv();
        let f = self.frozen_features(g, track)?;
        let mut x = g.reshape(f, &[1, tv, dv])?;
        for b in &self.vtcn {
            let y = b.norm.forward(g, x)?;
            let y = b.depthwise.forward(g, y)?;
            let y = b.pointwise.forward(g, y)?;
            let y = b.act.forward(g, y)?;
            x = g.add(x, y)?;
        }
        Ok(g.reshape(x, &[tv, dv])?)
    }
}

/// Concatenates the audio embedding with the time-interpolated visual
/// embedding at every TF bin and projects back to `D` channels.
pub struct Fusion {
    pub proj: Linear,
    pub d: usize,
    pub dv: usize,
}

impl Fusion {
    /// Starts as an audio passthrough: identity on the audio half, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, dv: usize) -> Result<Self> {
        let proj = Linear::new(store, name, d + dv, d, true)?;
        let w = store.get_mut(proj.w).tensor.data_mut();
        for i in 0..d {
            for j in 0..d {
                w[i * d + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        if let Some(b) = proj.b {
            store.get_mut(b).tensor.data_mut().fill(0.0);
        }
        Ok(Self { proj, d, dv })
    }

    /// `emb` is `[T, F, D]`, `v` is `[Tv, Dv]`.
    pub fn forward(&self, g: &mut Graph<'_>, emb: Var, v: Var) -> Result<Var> {
        let (t, f) = (g.shape(emb)[0], g.shape(emb)[1]);
        let tv = g.shape(v)[0];
        let m = g.constant(Tensor::new(&[t, tv], interp_matrix(tv, t)?)?);
        let vi = g.matmul(m, v)?;
        let vb = g.expand(vi, 1, f)?;
        let cat = g.concat(&[emb, vb], 2)?;
        Ok(self.proj.forward(g, cat)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_track(tv: usize) -> FaceTrack {
        let n = tv * 16 * 16;
        let frames = (0..n).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        FaceTrack::new(frames, tv, 16, 16, VIDEO_FPS).unwrap()
    }

    #[test]
    fn file_round_trip_and_rejections() {
        let t = ramp_track(3);
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"FTRK");
        assert_eq!(bytes.len(), 20 + 4 * 3 * 256);
        assert_eq!(FaceTrack::decode(&bytes).unwrap(), t);
        assert!(FaceTrack::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(FaceTrack::decode(&b).is_err());
        let mut b = bytes.clone();
        b[20..24].copy_from_slice(&1.5f32.to_le_bytes());
        assert!(FaceTrack::decode(&b).is_err());
        let mut b = bytes;
        b[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(FaceTrack::decode(&b).is_err());
        assert!(FaceTrack::new(vec![], 0, 16, 16, 25).is_err());
    }

    #[test]
    fn embedding_has_one_row_per_frame() {
        let mut store = ParamStore::new(3);
        let fe = VisualFrontend::new(&mut store, "visual", &VisualConfig::default()).unwrap();
        let mut g = Graph::inference(&store);
        let v = fe.forward(&mut g, &ramp_track(25)).unwrap();
        assert_eq!(g.shape(v), &[25, 16]);
        assert!(g.value(v).is_finite());
    }

    #[test]
    fn constant_track_gives_equal_rows() {
        let mut store = ParamStore::new(4);
        let fe = VisualFrontend::new(&mut store, "visual", &VisualConfig::default()).unwrap();
        let track = FaceTrack::constant(9, 16, 16, 0.6).unwrap();
        let mut g = Graph::inference(&store);
        let f = fe.frozen_features(&mut g, &track).unwrap();
        // Conv3D zero padding in time makes edge frames differ before the V-TCN;
        // interior rows of the frozen features are identical.
        let ff = g.value(f).data().to_vec();
        for t in 2..7 {
            assert_eq!(ff[t * 16..(t + 1) * 16], ff[16..32]);
        }
        assert!(ff.iter().any(|&x| x != 0.0), "stub output is dead");
    }

    #[test]
    fn frozen_weights_ignore_model_seed() {
        let cfg = VisualConfig::default();
        let mut a = ParamStore::new(1);
        let mut b = ParamStore::new(2);
        VisualFrontend::new(&mut a, "visual", &cfg).unwrap();
        VisualFrontend::new(&mut b, "visual", &cfg).unwrap();
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.name, pb.name);
            if pa.frozen {
                assert_eq!(pa.tensor, pb.tensor, "{}", pa.name);
            } else if pa.name.ends_with(".w") {
                assert_ne!(pa.tensor, pb.tensor, "{}", pa.name);
            }
        }
        assert!(a.iter().any(|(_, p)| p.frozen) && a.trainable_count() > 0);
    }

    #[test]
    fn fusion_passthrough_and_visual_sensitivity() {
        let (t, f, d, dv, tv) = (6, 5, 3, 2, 4);
        let mut store = ParamStore::new(5);
        let fu = Fusion::new(&mut store, "fuse", d, dv).unwrap();
        let emb = Tensor::new(&[t, f, d], (0..t * f * d).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        {
            let w = store.get_mut(fu.proj.w).tensor.data_mut();
            w.fill(0.0);
            for i in 0..d {
                w[i * d + i] = 1.0;
            }
        }
        let mut g = Graph::inference(&store);
        let e = g.constant(emb.clone());
        let v = g.constant(Tensor::zeros(&[tv, dv]));
        let y = fu.forward(&mut g, e, v).unwrap();
        assert_eq!(g.value(y), &emb);

        let mut store = ParamStore::new(6);
        let fu = Fusion::new(&mut store, "fuse", d, dv).unwrap();
        let mut g = Graph::inference(&store);
        let e = g.constant(emb);
        let v1 = g.constant(Tensor::new(&[tv, dv], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap());
        let v2 = g.constant(Tensor::new(&[tv, dv], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.9]).unwrap());
        let y1 = fu.forward(&mut g, e, v1).unwrap();
        let y2 = fu.forward(&mut g, e, v2).unwrap();
        assert_eq!(g.shape(y1), &[t, f, d]);
        assert_ne!(g.value(y1), g.value(y2));
        // Same visual row broadcast across frequency: differences are equal per bin.
        let (a, b) = (g.value(y1).data(), g.value(y2).data());
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        for ti in 0..t {
            for fi in 1..f {
                for c in 0..d {
                    let i0 = (ti * f) * d + c;
                    let i = (ti * f + fi) * d + c;
                    assert!((diff[i] - diff[i0]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn alignment_tolerates_one_frame() {
        let track = FaceTrack::constant(25, 16, 16, 0.5).unwrap();
        assert!(check_alignment(&track, 16000, 16000).is_ok());
        assert!(check_alignment(&track, 16000 + 640, 16000).is_ok());
        assert!(check_alignment(&track, 16000 + 1300, 16000).is_err());
    }
}
