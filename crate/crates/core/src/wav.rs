//! 16-bit PCM mono WAV at the file boundary.

use std::fs::File;
use std::io::{BufReader, Cursor, Read, Seek};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{CoreError, Result};
use crate::signal::{AudioClip, SAMPLE_RATE};

const FULL_SCALE: f64 = 32767.0;

fn bad(detail: impl Into<String>) -> CoreError {
    CoreError::Format {
        kind: "wav",
        detail: detail.into(),
    }
}

/// Nearest value representable in 16-bit PCM after clipping to ±1.
pub fn quantize(x: f64) -> f64 {
    to_pcm(x) as f64 / FULL_SCALE
}

pub fn quantize_all(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| quantize(v)).collect()
}

fn to_pcm(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * FULL_SCALE).round() as i16
}

fn spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

pub fn encode(clip: &AudioClip) -> Result<Vec<u8>> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(bad(format!("only {SAMPLE_RATE} Hz is supported, clip is {} Hz", clip.sample_rate)));
    }
    let mut cur = Cursor::new(Vec::new());
    {
        let mut w = WavWriter::new(&mut cur, spec()).map_err(|e| bad(e.to_string()))?;
        for &v in &clip.samples {
            w.write_sample(to_pcm(v)).map_err(|e| bad(e.to_string()))?;
        }
        w.finalize().map_err(|e| bad(e.to_string()))?;
    }
    Ok(cur.into_inner())
}

pub fn decode(bytes: &[u8]) -> Result<AudioClip> {
    read_from(Cursor::new(bytes))
}

fn read_from<R: Read + Seek>(r: R) -> Result<AudioClip> {
    let reader = WavReader::new(r).map_err(|e| bad(e.to_string()))?;
    let s = reader.spec();
    if s.channels != 1 {
        return Err(bad(format!("expected mono, found {} channels", s.channels)));
    }
    if s.sample_format != SampleFormat::Int || s.bits_per_sample != 16 {
        return Err(bad(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            s.bits_per_sample, s.sample_format
        )));
    }
    if s.sample_rate != SAMPLE_RATE {
        return Err(bad(format!("expected {SAMPLE_RATE} Hz, found {} Hz", s.sample_rate)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|v| v.map(|v| v as f64 / FULL_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    if samples.is_empty() {
        return Err(bad("no samples"));
    }
    AudioClip::new(samples, SAMPLE_RATE)
}

pub fn read(path: &Path) -> Result<AudioClip> {
    let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
    read_from(BufReader::new(f)).map_err(|e| match e {
        CoreError::Format { kind, detail } => CoreError::Format {
            kind,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn write(path: &Path, clip: &AudioClip) -> Result<()> {
    let bytes = encode(clip)?;
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}
