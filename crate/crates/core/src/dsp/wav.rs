use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{invalid, Result};

/// On-disk sample encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

/// Reads 16-bit PCM or 32-bit float WAV (interleaved multi-channel).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return invalid(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bits",
                path.display()
            ))
        }
    };
    let frames = interleaved.len() / channels;
    let mut out = vec![Vec::with_capacity(frames); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, &v) in frame.iter().enumerate() {
            out[c].push(v);
        }
    }
    Waveform::new(spec.sample_rate, out)
}

/// Writes a waveform; PCM output is clipped to [-1, 1).
pub fn write_wav(path: &Path, wave: &Waveform, format: WavFormat) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let spec = hound::WavSpec {
        channels: wave.num_channels() as u16,
        sample_rate: wave.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for i in 0..wave.len() {
        for ch in wave.channels() {
            match format {
                WavFormat::Pcm16 => {
                    let v = (ch[i] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v)?;
                }
                WavFormat::Float32 => writer.write_sample(ch[i] as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
