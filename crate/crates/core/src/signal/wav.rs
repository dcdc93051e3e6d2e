//! RIFF/WAVE reading and writing (PCM 16-bit and IEEE float 32-bit).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a WAV file, de-interleaving channels. PCM16 is scaled by `1/32768`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    deinterleave(&interleaved, channels, spec.sample_rate)
}

/// Frames per channel, channel count and sample rate from the header alone.
pub fn wav_info(path: impl AsRef<Path>) -> Result<(usize, usize, u32)> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    Ok((
        reader.duration() as usize,
        spec.channels as usize,
        spec.sample_rate,
    ))
}

pub fn deinterleave(interleaved: &[f32], channels: usize, sample_rate: u32) -> Result<Waveform> {
    if channels == 0 || !interleaved.len().is_multiple_of(channels) {
        return Err(Error::Format(format!(
            "{} samples do not divide into {channels} channels",
            interleaved.len()
        )));
    }
    let len = interleaved.len() / channels;
    let mut samples = vec![0.0; interleaved.len()];
    for (i, &s) in interleaved.iter().enumerate() {
        samples[(i % channels) * len + i / channels] = s;
    }
    Waveform::new(samples, channels, sample_rate)
}

/// Writes a WAV file. PCM16 output clamps to `[-1, 1)` before quantising.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, SampleFormat::Int),
        WavEncoding::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: u16::try_from(w.channels()).map_err(|_| {
            Error::Format(format!("{} channels do not fit a WAV header", w.channels()))
        })?,
        sample_rate: w.sample_rate(),
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    let len = w.len();
    for t in 0..len {
        for ch in 0..w.channels() {
            let s = w.channel(ch)[t];
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(wav_err(path))?;
                }
                WavEncoding::Float32 => writer.write_sample(s).map_err(wav_err(path))?,
            }
        }
    }
    writer.finalize().map_err(wav_err(path))
}
