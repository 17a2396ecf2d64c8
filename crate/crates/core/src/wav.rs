//! WAV header inspection. Audio is referenced, never decoded.

use std::path::Path;

use thiserror::Error;

pub const TARGET_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavInfo {
    pub sample_rate: u32,
    pub channels: u16,
    pub bits_per_sample: u16,
    pub frames: u32,
}

impl WavInfo {
    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / self.sample_rate as f64
    }

    /// 16 kHz, mono, 16-bit PCM.
    pub fn is_normalized(&self) -> bool {
        self.sample_rate == TARGET_SAMPLE_RATE && self.channels == 1 && self.bits_per_sample == 16
    }
}

#[derive(Debug, Error)]
pub enum WavError {
    #[error("cannot read wav header of {path}: {source}")]
    Header {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("{path} is {rate} Hz / {channels} ch / {bits} bit, expected 16000 Hz mono 16-bit")]
    NotNormalized { path: String, rate: u32, channels: u16, bits: u16 },
}

pub fn inspect(path: impl AsRef<Path>) -> Result<WavInfo, WavError> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)
        .map_err(|source| WavError::Header { path: path.display().to_string(), source })?;
    let spec = reader.spec();
    Ok(WavInfo {
        sample_rate: spec.sample_rate,
        channels: spec.channels,
        bits_per_sample: spec.bits_per_sample,
        frames: reader.duration(),
    })
}

/// Inspects and rejects files that are not in the pipeline's target format.
pub fn inspect_normalized(path: impl AsRef<Path>) -> Result<WavInfo, WavError> {
    let info = inspect(&path)?;
    if !info.is_normalized() {
        return Err(WavError::NotNormalized {
            path: path.as_ref().display().to_string(),
            rate: info.sample_rate,
            channels: info.channels,
            bits: info.bits_per_sample,
        });
    }
    Ok(info)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, rate: u32, channels: u16, frames: u32) {
        let spec = hound::WavSpec { channels, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for _ in 0..frames * channels as u32 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn header_duration_and_format() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.wav");
        write(&ok, 16_000, 1, 24_000);
        let info = inspect_normalized(&ok).unwrap();
        assert_eq!(info.duration_s(), 1.5);

        let stereo = dir.path().join("stereo.wav");
        write(&stereo, 44_100, 2, 100);
        assert!(matches!(inspect_normalized(&stereo), Err(WavError::NotNormalized { .. })));
        assert!(inspect(dir.path().join("missing.wav")).is_err());
    }
}
