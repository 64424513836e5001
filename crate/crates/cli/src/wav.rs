//! WAV reading and writing. Outputs are always 32-bit float; 16, 24 and
//! 32-bit integer inputs are scaled to [-1, 1].

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use retm_core::signal::{decimate, AudioBuffer};

use crate::error::{AppError, AppResult};

pub fn read_wav(path: &Path) -> AppResult<AudioBuffer> {
    let mut reader = WavReader::open(path).map_err(|e| AppError::io(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| AppError::io(path, e))?,
        (SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| AppError::io(path, e))?
        }
        (format, bits) => {
            return Err(AppError::io(
                path,
                format!("unsupported sample format {format:?} with {bits} bits"),
            ))
        }
    };
    let frames = interleaved.len() / channels;
    let data = (0..channels)
        .map(|c| (0..frames).map(|f| interleaved[f * channels + c]).collect())
        .collect();
    AudioBuffer::new(data, spec.sample_rate).map_err(|e| AppError::io(path, e))
}

pub fn write_wav(path: &Path, buffer: &AudioBuffer) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let spec = WavSpec {
        channels: buffer.num_channels() as u16,
        sample_rate: buffer.sample_rate_hz(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| AppError::io(path, e))?;
    for i in 0..buffer.len() {
        for ch in buffer.channels() {
            writer
                .write_sample(ch[i] as f32)
                .map_err(|e| AppError::io(path, e))?;
        }
    }
    writer.finalize().map_err(|e| AppError::io(path, e))
}

/// Reads a source signal, downsampling by an integer factor and averaging
/// channels as needed, then zero-pads or truncates to `len` samples.
pub fn read_source(path: &Path, sample_rate_hz: u32, len: usize) -> AppResult<AudioBuffer> {
    let raw = read_wav(path)?;
    let rate = raw.sample_rate_hz();
    if rate % sample_rate_hz != 0 {
        return Err(AppError::io(
            path,
            format!("sample rate {rate} Hz is not a multiple of {sample_rate_hz} Hz"),
        ));
    }
    let buf = decimate(&raw, rate / sample_rate_hz)?;
    let n = buf.num_channels() as f64;
    let mut mono: Vec<f64> = (0..buf.len())
        .map(|i| buf.channels().iter().map(|c| c[i]).sum::<f64>() / n)
        .collect();
    mono.resize(len, 0.0);
    Ok(AudioBuffer::mono(mono, sample_rate_hz)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let buf = AudioBuffer::new(vec![vec![0.5, -0.25, 0.0], vec![1.0, 0.125, -1.0]], 16000).unwrap();
        write_wav(&path, &buf).unwrap();
        assert_eq!(read_wav(&path).unwrap(), buf);
    }

    #[test]
    fn integer_input_is_normalised() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 48000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for v in [16384i16, -32768, 0] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let b = read_wav(&path).unwrap();
        assert_eq!(b.channel(0), &[0.5, -1.0, 0.0]);
        let src = read_source(&path, 16000, 4).unwrap();
        assert_eq!((src.len(), src.sample_rate_hz()), (4, 16000));
        assert!(read_source(&path, 44100, 4).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_wav(Path::new("/nonexistent/a.wav")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/a.wav"));
    }
}
