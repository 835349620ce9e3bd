use std::f64::consts::PI;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{CoreError, Result};

/// Reads a 16-bit integer or 32-bit float PCM WAV, mono or stereo.
/// Stereo is averaged to mono.
pub fn load_audio(path: &Path) -> Result<AudioClip> {
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => CoreError::io(path, io),
        other => CoreError::format(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(CoreError::UnsupportedAudio(format!(
            "{}: {} channels",
            path.display(),
            spec.channels
        )));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().collect(),
        (fmt, bits) => {
            return Err(CoreError::UnsupportedAudio(format!(
                "{}: {bits}-bit {fmt:?} samples",
                path.display()
            )))
        }
    }
    .map_err(|e| CoreError::format(path, e.to_string()))?;
    let samples: Vec<f32> = if spec.channels == 2 {
        interleaved
            .chunks_exact(2)
            .map(|c| 0.5 * (c[0] + c[1]))
            .collect()
    } else {
        interleaved
    };
    if samples.is_empty() {
        return Err(CoreError::format(path, "zero-length audio"));
    }
    AudioClip::new(samples, spec.sample_rate).map_err(|e| CoreError::format(path, e.to_string()))
}

/// Writes a mono 32-bit float WAV, which round-trips samples exactly.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => CoreError::io(path, io),
        other => CoreError::format(path, other.to_string()),
    };
    let mut w = WavWriter::create(path, spec).map_err(wrap)?;
    for &s in clip.samples() {
        w.write_sample(s).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

/// Zero crossings of the sinc kernel on each side at the narrower rate.
const SINC_ZEROS: f64 = 16.0;

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(CoreError::invalid("target rate must be positive"));
    }
    let src_rate = clip.sample_rate();
    if src_rate == target_rate {
        return Ok(clip.clone());
    }
    let x = clip.samples();
    let ratio = target_rate as f64 / src_rate as f64;
    let out_len = (x.len() as f64 * ratio).round() as usize;
    // Cutoff relative to the input Nyquist frequency.
    let cutoff = ratio.min(1.0);
    let half = SINC_ZEROS / cutoff;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let t = i as f64 / ratio;
        let lo = (t - half).ceil().max(0.0) as usize;
        let hi = ((t + half).floor() as usize).min(x.len().saturating_sub(1));
        let mut acc = 0.0;
        for (j, &xj) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let d = t - j as f64;
            let w = 0.5 + 0.5 * (PI * d / half).cos();
            let arg = PI * cutoff * d;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
            acc += xj as f64 * cutoff * sinc * w;
        }
        out.push(acc as f32);
    }
    AudioClip::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, n: usize) -> AudioClip {
        let s = (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioClip::new(s, rate).unwrap()
    }

    fn write_int16(path: &Path, channels: u16, frames: &[i16]) {
        let spec = WavSpec {
            channels,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in frames {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_int16(&p, 1, &vec![0; 16000]);
        let clip = load_audio(&p).unwrap();
        assert_eq!(clip.len(), 16000);
        assert_eq!(clip.sample_rate(), 16000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn opposite_stereo_channels_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let frames: Vec<i16> = (0..2000).flat_map(|_| [16384i16, -16384]).collect();
        write_int16(&p, 2, &frames);
        let clip = load_audio(&p).unwrap();
        assert_eq!(clip.len(), 2000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn eight_bit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 8,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(0i8).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(load_audio(&p), Err(CoreError::UnsupportedAudio(_))));
    }

    #[test]
    fn missing_and_empty_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_audio(&dir.path().join("nope.wav")).is_err());
        let p = dir.path().join("e.wav");
        write_int16(&p, 1, &[]);
        assert!(load_audio(&p).is_err());
    }

    #[test]
    fn float_wav_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let clip = sine(123.0, 16000, 1000);
        write_wav(&p, &clip).unwrap();
        assert_eq!(load_audio(&p).unwrap(), clip);
    }

    #[test]
    fn same_rate_is_identity() {
        let clip = sine(440.0, 16000, 512);
        assert_eq!(resample(&clip, 16000).unwrap(), clip);
    }

    #[test]
    fn halving_rate_halves_length() {
        for n in [1000usize, 1001, 4097] {
            let out = resample(&sine(300.0, 32000, n), 16000).unwrap();
            assert!((out.len() as i64 - (n / 2) as i64).abs() <= 1);
        }
    }

    #[test]
    fn tone_frequency_survives_resampling() {
        let out = resample(&sine(440.0, 44100, 44100), 16000).unwrap();
        let x = out.samples();
        let n = x.len();
        // Direct DFT magnitude scan; bin spacing is 16000 / n Hz.
        let mag = |k: usize| {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (i, &v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * i) as f64 / n as f64;
                re += v as f64 * a.cos();
                im += v as f64 * a.sin();
            }
            re.hypot(im)
        };
        let bin_hz = 16000.0 / n as f64;
        let expected = (440.0 / bin_hz).round() as usize;
        let best = (expected - 20..expected + 20)
            .max_by(|&a, &b| mag(a).partial_cmp(&mag(b)).unwrap())
            .unwrap();
        assert!((best as i64 - expected as i64).abs() <= 1);
        // And no strong alias anywhere else in a coarse scan.
        let peak = mag(best);
        for k in (0..n / 2).step_by(37) {
            if (k as i64 - expected as i64).abs() > 5 {
                assert!(mag(k) < 0.05 * peak, "bin {k}");
            }
        }
    }
}
