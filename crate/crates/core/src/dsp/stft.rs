use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Frames of length `win` at `hop` that fit entirely inside `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// Periodic Hann window.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectra `|X_k|^2` for `k = 0..=n_fft/2` of Hann-windowed frames,
/// each zero-padded from `win` to `n_fft` samples. Returns `T` rows.
pub fn power_spectrogram(samples: &[f32], win: usize, n_fft: usize, hop: usize) -> Vec<Vec<f64>> {
    assert!(n_fft >= win && hop > 0);
    let t = frame_count(samples.len(), win, hop);
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(t);
    for f in 0..t {
        let frame = &samples[f * hop..f * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(frame[i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        out.push(buf[..=n_fft / 2].iter().map(|c| c.norm_sqr()).collect());
    }
    out
}
