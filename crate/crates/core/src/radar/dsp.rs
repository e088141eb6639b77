//! STFT rendering of the two receiver signals into spectrogram and
//! angle-of-arrival images (time = rows, Doppler = columns).

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::config::{RadarConfig, BINS_PER_COLUMN, IMAGE_COLS, IMAGE_ROWS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dynamic range kept by the log-magnitude spectrogram, dB below its peak.
pub const DYNAMIC_RANGE_DB: f64 = 60.0;

/// Cells whose cross-power is this far below the peak get the neutral angle.
pub const AOA_FLOOR_DB: f64 = 40.0;

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Hann-windowed STFT, `[frames × fft_len]` row-major, each frame
/// fft-shifted so bin `fft_len/2` is zero Doppler.
pub fn stft(signal: &[Complex64], cfg: &RadarConfig) -> Result<Vec<Complex64>> {
    cfg.validate()?;
    let frames = cfg.frame_count(signal.len());
    if frames < IMAGE_ROWS {
        return Err(Error::Signal(format!(
            "{} samples give {frames} STFT frames, need {IMAGE_ROWS}",
            signal.len()
        )));
    }
    let (win, hop, nfft) = (cfg.stft.window_len, cfg.stft.hop, cfg.stft.fft_len);
    let window = hann(win);
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let mut out = vec![Complex64::new(0.0, 0.0); frames * nfft];
    for (m, frame) in out.chunks_exact_mut(nfft).enumerate() {
        for (i, (&s, &w)) in signal[m * hop..m * hop + win].iter().zip(&window).enumerate() {
            frame[i] = s * w;
        }
        fft.process(frame);
        frame.rotate_left(nfft / 2);
    }
    Ok(out)
}

/// The `180 × 120` central STFT cells: middle frames, middle bins.
fn cells(signal: &[Complex64], cfg: &RadarConfig) -> Result<Vec<Complex64>> {
    let nfft = cfg.stft.fft_len;
    let full = stft(signal, cfg)?;
    let frames = full.len() / nfft;
    let f0 = (frames - IMAGE_ROWS) / 2;
    let bins = IMAGE_COLS * BINS_PER_COLUMN;
    let b0 = nfft / 2 - bins / 2;
    let mut out = Vec::with_capacity(IMAGE_ROWS * bins);
    for row in full.chunks_exact(nfft).skip(f0).take(IMAGE_ROWS) {
        out.extend_from_slice(&row[b0..b0 + bins]);
    }
    Ok(out)
}

/// Log-magnitude spectrogram `[180 × 60]` in `[0, 1]`. Adjacent bin pairs are
/// averaged in magnitude, values more than [`DYNAMIC_RANGE_DB`] below the
/// peak are clamped, and the result is min-max scaled. A flat image,
/// including an all-zero signal, maps to zeros.
pub fn spectrogram(signal: &[Complex64], cfg: &RadarConfig) -> Result<Tensor<f64>> {
    let c = cells(signal, cfg)?;
    let mag: Vec<f64> = c
        .chunks_exact(BINS_PER_COLUMN)
        .map(|p| p.iter().map(|z| z.norm()).sum::<f64>() / BINS_PER_COLUMN as f64)
        .collect();
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) || !peak.is_finite() {
        return Tensor::new(&[IMAGE_ROWS, IMAGE_COLS], vec![0.0; mag.len()]);
    }
    let top = 20.0 * peak.log10();
    let floor = top - DYNAMIC_RANGE_DB;
    let db: Vec<f64> = mag.iter().map(|&m| if m > 0.0 { (20.0 * m.log10()).max(floor) } else { floor }).collect();
    let lo = db.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = top - lo;
    let data = if range > 0.0 {
        db.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; db.len()]
    };
    Tensor::new(&[IMAGE_ROWS, IMAGE_COLS], data)
}

/// Angle-of-arrival map `[180 × 60]`. Per cell, Δφ is the phase of the
/// pooled cross-spectrum `Σ S₁·conj(S₂)`, θ = asin(clamp(Δφ·λ/(2π·d))) and
/// the value is `0.5 + θ/π`. Cells more than [`AOA_FLOOR_DB`] below the
/// strongest cross-power read 0.5.
pub fn aoa_map(sig1: &[Complex64], sig2: &[Complex64], cfg: &RadarConfig) -> Result<Tensor<f64>> {
    if sig1.len() != sig2.len() {
        return Err(Error::Signal(format!(
            "antenna signals differ in length: {} vs {}",
            sig1.len(),
            sig2.len()
        )));
    }
    let (c1, c2) = (cells(sig1, cfg)?, cells(sig2, cfg)?);
    let cross: Vec<Complex64> = c1
        .chunks_exact(BINS_PER_COLUMN)
        .zip(c2.chunks_exact(BINS_PER_COLUMN))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y.conj()).sum())
        .collect();
    let peak = cross.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let floor = peak * 10f64.powf(-AOA_FLOOR_DB / 10.0);
    let scale = cfg.wavelength() / (2.0 * PI * cfg.antenna_spacing);
    let data = cross
        .iter()
        .map(|z| {
            if peak > 0.0 && z.norm() > floor {
                0.5 + (z.arg() * scale).clamp(-1.0, 1.0).asin() / PI
            } else {
                0.5
            }
        })
        .collect();
    Tensor::new(&[IMAGE_ROWS, IMAGE_COLS], data)
}

/// Energy of each of the 180 rendered frames over the rendered band.
pub fn frame_energy(signal: &[Complex64], cfg: &RadarConfig) -> Result<Vec<f64>> {
    let c = cells(signal, cfg)?;
    Ok(c.chunks_exact(IMAGE_COLS * BINS_PER_COLUMN)
        .map(|row| row.iter().map(|z| z.norm_sqr()).sum())
        .collect())
}

/// Number of high-energy runs: frames whose 9-frame moving average exceeds
/// `threshold` times its maximum, with runs closer than 8 frames merged.
pub fn count_segments(energy: &[f64], threshold: f64) -> usize {
    const HALF: usize = 4;
    const MIN_GAP: usize = 8;
    let n = energy.len();
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(HALF), (i + HALF + 1).min(n));
            energy[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect();
    let peak = smooth.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return 0;
    }
    let mut runs = 0;
    let mut last_end: Option<usize> = None;
    let mut inside = false;
    for (i, &e) in smooth.iter().enumerate() {
        let above = e > threshold * peak;
        if above && !inside {
            if last_end.is_none_or(|end| i - end >= MIN_GAP) {
                runs += 1;
            }
            inside = true;
        } else if !above && inside {
            last_end = Some(i);
            inside = false;
        }
    }
    runs
}

/// Three-channel `[180 × 60 × 3]` image: antenna-1 spectrogram, antenna-2
/// spectrogram, angle-of-arrival map.
pub fn render_image(sig1: &[Complex64], sig2: &[Complex64], cfg: &RadarConfig) -> Result<Tensor<f32>> {
    let planes = [spectrogram(sig1, cfg)?, spectrogram(sig2, cfg)?, aoa_map(sig1, sig2, cfg)?];
    Ok(Tensor::from_fn(&[IMAGE_ROWS, IMAGE_COLS, 3], |i| planes[i % 3].data()[i / 3] as f32))
}
