use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Rendered image extents: time frames × Doppler columns.
pub const IMAGE_ROWS: usize = 180;
pub const IMAGE_COLS: usize = 60;

/// FFT bins pooled into one Doppler column.
pub const BINS_PER_COLUMN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 128,
            hop: 32,
            fft_len: 128,
        }
    }
}

/// Two-receiver CW radar and the STFT used to render its returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarConfig {
    /// Hz.
    pub carrier_freq: f64,
    /// Metres between the two receive antennas.
    pub antenna_spacing: f64,
    /// Hz.
    pub sample_rate: f64,
    /// Seconds.
    pub duration: f64,
    /// Signal-to-noise ratio of the added complex white noise. `inf` means
    /// noise-free.
    pub noise_snr_db: f64,
    pub stft: StftConfig,
}

impl Default for RadarConfig {
    fn default() -> Self {
        let carrier_freq = 24.0e9;
        Self {
            carrier_freq,
            antenna_spacing: SPEED_OF_LIGHT / carrier_freq / 2.0,
            sample_rate: 2000.0,
            duration: 3.0,
            noise_snr_db: 20.0,
            stft: StftConfig::default(),
        }
    }
}

impl RadarConfig {
    pub fn noise_free(mut self) -> Self {
        self.noise_snr_db = f64::INFINITY;
        self
    }

    /// Metres.
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    /// STFT frames of a signal with `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.stft.window_len || self.stft.hop == 0 {
            0
        } else {
            (len - self.stft.window_len) / self.stft.hop + 1
        }
    }

    /// Hz per FFT bin.
    pub fn bin_width(&self) -> f64 {
        self.sample_rate / self.stft.fft_len as f64
    }

    /// Hz per rendered Doppler column.
    pub fn column_width(&self) -> f64 {
        self.bin_width() * BINS_PER_COLUMN as f64
    }

    /// Doppler shift of radial velocity `v` (m/s).
    pub fn doppler(&self, v: f64) -> f64 {
        2.0 * v / self.wavelength()
    }

    /// Centre frequency (Hz) of Doppler column `j`.
    pub fn column_center(&self, j: usize) -> f64 {
        let first_bin = self.stft.fft_len / 2 - IMAGE_COLS * BINS_PER_COLUMN / 2;
        let offset = (first_bin + j * BINS_PER_COLUMN) as f64 - (self.stft.fft_len / 2) as f64;
        (offset + (BINS_PER_COLUMN as f64 - 1.0) / 2.0) * self.bin_width()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("carrier_freq", self.carrier_freq),
            ("antenna_spacing", self.antenna_spacing),
            ("sample_rate", self.sample_rate),
            ("duration", self.duration),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(format!("radar {name} must be positive and finite, got {v}")));
        }
        if self.noise_snr_db.is_nan() {
            return Err(Error::InvalidArgument("noise_snr_db is NaN".into()));
        }
        let StftConfig { window_len, hop, fft_len } = self.stft;
        if hop == 0 || window_len == 0 {
            return Err(Error::InvalidArgument("STFT window and hop must be at least 1".into()));
        }
        if fft_len < window_len || fft_len < IMAGE_COLS * BINS_PER_COLUMN {
            return Err(Error::InvalidArgument(format!(
                "fft_len {fft_len} must be at least the window ({window_len}) and {} bins",
                IMAGE_COLS * BINS_PER_COLUMN
            )));
        }
        let n = self.num_samples();
        if window_len > n || self.frame_count(n) < IMAGE_ROWS {
            return Err(Error::InvalidArgument(format!(
                "{n} samples give {} STFT frames, need {IMAGE_ROWS}",
                self.frame_count(n)
            )));
        }
        Ok(())
    }
}
