//! Synthetic two-antenna 24 GHz CW radar returns for the 14 gesture classes,
//! rendered as `[180 × 60 × 3]` images.

mod config;
mod dsp;
mod gesture;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{RadarConfig, StftConfig, BINS_PER_COLUMN, IMAGE_COLS, IMAGE_ROWS, SPEED_OF_LIGHT};
pub use dsp::{aoa_map, count_segments, frame_energy, hann, render_image, spectrogram, stft, AOA_FLOOR_DB, DYNAMIC_RANGE_DB};
pub use gesture::{
    class_id, class_kind, simulate_iq, AzimuthShape, GestureKind, GestureProfile, Scatterer, Segment, Variation, VelocityShape,
    CLASS_NAMES,
};

use crate::error::{Error, Result};
use crate::io::{atomic_write, Dataset};
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// Per-sample SNR spread around `RadarConfig::noise_snr_db`, dB.
pub const SNR_SPREAD_DB: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GestureSample {
    pub image: Tensor<f32>,
    pub label: u8,
}

/// Generator for sample `index` of class `class`: its own ChaCha stream of
/// `seed`, so every sample is independent of all others.
pub fn sample_rng(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    rng
}

/// One randomized gesture instance and its rendered image.
pub fn generate_sample(class: usize, index: usize, cfg: &RadarConfig, seed: u64) -> Result<GestureSample> {
    let mut rng = sample_rng(seed, class, index);
    let var = Variation::random(&mut rng);
    let profile = GestureProfile::for_class(class, &var, cfg)?;
    let noisy = RadarConfig {
        noise_snr_db: cfg.noise_snr_db + rng.random_range(-SNR_SPREAD_DB..SNR_SPREAD_DB),
        ..*cfg
    };
    let (s1, s2) = simulate_iq(&profile, &noisy, &mut rng)?;
    Ok(GestureSample {
        image: render_image(&s1, &s2, cfg)?,
        label: class as u8,
    })
}

/// `samples_per_class` samples of every class, class-major. A pure function
/// of its arguments.
pub fn generate_dataset(samples_per_class: usize, cfg: &RadarConfig, seed: u64) -> Result<Dataset<f32>> {
    if samples_per_class == 0 {
        return Err(Error::InvalidArgument("samples_per_class must be at least 1".into()));
    }
    cfg.validate()?;
    let mut images = Vec::with_capacity(samples_per_class * NUM_CLASSES);
    let mut labels = Vec::with_capacity(samples_per_class * NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        for index in 0..samples_per_class {
            let s = generate_sample(class, index, cfg, seed)?;
            images.push(s.image);
            labels.push(s.label);
        }
    }
    Dataset::new([IMAGE_ROWS, IMAGE_COLS, 3], images, labels)
}

/// Writes `[H × W]` values in `[0, 1]` as an 8-bit binary PGM.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::InvalidArgument(format!(
            "{} values for a {height}×{width} image",
            values.len()
        )));
    }
    let pixels: Vec<u8> = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    atomic_write(path, |f| {
        write!(f, "P5\n{width} {height}\n255\n")?;
        f.write_all(&pixels)
    })
}

/// One PGM per class (its first sample) with the three channels side by
/// side, separated by 2-pixel white bars. Returns the written paths.
pub fn write_preview(dir: &Path, data: &Dataset<f32>) -> Result<Vec<PathBuf>> {
    let [h, w, c] = data.shape();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    const BAR: usize = 2;
    let width = c * w + (c - 1) * BAR;
    let mut written = Vec::new();
    for class in 0..NUM_CLASSES {
        let Some(i) = (0..data.len()).find(|&i| data.label(i) == class) else {
            continue;
        };
        let img = data.image(i).data();
        let mut canvas = vec![1.0f32; h * width];
        for y in 0..h {
            for ch in 0..c {
                for x in 0..w {
                    canvas[y * width + ch * (w + BAR) + x] = img[(y * w + x) * c + ch];
                }
            }
        }
        let path = dir.join(format!("{class:02}_{}.pgm", CLASS_NAMES[class]));
        write_pgm(&path, h, width, &canvas)?;
        written.push(path);
    }
    Ok(written)
}
