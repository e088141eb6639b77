//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use gesture_vit::model::ModelConfig;
use gesture_vit::nn::HeadConvention;
use gesture_vit::radar::{
    aoa_map, simulate_iq, spectrogram, AzimuthShape, GestureProfile, RadarConfig, Scatterer, Segment, VelocityShape,
    IMAGE_COLS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameter count of `cfg` written out layer by layer from the
/// architecture description alone. It never builds a model, so it can act
/// as an oracle for `count_params`.
pub fn closed_form_params(cfg: &ModelConfig) -> usize {
    let [mut h, mut w, mut c] = cfg.input;
    let mut total = 0;

    if cfg.variant.has_encoder() {
        for layer in &cfg.encoder.layers {
            let (k, f) = (layer.kernel, layer.filters);
            total += k * k * c * f + f;
            c = f;
            // Same-padded conv keeps the extent, ceil-mode 2×2 pooling halves it.
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
    }

    if cfg.variant.has_decoder() {
        let f = cfg.decoder_filters;
        // Two 1×1 stride-2 transposed convolutions.
        total += c * f + f;
        total += f * f + f;
        c = f;
        h *= 4;
        w *= 4;
    }

    let features = if cfg.variant.has_attention() {
        let a = &cfg.attention;
        let (p, d, heads) = (a.patch_size, a.model_dim, a.heads);
        let (ph, pw) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
        let tokens = (ph / p) * (pw / p);
        let patch_len = p * p * c;
        total += patch_len * d + d; // projection
        total += tokens * d; // learned positions

        let per_head = match a.head_convention {
            HeadConvention::SplitDk => d / heads,
            HeadConvention::WholeDk => d,
        };
        let width = heads * per_head;
        let proj_bias = usize::from(a.projection_bias);
        let mut layer = 0;
        layer += 2 * d; // norm 1
        layer += 3 * (d * width + proj_bias * width); // query, key, value
        layer += width * d + proj_bias * d; // output
        layer += 2 * d; // norm 2
        layer += d * a.mlp_hidden + a.mlp_hidden;
        layer += a.mlp_hidden * d + d;
        total += a.layers * layer;
        if a.final_norm {
            total += 2 * d;
        }
        tokens * d
    } else {
        h * w * c
    };

    let mut fan_in = features;
    for &width in cfg.head_widths.iter().chain(std::iter::once(&cfg.classes)) {
        total += fan_in * width + width;
        fan_in = width;
    }
    total
}

/// Reference trainable count the deviation check is measured against.
pub const REFERENCE_FULL_PARAMS: usize = 796_830;

/// Reference increment between consecutive depths.
pub const REFERENCE_LAYER_INCREMENT: usize = 5_440;

/// One scatterer at constant radial velocity and fixed azimuth for the
/// whole observation window.
pub fn steady_target(velocity: f64, azimuth_deg: f64, cfg: &RadarConfig) -> GestureProfile {
    GestureProfile {
        class_id: 0,
        segments: vec![Segment {
            start: 0.0,
            duration: cfg.duration + 1.0,
        }],
        scatterers: vec![Scatterer {
            amplitude: 1.0,
            phase: 0.3,
            peak_velocity: velocity,
            velocity: VelocityShape::Constant,
            azimuth: azimuth_deg.to_radians(),
            sweep: 0.0,
            azimuth_shape: AzimuthShape::Fixed,
        }],
        taper: 0.0,
    }
}

/// Column with the largest summed magnitude over all frames.
pub fn ridge_column(img: &[f64]) -> usize {
    let mut sums = [0.0f64; IMAGE_COLS];
    for row in img.chunks_exact(IMAGE_COLS) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    (0..IMAGE_COLS).max_by(|&a, &b| sums[a].total_cmp(&sums[b])).unwrap()
}

/// Largest `|ridge frequency − 2v/λ|` over `n` random in-band velocities,
/// in units of the FFT bin width.
pub fn doppler_ridge_error_bins(n: usize, seed: u64) -> f64 {
    let cfg = RadarConfig::default().noise_free();
    // Keep the true frequency inside the rendered band.
    let v_max = 0.95 * cfg.column_center(IMAGE_COLS - 1) * cfg.wavelength() / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let v = rng.random_range(-v_max..v_max);
        let (s1, _) = simulate_iq(&steady_target(v, 0.0, &cfg), &cfg, &mut rng).unwrap();
        let col = ridge_column(spectrogram(&s1, &cfg).unwrap().data());
        worst = worst.max((cfg.column_center(col) - cfg.doppler(v)).abs() / cfg.bin_width());
    }
    worst
}

/// Largest angle error in degrees over every frame of the ridge column for
/// azimuths −60°..=60° in 5° steps.
pub fn aoa_error_deg() -> f64 {
    let cfg = RadarConfig::default().noise_free();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for theta in (-60..=60).step_by(5).map(f64::from) {
        let (s1, s2) = simulate_iq(&steady_target(0.9, theta, &cfg), &cfg, &mut rng).unwrap();
        let col = ridge_column(spectrogram(&s1, &cfg).unwrap().data());
        let map = aoa_map(&s1, &s2, &cfg).unwrap();
        for row in map.data().chunks_exact(IMAGE_COLS) {
            worst = worst.max(((row[col] - 0.5) * 180.0 - theta).abs());
        }
    }
    worst
}
