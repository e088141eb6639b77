use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::RadarConfig;
use crate::error::{Error, Result};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GestureKind {
    Blink,
    PushPull,
    Round,
    Swipe,
    ThumbsUp,
    Waving,
    Slide,
}

impl GestureKind {
    pub const ALL: [GestureKind; 7] = [
        GestureKind::Blink,
        GestureKind::PushPull,
        GestureKind::Round,
        GestureKind::Swipe,
        GestureKind::ThumbsUp,
        GestureKind::Waving,
        GestureKind::Slide,
    ];
}

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "single_blink",
    "double_blink",
    "single_push_pull",
    "double_push_pull",
    "single_round",
    "double_round",
    "single_swipe",
    "double_swipe",
    "single_thumbs_up",
    "double_thumbs_up",
    "single_waving",
    "double_waving",
    "single_slide",
    "double_slide",
];

/// Class id layout: kinds in [`GestureKind::ALL`] order, single before double.
pub fn class_id(kind: GestureKind, double: bool) -> usize {
    let k = GestureKind::ALL.iter().position(|&g| g == kind).expect("listed kind");
    2 * k + usize::from(double)
}

pub fn class_kind(class: usize) -> Result<(GestureKind, bool)> {
    if class >= NUM_CLASSES {
        return Err(Error::LabelOutOfRange {
            label: class,
            num_classes: NUM_CLASSES,
        });
    }
    Ok((GestureKind::ALL[class / 2], class % 2 == 1))
}

/// Radial velocity over one repetition, on local time `u ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VelocityShape {
    Constant,
    /// `sin(2π·cycles·u)`.
    Sine { cycles: f64 },
    /// One positive half-sine lobe.
    Lobe,
    /// Linear ramps over the first and last `ramp` fraction, flat between.
    Plateau { ramp: f64 },
    /// `sin θ(u)`: the radial part of a lateral movement across the beam.
    Lateral,
}

/// Azimuth over one repetition, as an offset from the centre angle scaled
/// by the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AzimuthShape {
    Fixed,
    /// `2u − 1`.
    Linear,
    /// `cos(2π·cycles·u)`.
    Cosine { cycles: f64 },
    /// `sin(2π·cycles·u)`.
    Sine { cycles: f64 },
}

/// One point scatterer of the hand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub amplitude: f64,
    /// Initial carrier phase, radians.
    pub phase: f64,
    /// Peak radial velocity, m/s. Positive approaches the radar.
    pub peak_velocity: f64,
    pub velocity: VelocityShape,
    /// Centre azimuth, radians.
    pub azimuth: f64,
    /// Azimuth excursion, radians.
    pub sweep: f64,
    pub azimuth_shape: AzimuthShape,
}

impl Scatterer {
    pub fn azimuth_at(&self, u: f64) -> f64 {
        let g = match self.azimuth_shape {
            AzimuthShape::Fixed => 0.0,
            AzimuthShape::Linear => 2.0 * u - 1.0,
            AzimuthShape::Cosine { cycles } => (2.0 * PI * cycles * u).cos(),
            AzimuthShape::Sine { cycles } => (2.0 * PI * cycles * u).sin(),
        };
        self.azimuth + self.sweep * g
    }

    pub fn velocity_at(&self, u: f64) -> f64 {
        let g = match self.velocity {
            VelocityShape::Constant => 1.0,
            VelocityShape::Sine { cycles } => (2.0 * PI * cycles * u).sin(),
            VelocityShape::Lobe => (PI * u).sin(),
            VelocityShape::Plateau { ramp } => (u / ramp).min((1.0 - u) / ramp).clamp(0.0, 1.0),
            VelocityShape::Lateral => self.azimuth_at(u).sin(),
        };
        self.peak_velocity * g
    }
}

/// Active interval of one repetition, seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub duration: f64,
}

/// Kinematics of one gesture instance. Scatterers are silent outside the
/// segments; inside, their amplitude follows a raised-cosine taper over the
/// first and last `taper` fraction of the segment.
#[derive(Debug, Clone, PartialEq)]
pub struct GestureProfile {
    pub class_id: usize,
    pub segments: Vec<Segment>,
    pub scatterers: Vec<Scatterer>,
    pub taper: f64,
}

/// Nominal template of a gesture kind.
struct Template {
    duration: f64,
    peak: f64,
    velocity: VelocityShape,
    sweep_deg: f64,
    azimuth: AzimuthShape,
    amplitude: f64,
}

fn template(kind: GestureKind) -> Template {
    use AzimuthShape as A;
    use VelocityShape as V;
    let t = |duration, peak, velocity, sweep_deg, azimuth, amplitude| Template {
        duration,
        peak,
        velocity,
        sweep_deg,
        azimuth,
        amplitude,
    };
    match kind {
        // Brief bidirectional finger flick.
        GestureKind::Blink => t(0.5, 0.6, V::Sine { cycles: 2.0 }, 0.0, A::Fixed, 0.8),
        // Approach then recede.
        GestureKind::PushPull => t(1.0, 1.5, V::Sine { cycles: 1.0 }, 0.0, A::Fixed, 1.0),
        // Circle in front of the radar.
        GestureKind::Round => t(1.2, 0.9, V::Sine { cycles: 2.0 }, 20.0, A::Cosine { cycles: 2.0 }, 1.0),
        // Lateral pass across the beam.
        GestureKind::Swipe => t(0.8, 1.8, V::Lateral, 45.0, A::Linear, 1.0),
        // Short, weak upward burst.
        GestureKind::ThumbsUp => t(0.45, 0.8, V::Lobe, 0.0, A::Fixed, 0.45),
        GestureKind::Waving => t(1.2, 1.1, V::Sine { cycles: 3.5 }, 12.0, A::Sine { cycles: 3.5 }, 1.0),
        // Sustained recession.
        GestureKind::Slide => t(1.1, -1.0, V::Plateau { ramp: 0.2 }, 0.0, A::Fixed, 1.0),
    }
}

/// Palm, fingers and forearm: (amplitude, velocity scale, azimuth offset °).
const PARTS: [(f64, f64, f64); 3] = [(1.0, 1.0, 0.0), (0.5, 1.35, 4.0), (0.3, 0.55, -3.0)];

/// Randomized factors of one gesture instance. [`Variation::NOMINAL`] leaves
/// the template unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variation {
    pub speed: f64,
    pub amplitude: f64,
    pub duration: f64,
    /// Seconds added to the nominal start.
    pub jitter: f64,
    /// Centre azimuth, degrees.
    pub azimuth_deg: f64,
    pub sweep: f64,
    /// Gap between the repetitions of a double gesture, seconds.
    pub gap: f64,
    pub phases: [f64; PARTS.len()],
}

impl Variation {
    pub const NOMINAL: Variation = Variation {
        speed: 1.0,
        amplitude: 1.0,
        duration: 1.0,
        jitter: 0.0,
        azimuth_deg: 0.0,
        sweep: 1.0,
        gap: 0.35,
        phases: [0.0; PARTS.len()],
    };

    /// Speed ±20%, amplitude ±30%, duration ±10%, start ±0.2 s, centre
    /// azimuth ±15°, sweep ±20%, gap 0.25–0.45 s and random carrier phases.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Variation {
            speed: rng.random_range(0.8..1.2),
            amplitude: rng.random_range(0.7..1.3),
            duration: rng.random_range(0.9..1.1),
            jitter: rng.random_range(-0.2..0.2),
            azimuth_deg: rng.random_range(-15.0..15.0),
            sweep: rng.random_range(0.8..1.2),
            gap: rng.random_range(0.25..0.45),
            phases: std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI)),
        }
    }
}

impl GestureProfile {
    /// A single scatterer at constant velocity and azimuth over the whole
    /// observation window.
    pub fn tone(velocity: f64, azimuth: f64, amplitude: f64, cfg: &RadarConfig) -> Self {
        GestureProfile {
            class_id: 0,
            segments: vec![Segment {
                start: 0.0,
                duration: cfg.duration,
            }],
            scatterers: vec![Scatterer {
                amplitude,
                phase: 0.0,
                peak_velocity: velocity,
                velocity: VelocityShape::Constant,
                azimuth,
                sweep: 0.0,
                azimuth_shape: AzimuthShape::Fixed,
            }],
            taper: 0.0,
        }
    }

    /// Instance of class `class` under `var`. A double gesture repeats the
    /// template twice, each repetition 20% shorter, separated by `var.gap`.
    pub fn for_class(class: usize, var: &Variation, cfg: &RadarConfig) -> Result<Self> {
        let (kind, double) = class_kind(class)?;
        let tpl = template(kind);
        let reps = if double { 2 } else { 1 };
        let d = tpl.duration * var.duration * if double { 0.8 } else { 1.0 };
        let total = reps as f64 * d + if double { var.gap } else { 0.0 };
        if total >= cfg.duration {
            return Err(Error::InvalidArgument(format!(
                "{} needs {total:.2} s but the window is {} s",
                CLASS_NAMES[class], cfg.duration
            )));
        }
        let slack = (cfg.duration - total) / 2.0;
        let margin = slack.min(0.15);
        let start = (slack + var.jitter).clamp(margin, 2.0 * slack - margin);
        let segments = (0..reps)
            .map(|r| Segment {
                start: start + r as f64 * (d + var.gap),
                duration: d,
            })
            .collect();
        let scatterers = PARTS
            .iter()
            .zip(var.phases)
            .map(|(&(amp, vscale, az_off), phase)| Scatterer {
                amplitude: tpl.amplitude * amp * var.amplitude,
                phase,
                peak_velocity: tpl.peak * vscale * var.speed,
                velocity: tpl.velocity,
                azimuth: (var.azimuth_deg + az_off).to_radians(),
                sweep: (tpl.sweep_deg * var.sweep).to_radians(),
                azimuth_shape: tpl.azimuth,
            })
            .collect();
        Ok(GestureProfile {
            class_id: class,
            segments,
            scatterers,
            taper: 0.2,
        })
    }

    /// Segment-local time and amplitude envelope at `t`, if active.
    pub fn activity(&self, t: f64) -> Option<(f64, f64)> {
        let seg = self.segments.iter().find(|s| t >= s.start && t < s.start + s.duration)?;
        let u = (t - seg.start) / seg.duration;
        let edge = u.min(1.0 - u);
        let env = if self.taper > 0.0 && edge < self.taper {
            0.5 - 0.5 * (PI * edge / self.taper).cos()
        } else {
            1.0
        };
        Some((u, env))
    }
}

/// Baseband returns at the two receive antennas. Each scatterer contributes
/// `a·exp(j·(φ₀ + 2π∫2v/λ dτ))` at antenna 1; antenna 2 lags it by
/// `2π·d·sin θ / λ`. Independent complex white noise is then added to each
/// antenna at `cfg.noise_snr_db` relative to the mean antenna-1 power.
pub fn simulate_iq<R: Rng + ?Sized>(
    profile: &GestureProfile,
    cfg: &RadarConfig,
    rng: &mut R,
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    cfg.validate()?;
    let n = cfg.num_samples();
    let dt = 1.0 / cfg.sample_rate;
    let lambda = cfg.wavelength();
    let nyquist = cfg.sample_rate / 2.0;
    let mut s1 = vec![Complex64::new(0.0, 0.0); n];
    let mut s2 = s1.clone();
    for sc in &profile.scatterers {
        let mut phase = sc.phase;
        let mut prev_f = None;
        for i in 0..n {
            let t = i as f64 * dt;
            let active = profile.activity(t);
            let (v, theta, env) = match active {
                Some((u, env)) => (sc.velocity_at(u), sc.azimuth_at(u), env),
                None => (0.0, sc.azimuth, 0.0),
            };
            let f = cfg.doppler(v);
            if f.abs() >= nyquist {
                return Err(Error::Aliasing {
                    velocity: v,
                    doppler: f,
                    nyquist,
                });
            }
            // Trapezoidal integration of the instantaneous Doppler frequency.
            if let Some(p) = prev_f {
                phase += PI * (p + f) * dt;
            }
            prev_f = Some(f);
            if env > 0.0 {
                let a = sc.amplitude * env;
                let offset = 2.0 * PI * cfg.antenna_spacing * theta.sin() / lambda;
                s1[i] += Complex64::from_polar(a, phase);
                s2[i] += Complex64::from_polar(a, phase - offset);
            }
        }
    }
    if cfg.noise_snr_db.is_finite() {
        let power = s1.iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
        let sigma = (power / 10f64.powf(cfg.noise_snr_db / 10.0) / 2.0).sqrt();
        if sigma > 0.0 {
            for z in s1.iter_mut().chain(s2.iter_mut()) {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                *z += Complex64::new(sigma * re, sigma * im);
            }
        }
    }
    Ok((s1, s2))
}
