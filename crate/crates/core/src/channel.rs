//! Air-to-ground radio model.
//!
//! The direct UAV to device link mixes LoS and NLoS path loss by the
//! elevation-dependent LoS probability. The indirect link goes device to RIS
//! to UAV, each hop a pure-LoS Rician channel seen through a uniform linear
//! array. Everything here is a pure function of its inputs.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ris_optim::PhaseConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("UAV altitude {0} m must be above the device")]
    NonPositiveAltitude(f64),
    #[error("positions coincide, distance is zero")]
    CoincidentPositions,
    #[error("direction cosine {0} outside [-1, 1]")]
    CosineOutOfRange(f64),
    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("phase configuration has {levels} levels, radio expects {expected}")]
    LevelMismatch { levels: usize, expected: usize },
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// A point in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Vec3) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2))
            .sqrt()
    }

    pub fn horizontal_distance(&self, other: &Vec3) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// How the real-valued direct gain enters the complex composite channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectConvention {
    /// The probability-weighted path gain is added as-is to the cascaded
    /// amplitude sum.
    #[default]
    Literal,
    /// The square root of the probability-weighted path gain is used as the
    /// direct amplitude.
    SqrtGain,
}

/// Radio constants, all in linear units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioParams {
    /// LoS probability environment constants.
    pub eta1: f64,
    pub eta2: f64,
    /// Direct link path-loss exponent.
    pub beta1: f64,
    /// NLoS attenuation factor, in (0, 1].
    pub beta2: f64,
    /// Reference path gain at 1 m.
    pub rho: f64,
    /// RIS link path-loss exponent.
    pub alpha: f64,
    /// Rician factor.
    pub rician_k: f64,
    /// Carrier wavelength in meters.
    pub wavelength: f64,
    /// RIS element separation in meters.
    pub element_spacing: f64,
    /// Receiver noise power in watts.
    pub noise_power: f64,
    /// Device transmit power in watts.
    pub tx_power: f64,
    /// Number of RIS elements.
    pub elements: usize,
    /// Phase control bits per element; the alphabet has `2^control_bits` levels.
    pub control_bits: u32,
    #[serde(default)]
    pub direct_convention: DirectConvention,
}

impl Default for RadioParams {
    fn default() -> Self {
        let wavelength = 0.1;
        Self {
            eta1: 11.95,
            eta2: 0.136,
            beta1: 3.0,
            beta2: 0.2,
            rho: db_to_linear(10.0),
            alpha: 4.0,
            rician_k: db_to_linear(10.0),
            wavelength,
            element_spacing: wavelength / 2.0,
            noise_power: dbm_to_watts(-110.0),
            tx_power: dbm_to_watts(20.0),
            elements: 100,
            control_bits: 2,
            direct_convention: DirectConvention::Literal,
        }
    }
}

impl RadioParams {
    /// Size of the phase alphabet, `2^b`.
    pub fn levels(&self) -> usize {
        1usize << self.control_bits
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = [
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("rho", self.rho),
            ("alpha", self.alpha),
            ("rician_k", self.rician_k),
            ("wavelength", self.wavelength),
            ("element_spacing", self.element_spacing),
            ("noise_power", self.noise_power),
            ("tx_power", self.tx_power),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.beta2 > 1.0 {
            return Err(format!("beta2 must be at most 1, got {}", self.beta2));
        }
        if self.control_bits == 0 || self.control_bits > 16 {
            return Err(format!("control_bits must be in 1..=16, got {}", self.control_bits));
        }
        Ok(())
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Elevation angle in degrees of the UAV as seen from the device.
///
/// Uses the height difference `uav.z - device.z`, which is the raw UAV
/// altitude for ground-level devices.
pub fn elevation_angle(uav: &Vec3, device: &Vec3) -> Result<f64> {
    let dz = uav.z - device.z;
    if uav.z <= 0.0 || dz <= 0.0 {
        return Err(ChannelError::NonPositiveAltitude(uav.z));
    }
    let horizontal = uav.horizontal_distance(device);
    Ok(dz.atan2(horizontal).to_degrees())
}

pub fn los_probability(theta_deg: f64, params: &RadioParams) -> f64 {
    1.0 / (1.0 + params.eta1 * (-params.eta2 * (theta_deg - params.eta1)).exp())
}

/// Expected direct-link gain for a given distance and LoS probability.
pub fn mixed_path_gain(distance: f64, p_los: f64, params: &RadioParams) -> f64 {
    let los = distance.powf(-params.beta1);
    p_los * los + (1.0 - p_los) * params.beta2 * los
}

pub fn direct_gain(uav: &Vec3, device: &Vec3, params: &RadioParams) -> Result<f64> {
    let distance = uav.distance(device);
    if distance <= 0.0 {
        return Err(ChannelError::CoincidentPositions);
    }
    let theta = elevation_angle(uav, device)?;
    Ok(mixed_path_gain(distance, los_probability(theta, params), params))
}

/// ULA steering vector: entry `m` is `exp(-j 2π/λ m ζ cos)`.
pub fn array_response(cosine: f64, elements: usize, params: &RadioParams) -> Result<Vec<Complex64>> {
    if !(-1.0..=1.0).contains(&cosine) {
        return Err(ChannelError::CosineOutOfRange(cosine));
    }
    let step = -2.0 * PI / params.wavelength * params.element_spacing * cosine;
    Ok((0..elements)
        .map(|m| Complex64::from_polar(1.0, step * m as f64))
        .collect())
}

fn rician_los_channel(from: &Vec3, to: &Vec3, params: &RadioParams) -> Result<Vec<Complex64>> {
    let distance = from.distance(to);
    if distance <= 0.0 {
        return Err(ChannelError::CoincidentPositions);
    }
    // cosine of the angle of arrival along the array axis (x)
    let cosine = ((from.x - to.x) / distance).clamp(-1.0, 1.0);
    let scale = (params.rho * distance.powf(-params.alpha)).sqrt()
        * (params.rician_k / (1.0 + params.rician_k)).sqrt();
    let mut h = array_response(cosine, params.elements, params)?;
    for v in &mut h {
        *v *= scale;
    }
    Ok(h)
}

/// RIS to UAV channel vector.
pub fn ris_uav_channel(uav: &Vec3, ris: &Vec3, params: &RadioParams) -> Result<Vec<Complex64>> {
    rician_los_channel(ris, uav, params)
}

/// RIS to device channel vector.
pub fn ris_device_channel(ris: &Vec3, device: &Vec3, params: &RadioParams) -> Result<Vec<Complex64>> {
    rician_los_channel(ris, device, params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    pub amplitude: Complex64,
    /// `|amplitude|^2`
    pub power: f64,
}

/// `direct + h_ru^H Θ h_ri` for a quantized phase configuration.
pub fn composite_gain(
    direct: f64,
    h_ru: &[Complex64],
    theta: &PhaseConfig,
    h_ri: &[Complex64],
) -> Result<Composite> {
    let m = theta.len();
    for got in [h_ru.len(), h_ri.len()] {
        if got != m {
            return Err(ChannelError::LengthMismatch { expected: m, got });
        }
    }
    let mut sum = Complex64::new(direct, 0.0);
    for ((ru, ri), k) in h_ru.iter().zip(h_ri).zip(theta.indices()) {
        sum += ru.conj() * Complex64::from_polar(1.0, theta.phase_of(*k)) * ri;
    }
    Ok(Composite {
        amplitude: sum,
        power: sum.norm_sqr(),
    })
}

pub fn snr(gain_sq: f64, params: &RadioParams) -> f64 {
    params.tx_power * gain_sq / params.noise_power
}

/// Bits delivered in one slot with unit bandwidth.
pub fn rate(snr: f64, scheduled: bool) -> f64 {
    if scheduled {
        (1.0 + snr).log2()
    } else {
        0.0
    }
}

/// Per-device channel terms for a fixed UAV position, with the RIS phases
/// still free: composite = `direct + Σ_m cascaded[m]·e^{jθ_m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkCoefficients {
    pub direct: f64,
    pub cascaded: Vec<Complex64>,
}

impl LinkCoefficients {
    pub fn new(uav: &Vec3, ris: &Vec3, device: &Vec3, params: &RadioParams) -> Result<Self> {
        let gain = direct_gain(uav, device, params)?;
        let direct = match params.direct_convention {
            DirectConvention::Literal => gain,
            DirectConvention::SqrtGain => gain.sqrt(),
        };
        if params.elements == 0 {
            return Ok(Self {
                direct,
                cascaded: Vec::new(),
            });
        }
        let h_ru = ris_uav_channel(uav, ris, params)?;
        let h_ri = ris_device_channel(ris, device, params)?;
        let cascaded = h_ru.iter().zip(&h_ri).map(|(ru, ri)| ru.conj() * ri).collect();
        Ok(Self { direct, cascaded })
    }

    pub fn elements(&self) -> usize {
        self.cascaded.len()
    }

    pub fn composite(&self, theta: &PhaseConfig) -> Result<Complex64> {
        if theta.len() != self.cascaded.len() {
            return Err(ChannelError::LengthMismatch {
                expected: self.cascaded.len(),
                got: theta.len(),
            });
        }
        let table = theta.phasor_table();
        Ok(self
            .cascaded
            .iter()
            .zip(theta.indices())
            .fold(Complex64::new(self.direct, 0.0), |acc, (c, &k)| {
                acc + c * table[k as usize]
            }))
    }
}
