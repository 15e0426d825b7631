//! Rotary-wing propulsion power and energy efficiency.

use serde::{Deserialize, Serialize};

use crate::channel::Vec3;

/// Rotary-wing propulsion constants.
///
/// Defaults describe a ~20 N quadrotor-class platform: blade profile power
/// and drag constants from the usual rotary-wing energy model, with sea-level
/// air density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavPowerParams {
    /// Blade profile power constant (W).
    pub blade_profile: f64,
    /// Parasite drag constant (fuselage drag ratio × rotor solidity × disc area, m²).
    pub parasite_drag: f64,
    /// Blade tip speed (m/s).
    pub tip_speed: f64,
    /// Reference rotor speed (m/s); only the ratio `tip_speed / rotor_speed` matters.
    pub rotor_speed: f64,
    /// Airframe mass (kg).
    pub mass: f64,
    pub gravity: f64,
    /// Rotor disc area (m²).
    pub disc_area: f64,
    /// Air density (kg/m³).
    pub air_density: f64,
}

impl Default for UavPowerParams {
    fn default() -> Self {
        Self {
            blade_profile: 79.86,
            parasite_drag: 0.6 * 0.05 * 0.503,
            tip_speed: 10.0,
            rotor_speed: 120.0,
            mass: 2.0,
            gravity: 9.81,
            disc_area: 0.503,
            air_density: 1.225,
        }
    }
}

impl UavPowerParams {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("blade_profile", self.blade_profile),
            ("parasite_drag", self.parasite_drag),
            ("tip_speed", self.tip_speed),
            ("rotor_speed", self.rotor_speed),
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("disc_area", self.disc_area),
            ("air_density", self.air_density),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        Ok(())
    }

    pub fn weight(&self) -> f64 {
        self.mass * self.gravity
    }
}

/// The three propulsion power components at one speed, in watts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerBreakdown {
    pub blade: f64,
    pub parasite: f64,
    pub induced: f64,
}

impl PowerBreakdown {
    pub fn total(&self) -> f64 {
        self.blade + self.parasite + self.induced
    }
}

pub fn power_breakdown(speed: f64, params: &UavPowerParams) -> PowerBreakdown {
    let ratio = params.tip_speed / params.rotor_speed;
    let blade = params.blade_profile * (1.0 + 3.0 * ratio * ratio);
    let parasite = 0.5 * params.air_density * speed.powi(3) * params.parasite_drag;
    let w = params.weight();
    let disc = w / (params.air_density * params.disc_area);
    let v2 = speed * speed;
    // (sqrt(v^4 + c^2) - v^2) loses precision at high speed; use the
    // algebraically equal c^2 / (sqrt(v^4 + c^2) + v^2)
    let root = (v2 * v2 + disc * disc).sqrt();
    let induced = w * ((disc * disc / (root + v2)) / 2.0).sqrt();
    PowerBreakdown {
        blade,
        parasite,
        induced,
    }
}

/// Propulsion power in watts at forward speed `speed` (m/s).
pub fn power(speed: f64, params: &UavPowerParams) -> f64 {
    power_breakdown(speed, params).total()
}

/// A stretch of flight at constant speed, or a hover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PathSegment {
    Move { distance: f64, speed: f64 },
    Hover { duration: f64 },
}

pub fn segment_energy(segment: &PathSegment, params: &UavPowerParams) -> f64 {
    match *segment {
        PathSegment::Move { distance, speed } => {
            if distance <= 0.0 {
                0.0
            } else {
                power(speed, params) * distance / speed
            }
        }
        PathSegment::Hover { duration } => power(0.0, params) * duration,
    }
}

/// Energy for a per-slot position log; each slot's speed is its displacement
/// over `slot_duration`.
pub fn trajectory_energy(positions: &[Vec3], slot_duration: f64, params: &UavPowerParams) -> f64 {
    positions
        .windows(2)
        .map(|w| {
            let d = w[0].distance(&w[1]);
            let seg = if d > 0.0 {
                PathSegment::Move {
                    distance: d,
                    speed: d / slot_duration,
                }
            } else {
                PathSegment::Hover {
                    duration: slot_duration,
                }
            };
            segment_energy(&seg, params)
        })
        .sum()
}

/// Served bits per joule.
pub fn energy_efficiency(served_bits: f64, total_energy: f64) -> f64 {
    if total_energy <= 0.0 {
        return 0.0;
    }
    served_bits / total_energy
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // straight transcription of the three-term model, kept separate from the
    // numerically rearranged implementation
    fn reference_power(v: f64, p: &UavPowerParams) -> f64 {
        let blade = p.blade_profile * (1.0 + 3.0 * p.tip_speed.powi(2) / p.rotor_speed.powi(2));
        let parasite = 0.5 * p.air_density * v.powi(3) * p.parasite_drag;
        let w = p.mass * p.gravity;
        let inner = (-(v.powi(2)) + (v.powi(4) + (w / (p.air_density * p.disc_area)).powi(2)).sqrt()) / 2.0;
        blade + parasite + w * inner.sqrt()
    }

    #[test]
    fn hover_power_collapses() {
        let p = UavPowerParams::default();
        let b = power_breakdown(0.0, &p);
        assert_eq!(b.parasite, 0.0);
        let w = p.weight();
        assert_relative_eq!(
            b.induced,
            w * (w / (2.0 * p.air_density * p.disc_area)).sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn parasite_is_cubic() {
        let p = UavPowerParams::default();
        let a = power_breakdown(3.0, &p).parasite;
        let b = power_breakdown(6.0, &p).parasite;
        assert_relative_eq!(b, 8.0 * a, max_relative = 1e-12);
    }

    #[test]
    fn matches_reference_at_ten_mps() {
        let p = UavPowerParams::default();
        assert_relative_eq!(power(10.0, &p), reference_power(10.0, &p), max_relative = 1e-10);
        assert_relative_eq!(power(0.0, &p), reference_power(0.0, &p), max_relative = 1e-12);
    }

    #[test]
    fn bowl_shape() {
        let p = UavPowerParams::default();
        let (v_star, p_star) = (1..=600)
            .map(|i| i as f64 * 0.1)
            .map(|v| (v, power(v, &p)))
            .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        assert!(v_star > 0.0 && v_star < 60.0);
        assert!(p_star < power(0.0, &p));
        assert!(p_star < power(60.0, &p));
    }

    #[test]
    fn segment_cases() {
        let p = UavPowerParams::default();
        let mv = |d| PathSegment::Move { distance: d, speed: 10.0 };
        assert_eq!(segment_energy(&mv(0.0), &p), 0.0);
        assert_relative_eq!(
            segment_energy(&mv(200.0), &p),
            2.0 * segment_energy(&mv(100.0), &p),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            segment_energy(&mv(100.0), &p),
            reference_power(10.0, &p) * 10.0,
            max_relative = 1e-10
        );
        assert_relative_eq!(
            segment_energy(&PathSegment::Hover { duration: 3.0 }, &p),
            3.0 * power(0.0, &p),
            max_relative = 1e-12
        );
    }

    #[test]
    fn trajectory_decomposes_into_segments() {
        let p = UavPowerParams::default();
        let still = vec![Vec3::new(5.0, 5.0, 50.0); 6];
        assert_relative_eq!(trajectory_energy(&still, 1.0, &p), 5.0 * power(0.0, &p), max_relative = 1e-12);

        let path = [
            Vec3::new(0.0, 0.0, 50.0),
            Vec3::new(10.0, 0.0, 50.0),
            Vec3::new(10.0, 0.0, 50.0),
            Vec3::new(10.0, 10.0, 50.0),
        ];
        let hand = 2.0 * reference_power(10.0, &p) + reference_power(0.0, &p);
        assert_relative_eq!(trajectory_energy(&path, 1.0, &p), hand, max_relative = 1e-10);
    }

    #[test]
    fn efficiency_ratio() {
        assert_eq!(energy_efficiency(0.0, 100.0), 0.0);
        assert_relative_eq!(energy_efficiency(100.0, 50.0) * 2.0, energy_efficiency(200.0, 50.0));
        // two served devices of 60 bits over a 3-slot path
        let p = UavPowerParams::default();
        let e = 2.0 * reference_power(10.0, &p) + reference_power(0.0, &p);
        assert_relative_eq!(energy_efficiency(120.0, e), 120.0 / e, max_relative = 1e-12);
    }
}
