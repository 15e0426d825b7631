//! Discrete RIS phase selection.
//!
//! [`bcd_optimize`] runs block coordinate descent over the quantized phase
//! alphabet, one element at a time in ascending order, until a full sweep
//! changes nothing. [`brute_force_optimize`] enumerates every configuration
//! and exists as a reference for small arrays.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, ChannelError, LinkCoefficients, RadioParams, Vec3};

/// Search-space cap for [`brute_force_optimize`].
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Default sweep cap for [`bcd_optimize`].
pub const DEFAULT_MAX_SWEEPS: usize = 20;

/// Relative slack below which a candidate phase counts as a tie.
const TIE_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("phase index {index} at element {element} is outside 0..{levels}")]
    IndexOutOfRange {
        element: usize,
        index: u16,
        levels: usize,
    },
    #[error("phase alphabet must have at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("device {0} is not part of the geometry")]
    UnknownDevice(usize),
    #[error("search space of {0} configurations exceeds the brute-force limit")]
    SearchSpaceTooLarge(u128),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Quantized phase indices for every RIS element; element `m` is rotated by
/// `2π·indices[m]/levels`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhaseConfig {
    indices: Vec<u16>,
    levels: usize,
}

impl PhaseConfig {
    pub fn new(indices: Vec<u16>, levels: usize) -> Result<Self, OptimError> {
        if levels < 2 {
            return Err(OptimError::TooFewLevels(levels));
        }
        if let Some((element, &index)) = indices
            .iter()
            .enumerate()
            .find(|(_, &k)| k as usize >= levels)
        {
            return Err(OptimError::IndexOutOfRange {
                element,
                index,
                levels,
            });
        }
        Ok(Self { indices, levels })
    }

    pub fn zeros(elements: usize, levels: usize) -> Self {
        Self {
            indices: vec![0; elements],
            levels: levels.max(2),
        }
    }

    pub fn random<R: Rng + ?Sized>(elements: usize, levels: usize, rng: &mut R) -> Self {
        let levels = levels.max(2);
        Self {
            indices: (0..elements).map(|_| rng.gen_range(0..levels) as u16).collect(),
            levels,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn indices(&self) -> &[u16] {
        &self.indices
    }

    pub fn phase_of(&self, index: u16) -> f64 {
        2.0 * PI * index as f64 / self.levels as f64
    }

    pub fn phases(&self) -> Vec<f64> {
        self.indices.iter().map(|&k| self.phase_of(k)).collect()
    }

    /// `e^{jω}` for every level `ω` of the alphabet.
    pub fn phasor_table(&self) -> Vec<Complex64> {
        phasor_table(self.levels)
    }
}

fn phasor_table(levels: usize) -> Vec<Complex64> {
    (0..levels)
        .map(|q| Complex64::from_polar(1.0, 2.0 * PI * q as f64 / levels as f64))
        .collect()
}

/// Devices transmitting in the current slot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSet(pub Vec<usize>);

impl ScheduleSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &usize> {
        self.0.iter()
    }
}

/// Positions needed to evaluate the channels of one slot.
#[derive(Debug, Clone, Copy)]
pub struct Geometry<'a> {
    pub uav: Vec3,
    pub ris: Vec3,
    pub devices: &'a [Vec3],
}

/// Sum of per-slot rates over a fixed set of links, as a function of the RIS
/// configuration.
#[derive(Debug, Clone)]
pub struct RateObjective {
    links: Vec<LinkCoefficients>,
    snr_scale: f64,
    elements: usize,
    levels: usize,
}

impl RateObjective {
    pub fn new(
        sched: &ScheduleSet,
        geometry: &Geometry<'_>,
        params: &RadioParams,
    ) -> Result<Self, OptimError> {
        let links = sched
            .iter()
            .map(|&id| {
                let device = geometry
                    .devices
                    .get(id)
                    .ok_or(OptimError::UnknownDevice(id))?;
                Ok(LinkCoefficients::new(&geometry.uav, &geometry.ris, device, params)?)
            })
            .collect::<Result<Vec<_>, OptimError>>()?;
        Ok(Self::from_links(links, params))
    }

    pub fn from_links(links: Vec<LinkCoefficients>, params: &RadioParams) -> Self {
        Self {
            links,
            snr_scale: params.tx_power / params.noise_power,
            elements: params.elements,
            levels: params.levels(),
        }
    }

    pub fn links(&self) -> &[LinkCoefficients] {
        &self.links
    }

    pub fn elements(&self) -> usize {
        self.elements
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    fn link_rate(&self, amplitude: Complex64) -> f64 {
        channel::rate(self.snr_scale * amplitude.norm_sqr(), true)
    }

    /// Per-link rates in bits for this configuration.
    pub fn rates(&self, theta: &PhaseConfig) -> Result<Vec<f64>, OptimError> {
        self.check(theta)?;
        self.links
            .iter()
            .map(|l| Ok(self.link_rate(l.composite(theta)?)))
            .collect()
    }

    pub fn evaluate(&self, theta: &PhaseConfig) -> Result<f64, OptimError> {
        Ok(self.rates(theta)?.iter().sum())
    }

    fn check(&self, theta: &PhaseConfig) -> Result<(), OptimError> {
        if theta.levels() != self.levels {
            return Err(ChannelError::LevelMismatch {
                levels: theta.levels(),
                expected: self.levels,
            }
            .into());
        }
        if theta.len() != self.elements {
            return Err(ChannelError::LengthMismatch {
                expected: self.elements,
                got: theta.len(),
            }
            .into());
        }
        Ok(())
    }

    fn sums(&self, indices: &[u16], table: &[Complex64]) -> Vec<Complex64> {
        self.links
            .iter()
            .map(|l| {
                l.cascaded
                    .iter()
                    .zip(indices)
                    .fold(Complex64::new(l.direct, 0.0), |acc, (c, &k)| {
                        acc + c * table[k as usize]
                    })
            })
            .collect()
    }
}

pub fn sum_rate(
    theta: &PhaseConfig,
    sched: &ScheduleSet,
    geometry: &Geometry<'_>,
    params: &RadioParams,
) -> Result<f64, OptimError> {
    RateObjective::new(sched, geometry, params)?.evaluate(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BcdOptions {
    pub max_sweeps: usize,
    /// Number of starts; the first is all-zero, the rest uniform random.
    pub restarts: usize,
    pub seed: u64,
    /// Keep the objective value after every accepted coordinate update.
    pub record_trace: bool,
}

impl Default for BcdOptions {
    fn default() -> Self {
        Self {
            max_sweeps: DEFAULT_MAX_SWEEPS,
            restarts: 1,
            seed: 0,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcdOutcome {
    pub config: PhaseConfig,
    pub objective: f64,
    /// Sweeps run by the winning start.
    pub sweeps: usize,
    /// Whether the winning start ended on a sweep with no changes.
    pub converged: bool,
    /// Objective of the winning start: initial value, then one entry per
    /// accepted update. Empty unless requested.
    pub trace: Vec<f64>,
}

pub fn bcd_optimize(
    sched: &ScheduleSet,
    geometry: &Geometry<'_>,
    params: &RadioParams,
    max_sweeps: usize,
) -> Result<PhaseConfig, OptimError> {
    let objective = RateObjective::new(sched, geometry, params)?;
    let options = BcdOptions {
        max_sweeps,
        ..BcdOptions::default()
    };
    Ok(bcd_with(&objective, &options).config)
}

/// Block coordinate descent with optional random restarts; returns the best
/// start (earliest wins ties).
pub fn bcd_with(objective: &RateObjective, options: &BcdOptions) -> BcdOutcome {
    let (m, q) = (objective.elements, objective.levels);
    let mut best = bcd_from(objective, PhaseConfig::zeros(m, q), options);
    if m == 0 {
        return best;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for _ in 1..options.restarts {
        let start = PhaseConfig::random(m, q, &mut rng);
        let outcome = bcd_from(objective, start, options);
        if outcome.objective > best.objective {
            best = outcome;
        }
    }
    best
}

/// One coordinate-descent run from a given start.
pub fn bcd_from(objective: &RateObjective, start: PhaseConfig, options: &BcdOptions) -> BcdOutcome {
    let table = phasor_table(objective.levels);
    let mut indices = start.indices;
    let levels = start.levels;
    let mut sums = objective.sums(&indices, &table);
    let total = |sums: &[Complex64]| sums.iter().map(|s| objective.link_rate(*s)).sum::<f64>();

    let mut trace = Vec::new();
    if options.record_trace {
        trace.push(total(&sums));
    }
    let mut sweeps = 0;
    let mut converged = objective.elements == 0 || objective.links.is_empty();
    let mut base = vec![Complex64::default(); objective.links.len()];

    while !converged && sweeps < options.max_sweeps {
        sweeps += 1;
        let mut changed = false;
        for m in 0..indices.len() {
            let current = indices[m] as usize;
            for (b, (s, link)) in base.iter_mut().zip(sums.iter().zip(&objective.links)) {
                *b = s - link.cascaded[m] * table[current];
            }
            let value_at = |k: usize| -> f64 {
                base.iter()
                    .zip(&objective.links)
                    .map(|(b, link)| objective.link_rate(b + link.cascaded[m] * table[k]))
                    .sum()
            };
            let current_value = value_at(current);
            let threshold = current_value + TIE_TOLERANCE * current_value.abs();
            let mut best_k = current;
            let mut best_value = threshold;
            for k in 0..levels {
                if k == current {
                    continue;
                }
                let v = value_at(k);
                if v > best_value {
                    best_value = v;
                    best_k = k;
                }
            }
            if best_k != current {
                indices[m] = best_k as u16;
                for (s, (b, link)) in sums.iter_mut().zip(base.iter().zip(&objective.links)) {
                    *s = b + link.cascaded[m] * table[best_k];
                }
                changed = true;
                if options.record_trace {
                    trace.push(total(&sums));
                }
            }
        }
        // resynchronize the running sums
        sums = objective.sums(&indices, &table);
        if !changed {
            converged = true;
        }
    }

    BcdOutcome {
        objective: total(&sums),
        config: PhaseConfig { indices, levels },
        sweeps,
        converged,
        trace,
    }
}

/// Exhaustive search; ties go to the lexicographically smallest index vector.
pub fn brute_force_optimize(
    sched: &ScheduleSet,
    geometry: &Geometry<'_>,
    params: &RadioParams,
) -> Result<PhaseConfig, OptimError> {
    let objective = RateObjective::new(sched, geometry, params)?;
    brute_force_with(&objective).map(|(config, _)| config)
}

pub fn brute_force_with(objective: &RateObjective) -> Result<(PhaseConfig, f64), OptimError> {
    let (m, q) = (objective.elements, objective.levels);
    let space = (q as u128).checked_pow(m as u32).unwrap_or(u128::MAX);
    if space > BRUTE_FORCE_LIMIT {
        return Err(OptimError::SearchSpaceTooLarge(space));
    }
    let table = phasor_table(q);
    let mut indices = vec![0u16; m];
    let mut best = indices.clone();
    let score = |indices: &[u16]| -> f64 {
        objective
            .sums(indices, &table)
            .into_iter()
            .map(|s| objective.link_rate(s))
            .sum()
    };
    let mut best_value = score(&indices);
    // odometer with the last element fastest gives lexicographic order
    'outer: loop {
        let mut pos = m;
        loop {
            if pos == 0 {
                break 'outer;
            }
            pos -= 1;
            indices[pos] += 1;
            if (indices[pos] as usize) < q {
                break;
            }
            indices[pos] = 0;
        }
        let v = score(&indices);
        if v > best_value {
            best_value = v;
            best.copy_from_slice(&indices);
        }
    }
    Ok((
        PhaseConfig {
            indices: best,
            levels: q,
        },
        best_value,
    ))
}
