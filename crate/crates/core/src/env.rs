//! Slotted data-collection episode.
//!
//! Each slot the UAV takes one of five moves at fixed altitude, up to `C`
//! active and unserved devices upload over orthogonal channels, and the RIS
//! is configured for the scheduled set. The reward is the number of devices
//! whose payload completes in that slot.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{RadioParams, Vec3};
use crate::ris_optim::{self, BcdOptions, Geometry, OptimError, PhaseConfig, RateObjective, ScheduleSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid episode config: {0}")]
    Config(String),
    #[error("episode is over; call reset")]
    EpisodeDone,
    #[error("invalid state: {0}")]
    State(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    Left,
    Right,
    Forward,
    Backward,
    Stop,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::Left, Move::Right, Move::Forward, Move::Backward, Move::Stop];

    /// Unit displacement in the horizontal plane.
    pub fn direction(self) -> (f64, f64) {
        match self {
            Move::Left => (-1.0, 0.0),
            Move::Right => (1.0, 0.0),
            Move::Forward => (0.0, 1.0),
            Move::Backward => (0.0, -1.0),
            Move::Stop => (0.0, 0.0),
        }
    }

    pub fn index(self) -> usize {
        Move::ALL.iter().position(|&m| m == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Move::Left => "left",
            Move::Right => "right",
            Move::Forward => "forward",
            Move::Backward => "backward",
            Move::Stop => "stop",
        }
    }

    pub fn from_name(s: &str) -> Option<Move> {
        Move::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub movement: Move,
    pub schedule: ScheduleSet,
}

impl Action {
    pub fn new(movement: Move, schedule: Vec<usize>) -> Self {
        Self {
            movement,
            schedule: ScheduleSet(schedule),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadDist {
    Fixed { bits: f64 },
    Uniform { min: f64, max: f64 },
}

impl PayloadDist {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            PayloadDist::Fixed { bits } => bits,
            PayloadDist::Uniform { min, max } if max > min => rng.gen_range(min..max),
            PayloadDist::Uniform { min, .. } => min,
        }
    }
}

/// How the RIS is configured each slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    /// Block coordinate descent over the scheduled devices.
    #[default]
    Bcd,
    /// Uniform random indices, seeded per slot.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Slots per episode.
    pub horizon: usize,
    pub area_x: f64,
    pub area_y: f64,
    pub num_devices: usize,
    /// Orthogonal uplink channels per slot.
    pub channels: usize,
    /// UAV displacement per move, in meters.
    pub step_length: f64,
    /// Maximum UAV displacement per slot.
    pub max_speed: f64,
    /// Activation window length in slots.
    pub activation_len: usize,
    pub payload: PayloadDist,
    pub seed: u64,
    pub uav_altitude: f64,
    pub device_height: f64,
    /// Horizontal start position; area center when unset.
    pub uav_start: Option<[f64; 2]>,
    pub ris_position: Vec3,
    /// Slot duration in seconds.
    pub slot_duration: f64,
    /// Eligible devices visible to the flattened action space; defaults to
    /// `max(round(IΛ/N), C)`.
    pub schedule_slots: Option<usize>,
    pub bcd_max_sweeps: usize,
    pub phase_mode: PhaseMode,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            area_x: 300.0,
            area_y: 300.0,
            num_devices: 50,
            channels: 3,
            step_length: 10.0,
            max_speed: 20.0,
            activation_len: 10,
            payload: PayloadDist::Fixed { bits: 50.0 },
            seed: 0,
            uav_altitude: 50.0,
            device_height: 1.0,
            uav_start: None,
            ris_position: Vec3::new(150.0, 0.0, 1.0),
            slot_duration: 1.0,
            schedule_slots: None,
            bcd_max_sweeps: ris_optim::DEFAULT_MAX_SWEEPS,
            phase_mode: PhaseMode::Bcd,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let err = |m: String| Err(EnvError::Config(m));
        if self.horizon == 0 {
            return err("horizon must be positive".into());
        }
        if self.activation_len == 0 || self.activation_len > self.horizon {
            return err(format!(
                "activation length {} must be in 1..={}",
                self.activation_len, self.horizon
            ));
        }
        if self.channels == 0 {
            return err("channels must be positive".into());
        }
        for (name, v) in [
            ("area_x", self.area_x),
            ("area_y", self.area_y),
            ("step_length", self.step_length),
            ("max_speed", self.max_speed),
            ("uav_altitude", self.uav_altitude),
            ("slot_duration", self.slot_duration),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.step_length > self.max_speed * self.slot_duration {
            return err(format!(
                "step length {} exceeds the speed limit {} m/s",
                self.step_length, self.max_speed
            ));
        }
        if self.device_height < 0.0 || self.device_height >= self.uav_altitude {
            return err("devices must sit below the UAV".into());
        }
        match self.payload {
            PayloadDist::Fixed { bits } if !(bits > 0.0) => return err("payload must be positive".into()),
            PayloadDist::Uniform { min, max } if !(min > 0.0 && max >= min) => {
                return err("payload range must be positive and ordered".into())
            }
            _ => {}
        }
        if let Some([x, y]) = self.uav_start {
            if !(0.0..=self.area_x).contains(&x) || !(0.0..=self.area_y).contains(&y) {
                return err("UAV start lies outside the area".into());
            }
        }
        if let Some(s) = self.schedule_slots {
            if s < self.channels {
                return err(format!("schedule_slots {s} below channel count"));
            }
        }
        Ok(())
    }

    /// Mean number of simultaneously active devices, `IΛ/N`.
    pub fn mean_active(&self) -> f64 {
        self.num_devices as f64 * self.activation_len as f64 / self.horizon as f64
    }

    pub fn schedule_slots(&self) -> usize {
        self.schedule_slots
            .unwrap_or_else(|| (self.mean_active().round() as usize).max(self.channels))
    }

    pub fn start_position(&self) -> Vec3 {
        let [x, y] = self.uav_start.unwrap_or([self.area_x / 2.0, self.area_y / 2.0]);
        Vec3::new(x, y, self.uav_altitude)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoTDevice {
    pub id: usize,
    pub position: Vec3,
    /// Payload size in bits.
    pub payload: f64,
    /// First active slot (1-based, inclusive).
    pub window_start: usize,
    /// Last active slot (inclusive).
    pub deadline: usize,
    /// Bits delivered so far.
    pub uploaded: f64,
    pub served: bool,
}

impl IoTDevice {
    pub fn is_active(&self, slot: usize) -> bool {
        (self.window_start..=self.deadline).contains(&slot)
    }

    pub fn remaining(&self) -> f64 {
        (self.payload - self.uploaded).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    /// Next slot to play, 1-based; `horizon + 1` once the episode is over.
    pub slot: usize,
    pub uav: Vec3,
    pub devices: Vec<IoTDevice>,
}

impl EnvState {
    pub fn served_total(&self) -> usize {
        self.devices.iter().filter(|d| d.served).count()
    }

    pub fn served_bits(&self) -> f64 {
        self.devices.iter().filter(|d| d.served).map(|d| d.payload).sum()
    }

    /// Devices that may transmit in the current slot, most urgent first.
    pub fn eligible(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .devices
            .iter()
            .filter(|d| !d.served && d.is_active(self.slot))
            .map(|d| d.id)
            .collect();
        ids.sort_by_key(|&id| (self.devices[id].deadline, id));
        ids
    }
}

pub fn served_total(state: &EnvState) -> usize {
    state.served_total()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub reward: u32,
    pub done: bool,
    /// Bits credited to each device this slot.
    pub delivered: Vec<f64>,
    /// Schedule after masking infeasible entries.
    pub schedule: ScheduleSet,
    pub phases: PhaseConfig,
    /// UAV position after the move.
    pub uav: Vec3,
}

#[derive(Debug, Clone)]
pub struct Env {
    config: EpisodeConfig,
    radio: RadioParams,
    state: EnvState,
    positions: Vec<Vec3>,
}

impl Env {
    /// Draws a fresh episode from `config.seed`.
    pub fn reset(config: EpisodeConfig, radio: RadioParams) -> Result<Self, EnvError> {
        config.validate()?;
        radio.validate().map_err(EnvError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let last_start = config.horizon - config.activation_len + 1;
        let devices = (0..config.num_devices)
            .map(|id| {
                let x = rng.gen_range(0.0..=config.area_x);
                let y = rng.gen_range(0.0..=config.area_y);
                let window_start = rng.gen_range(1..=last_start);
                let payload = config.payload.sample(&mut rng);
                IoTDevice {
                    id,
                    position: Vec3::new(x, y, config.device_height),
                    payload,
                    window_start,
                    deadline: window_start + config.activation_len - 1,
                    uploaded: 0.0,
                    served: false,
                }
            })
            .collect();
        let state = EnvState {
            slot: 1,
            uav: config.start_position(),
            devices,
        };
        Self::from_state(config, radio, state)
    }

    /// Resumes from a snapshot.
    pub fn from_state(config: EpisodeConfig, radio: RadioParams, state: EnvState) -> Result<Self, EnvError> {
        config.validate()?;
        radio.validate().map_err(EnvError::Config)?;
        if state.devices.len() != config.num_devices {
            return Err(EnvError::State(format!(
                "{} devices in state, config expects {}",
                state.devices.len(),
                config.num_devices
            )));
        }
        if state.slot == 0 || state.slot > config.horizon + 1 {
            return Err(EnvError::State(format!("slot {} out of range", state.slot)));
        }
        if state.devices.iter().enumerate().any(|(i, d)| d.id != i) {
            return Err(EnvError::State("device ids must be 0..I in order".into()));
        }
        let positions = state.devices.iter().map(|d| d.position).collect();
        Ok(Self {
            config,
            radio,
            state,
            positions,
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn radio(&self) -> &RadioParams {
        &self.radio
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.slot > self.config.horizon
    }

    pub fn geometry(&self) -> Geometry<'_> {
        Geometry {
            uav: self.state.uav,
            ris: self.config.ris_position,
            devices: &self.positions,
        }
    }

    /// Position the UAV would reach, or its current one if the move leaves
    /// the area.
    pub fn resolve_move(&self, movement: Move) -> Vec3 {
        let (dx, dy) = movement.direction();
        let uav = self.state.uav;
        let x = uav.x + dx * self.config.step_length;
        let y = uav.y + dy * self.config.step_length;
        if (0.0..=self.config.area_x).contains(&x) && (0.0..=self.config.area_y).contains(&y) {
            Vec3::new(x, y, uav.z)
        } else {
            uav
        }
    }

    /// Drops unknown, duplicate, inactive and already served devices, then
    /// keeps at most `C` of what is left in the given order.
    pub fn mask_schedule(&self, schedule: &ScheduleSet) -> ScheduleSet {
        let slot = self.state.slot;
        let mut kept: Vec<usize> = Vec::with_capacity(self.config.channels);
        for &id in schedule.iter() {
            if kept.len() == self.config.channels {
                break;
            }
            let Some(d) = self.state.devices.get(id) else { continue };
            if d.served || !d.is_active(slot) || kept.contains(&id) {
                continue;
            }
            kept.push(id);
        }
        ScheduleSet(kept)
    }

    fn configure_ris(&self, objective: &RateObjective) -> PhaseConfig {
        let (m, q) = (self.radio.elements, self.radio.levels());
        if m == 0 || objective.links().is_empty() {
            return PhaseConfig::zeros(m, q);
        }
        match self.config.phase_mode {
            PhaseMode::Bcd => {
                let opts = BcdOptions {
                    max_sweeps: self.config.bcd_max_sweeps,
                    ..BcdOptions::default()
                };
                ris_optim::bcd_with(objective, &opts).config
            }
            PhaseMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(self.state.slot as u64);
                PhaseConfig::random(m, q, &mut rng)
            }
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeDone);
        }
        let slot = self.state.slot;
        self.state.uav = self.resolve_move(action.movement);
        let schedule = self.mask_schedule(&action.schedule);

        let objective = RateObjective::new(&schedule, &self.geometry(), &self.radio)?;
        let phases = self.configure_ris(&objective);
        let rates = objective.rates(&phases)?;

        let mut delivered = vec![0.0; self.state.devices.len()];
        let mut reward = 0;
        for (&id, &bits) in schedule.iter().zip(&rates) {
            let dev = &mut self.state.devices[id];
            dev.uploaded += bits;
            delivered[id] = bits;
            if dev.uploaded >= dev.payload {
                dev.served = true;
                reward += 1;
            }
        }
        self.state.slot += 1;
        Ok(StepResult {
            reward,
            done: slot == self.config.horizon,
            delivered,
            schedule,
            phases,
            uav: self.state.uav,
        })
    }
}

/// Joint action count `5·C(round(IΛ/N), C)`.
pub fn action_space_size(config: &EpisodeConfig) -> Result<usize, EnvError> {
    let active = config.mean_active().round() as usize;
    if active < config.channels {
        return Err(EnvError::Config(format!(
            "mean active devices {active} below channel count {}",
            config.channels
        )));
    }
    Ok(Move::ALL.len() * binomial(active, config.channels))
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Flattened joint action space: every move paired with every `C`-subset of
/// the first `S` eligible devices (deadline order). Subsets that reach past
/// the eligible devices are padding; with fewer than `C` eligible devices
/// only the first subset is legal and schedules all of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpace {
    slots: usize,
    channels: usize,
    subsets: Vec<Vec<usize>>,
}

impl ActionSpace {
    pub fn new(config: &EpisodeConfig) -> Self {
        let slots = config.schedule_slots();
        let channels = config.channels.min(slots);
        Self {
            slots,
            channels,
            subsets: combinations(slots, channels),
        }
    }

    pub fn len(&self) -> usize {
        Move::ALL.len() * self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn subsets_per_move(&self) -> usize {
        self.subsets.len()
    }

    pub fn index_of(&self, movement: Move, subset: usize) -> usize {
        movement.index() * self.subsets.len() + subset
    }

    fn subset_legal(&self, subset: &[usize], eligible: usize) -> bool {
        if eligible >= self.channels {
            subset.iter().all(|&p| p < eligible)
        } else {
            subset.iter().enumerate().all(|(i, &p)| p == i)
        }
    }

    /// Legality of every flattened index for this state.
    pub fn mask(&self, state: &EnvState) -> Vec<bool> {
        let eligible = state.eligible().len().min(self.slots);
        let per_move: Vec<bool> = self.subsets.iter().map(|s| self.subset_legal(s, eligible)).collect();
        (0..Move::ALL.len()).flat_map(|_| per_move.iter().copied()).collect()
    }

    pub fn decode(&self, index: usize, state: &EnvState) -> Action {
        let n = self.subsets.len();
        let movement = Move::ALL[index / n];
        let eligible = state.eligible();
        let schedule = self.subsets[index % n]
            .iter()
            .filter_map(|&p| if p < self.slots { eligible.get(p).copied() } else { None })
            .collect();
        Action::new(movement, schedule)
    }

    /// Flattened indices of the stop-free-schedule fallback: one per move,
    /// first subset.
    pub fn movement_only(&self) -> Vec<usize> {
        (0..Move::ALL.len()).map(|m| m * self.subsets.len()).collect()
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Every legal joint action for the current slot.
pub fn legal_actions(state: &EnvState, config: &EpisodeConfig) -> Vec<Action> {
    let space = ActionSpace::new(config);
    space
        .mask(state)
        .iter()
        .enumerate()
        .filter(|(_, &ok)| ok)
        .map(|(i, _)| space.decode(i, state))
        .collect()
}

/// Earliest-deadline-first among eligible devices, up to `C`.
pub fn edf_schedule(state: &EnvState, channels: usize) -> ScheduleSet {
    let mut ids = state.eligible();
    ids.truncate(channels);
    ScheduleSet(ids)
}
