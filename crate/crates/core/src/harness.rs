//! Experiment driver: the proposed method and its baselines, parameter
//! sweeps over seeds, and CSV / plot-data output.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{self, AgentError, CurvePoint, Hyperparams, NetParams, TrainConfig, TrainOutcome};
use crate::channel::{RadioParams, Vec3};
use crate::energy::{self, UavPowerParams};
use crate::env::{edf_schedule, Action, ActionSpace, Env, EnvError, EpisodeConfig, Move, PayloadDist, PhaseMode};
use crate::replay::EpisodeRecord;
use crate::ris_optim::PhaseConfig;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("policy {0} needs trained parameters")]
    MissingCheckpoint(PolicyKind),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Learned trajectory and scheduling, BCD phases.
    DrlBcd,
    /// Uniform random moves, earliest-deadline-first scheduling, BCD phases.
    RandomWalkBcd,
    /// UAV parked at the area center, EDF scheduling, BCD phases.
    StationaryBcd,
    /// Learned trajectory, random RIS phases.
    DrlRandomTheta,
    /// Learned trajectory, no RIS.
    DrlNoRis,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::DrlBcd,
        PolicyKind::RandomWalkBcd,
        PolicyKind::StationaryBcd,
        PolicyKind::DrlRandomTheta,
        PolicyKind::DrlNoRis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::DrlBcd => "drl_bcd",
            PolicyKind::RandomWalkBcd => "random_walk_bcd",
            PolicyKind::StationaryBcd => "stationary_bcd",
            PolicyKind::DrlRandomTheta => "drl_random_theta",
            PolicyKind::DrlNoRis => "drl_no_ris",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_learned(self) -> bool {
        matches!(self, PolicyKind::DrlBcd | PolicyKind::DrlRandomTheta | PolicyKind::DrlNoRis)
    }

    /// Episode and radio settings this method runs under.
    pub fn specialize(self, episode: &EpisodeConfig, radio: &RadioParams) -> (EpisodeConfig, RadioParams) {
        let mut episode = episode.clone();
        let mut radio = radio.clone();
        match self {
            PolicyKind::DrlBcd | PolicyKind::RandomWalkBcd => episode.phase_mode = PhaseMode::Bcd,
            PolicyKind::StationaryBcd => {
                episode.phase_mode = PhaseMode::Bcd;
                episode.uav_start = None;
            }
            PolicyKind::DrlRandomTheta => episode.phase_mode = PhaseMode::Random,
            PolicyKind::DrlNoRis => radio.elements = 0,
        }
        (episode, radio)
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVar {
    /// RIS element count `M`.
    Elements,
    /// Device count `I`.
    Devices,
    /// Payload size `Z` in bits.
    PayloadBits,
}

impl SweepVar {
    pub fn name(self) -> &'static str {
        match self {
            SweepVar::Elements => "elements",
            SweepVar::Devices => "devices",
            SweepVar::PayloadBits => "payload_bits",
        }
    }

    pub fn apply(self, value: f64, episode: &mut EpisodeConfig, radio: &mut RadioParams) {
        match self {
            SweepVar::Elements => radio.elements = value as usize,
            SweepVar::Devices => episode.num_devices = value as usize,
            SweepVar::PayloadBits => episode.payload = PayloadDist::Fixed { bits: value },
        }
    }

    fn check(self, value: f64) -> Result<(), String> {
        let integral = value.fract() == 0.0 && value >= 0.0;
        match self {
            SweepVar::Elements if integral => Ok(()),
            SweepVar::Devices if integral && value >= 1.0 => Ok(()),
            SweepVar::PayloadBits if value > 0.0 => Ok(()),
            _ => Err(format!("{value} is not a valid {} value", self.name())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub variable: SweepVar,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub episode: EpisodeConfig,
    pub radio: RadioParams,
    pub power: UavPowerParams,
    pub agent: Hyperparams,
    pub training: TrainConfig,
    pub policies: Vec<PolicyKind>,
    /// Without a sweep, a single cell runs at the configured values.
    pub sweep: Option<Sweep>,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.seeds.is_empty() {
            return Err("at least one seed is required".into());
        }
        if self.policies.is_empty() {
            return Err("at least one policy is required".into());
        }
        if self.eval_episodes == 0 {
            return Err("eval_episodes must be positive".into());
        }
        self.episode.validate().map_err(|e| e.to_string())?;
        self.radio.validate()?;
        self.power.validate()?;
        self.agent.validate()?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err("sweep has no values".into());
            }
            for &v in &s.values {
                s.variable.check(v)?;
            }
        }
        Ok(())
    }

    /// `(variable name, value)` for every sweep point.
    fn points(&self) -> Vec<(Option<SweepVar>, f64)> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|&v| (Some(s.variable), v)).collect(),
            None => vec![(None, f64::NAN)],
        }
    }

    fn cell_configs(&self, var: Option<SweepVar>, value: f64, kind: PolicyKind) -> (EpisodeConfig, RadioParams) {
        let mut episode = self.episode.clone();
        let mut radio = self.radio.clone();
        if let Some(v) = var {
            v.apply(value, &mut episode, &mut radio);
        }
        kind.specialize(&episode, &radio)
    }
}

/// Layout seed of evaluation episode `k` for replicate `seed`; disjoint in
/// practice from the training layout stream.
pub fn eval_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ (0x5EED_0000_0000 + k as u64)
}

/// Chooses the next action from the current environment state.
pub enum Controller<'a> {
    Learned { params: &'a NetParams, space: ActionSpace },
    RandomWalk { rng: ChaCha8Rng },
    Stationary,
}

impl<'a> Controller<'a> {
    pub fn for_kind(kind: PolicyKind, config: &EpisodeConfig, params: Option<&'a NetParams>, seed: u64) -> Result<Self, HarnessError> {
        Ok(match kind {
            k if k.is_learned() => {
                let params = params.ok_or(HarnessError::MissingCheckpoint(k))?;
                let space = ActionSpace::new(config);
                if params.feature_len() != agent::feature_len(config) || params.action_len() != space.len() {
                    return Err(AgentError::Shape(format!(
                        "checkpoint expects {} features / {} actions, scenario has {} / {}",
                        params.feature_len(),
                        params.action_len(),
                        agent::feature_len(config),
                        space.len()
                    ))
                    .into());
                }
                Controller::Learned { params, space }
            }
            PolicyKind::RandomWalkBcd => Controller::RandomWalk {
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            _ => Controller::Stationary,
        })
    }

    pub fn act(&mut self, env: &Env) -> Action {
        match self {
            Controller::Learned { params, space } => {
                let features = agent::encode_state(env.state(), env.config());
                let mask = space.mask(env.state());
                let probs = agent::policy_forward(params, &features, &mask, &space.movement_only());
                let best = probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &p)| if p > b.1 { (i, p) } else { b })
                    .0;
                space.decode(best, env.state())
            }
            Controller::RandomWalk { rng } => Action {
                movement: Move::ALL[rng.gen_range(0..Move::ALL.len())],
                schedule: edf_schedule(env.state(), env.config().channels),
            },
            Controller::Stationary => Action {
                movement: Move::Stop,
                schedule: edf_schedule(env.state(), env.config().channels),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub served: usize,
    pub served_bits: f64,
    pub positions: Vec<Vec3>,
    pub moves: Vec<Move>,
    /// RIS configuration per slot; empty configs when there is no RIS.
    pub phases: Vec<PhaseConfig>,
    pub energy: f64,
    pub record: EpisodeRecord,
}

pub fn play_episode(mut env: Env, controller: &mut Controller<'_>, power: &UavPowerParams) -> Result<EpisodeLog, HarnessError> {
    let mut record = EpisodeRecord::new(&env);
    let mut positions = vec![env.state().uav];
    let mut moves = Vec::with_capacity(env.config().horizon);
    let mut phases = Vec::with_capacity(env.config().horizon);
    while !env.is_done() {
        let action = controller.act(&env);
        moves.push(action.movement);
        let r = record.step(&mut env, action)?;
        positions.push(r.uav);
        phases.push(r.phases);
    }
    let energy = energy::trajectory_energy(&positions, env.config().slot_duration, power);
    Ok(EpisodeLog {
        served: env.state().served_total(),
        served_bits: env.state().served_bits(),
        positions,
        moves,
        phases,
        energy,
        record,
    })
}

/// One row of results: a method evaluated at one sweep point for one
/// replicate seed, averaged over its evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sweep_var: String,
    pub value: f64,
    pub policy: PolicyKind,
    pub seed: u64,
    pub served: f64,
    pub served_frac: f64,
    pub bits: f64,
    #[serde(rename = "energy_J")]
    pub energy_j: f64,
    #[serde(rename = "eff_bits_per_J")]
    pub eff_bits_per_j: f64,
    #[serde(skip)]
    pub episodes: usize,
    #[serde(skip)]
    pub wall_time_s: f64,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
}

pub fn train_policy(kind: PolicyKind, episode: &EpisodeConfig, radio: &RadioParams, hyper: &Hyperparams, training: &TrainConfig, seed: u64) -> Result<TrainOutcome, HarnessError> {
    if !kind.is_learned() {
        return Err(HarnessError::Invalid(format!("{kind} has nothing to train")));
    }
    let (episode, radio) = kind.specialize(episode, radio);
    let tc = TrainConfig {
        seed,
        ..training.clone()
    };
    let episode = EpisodeConfig {
        seed: seed.wrapping_add(episode.seed),
        ..episode
    };
    Ok(agent::train(&episode, &radio, hyper, &tc)?)
}

/// Evaluates a method on `eval_episodes` layouts drawn for replicate `seed`.
/// `episode` and `radio` are taken as-is apart from the method's own
/// adjustments (no RIS, random phases, parked UAV).
#[allow(clippy::too_many_arguments)]
pub fn run_policy(
    kind: PolicyKind,
    episode: &EpisodeConfig,
    radio: &RadioParams,
    power: &UavPowerParams,
    eval_episodes: usize,
    seed: u64,
    params: Option<&NetParams>,
    mut on_episode: impl FnMut(usize, &EpisodeLog),
) -> Result<RunRecord, HarnessError> {
    let (episode, radio) = kind.specialize(episode, radio);
    let start = Instant::now();
    let mut served = 0.0;
    let mut bits = 0.0;
    let mut energy_total = 0.0;
    let mut eff = 0.0;
    for k in 0..eval_episodes {
        let cfg = EpisodeConfig {
            seed: eval_seed(seed, k),
            ..episode.clone()
        };
        let mut controller = Controller::for_kind(kind, &cfg, params, cfg.seed)?;
        let env = Env::reset(cfg, radio.clone())?;
        let log = play_episode(env, &mut controller, power)?;
        served += log.served as f64;
        bits += log.served_bits;
        energy_total += log.energy;
        eff += energy::energy_efficiency(log.served_bits, log.energy);
        on_episode(k, &log);
    }
    let n = eval_episodes.max(1) as f64;
    Ok(RunRecord {
        sweep_var: String::new(),
        value: f64::NAN,
        policy: kind,
        seed,
        served: served / n,
        served_frac: served / n / episode.num_devices.max(1) as f64,
        bits: bits / n,
        energy_j: energy_total / n,
        eff_bits_per_j: eff / n,
        episodes: eval_episodes,
        wall_time_s: start.elapsed().as_secs_f64(),
        curve: Vec::new(),
    })
}

/// Runs every (sweep value, policy, seed) cell; learned methods are trained
/// in their cell first. Cells run in parallel, rows come back in
/// value-policy-seed order.
pub fn sweep(config: &ExperimentConfig) -> Result<Vec<RunRecord>, HarnessError> {
    config.validate().map_err(HarnessError::Invalid)?;
    let mut cells = Vec::new();
    for (var, value) in config.points() {
        for &kind in &config.policies {
            for &seed in &config.seeds {
                cells.push((var, value, kind, seed));
            }
        }
    }
    cells
        .into_par_iter()
        .map(|(var, value, kind, seed)| {
            let start = Instant::now();
            let (episode, radio) = config.cell_configs(var, value, kind);
            let trained = if kind.is_learned() {
                Some(train_policy(kind, &episode, &radio, &config.agent, &config.training, seed)?)
            } else {
                None
            };
            let mut rec = run_policy(
                kind,
                &episode,
                &radio,
                &config.power,
                config.eval_episodes,
                seed,
                trained.as_ref().map(|t| &t.params),
                |_, _| {},
            )?;
            rec.sweep_var = var.map_or("none", SweepVar::name).to_string();
            rec.value = if var.is_some() { value } else { 0.0 };
            rec.wall_time_s = start.elapsed().as_secs_f64();
            if let Some(t) = trained {
                rec.curve = t.curve;
            }
            Ok(rec)
        })
        .collect()
}

/// Seed-averaged view of one (value, policy) group.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub sweep_var: String,
    pub value: f64,
    pub policy: PolicyKind,
    pub samples: usize,
    pub served: f64,
    pub served_frac: f64,
    pub bits: f64,
    pub energy_j: f64,
    pub eff_bits_per_j: f64,
}

pub fn aggregate(records: &[RunRecord]) -> Vec<Aggregate> {
    let mut out: Vec<Aggregate> = Vec::new();
    for r in records {
        let found = out
            .iter_mut()
            .find(|a| a.sweep_var == r.sweep_var && a.value == r.value && a.policy == r.policy);
        let a = match found {
            Some(a) => a,
            None => {
                out.push(Aggregate {
                    sweep_var: r.sweep_var.clone(),
                    value: r.value,
                    policy: r.policy,
                    samples: 0,
                    served: 0.0,
                    served_frac: 0.0,
                    bits: 0.0,
                    energy_j: 0.0,
                    eff_bits_per_j: 0.0,
                });
                out.last_mut().unwrap()
            }
        };
        a.samples += 1;
        a.served += r.served;
        a.served_frac += r.served_frac;
        a.bits += r.bits;
        a.energy_j += r.energy_j;
        a.eff_bits_per_j += r.eff_bits_per_j;
    }
    for a in &mut out {
        let n = a.samples as f64;
        a.served /= n;
        a.served_frac /= n;
        a.bits /= n;
        a.energy_j /= n;
        a.eff_bits_per_j /= n;
    }
    out
}

pub const CSV_HEADER: &str = "sweep_var,value,policy,seed,served,served_frac,bits,energy_J,eff_bits_per_J";

pub fn write_csv<W: Write>(records: &[RunRecord], writer: W) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<RunRecord>, HarnessError> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(HarnessError::Invalid(format!("unexpected CSV header `{}`", header.join(","))));
    }
    let rows = r
        .deserialize::<RunRecord>()
        .map(|row| {
            row.map(|mut rec| {
                rec.episodes = 0;
                rec
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rows)
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], writer: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["episode", "return", "policy_loss", "value_loss", "entropy"])?;
    for c in curve {
        w.write_record([
            c.episode.to_string(),
            c.episode_return.to_string(),
            c.policy_loss.to_string(),
            c.value_loss.to_string(),
            c.entropy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Whitespace-separated columns for gnuplot: the sweep value, then one
/// column per policy holding `metric` averaged over seeds.
pub fn plot_table(records: &[RunRecord], metric: fn(&Aggregate) -> f64) -> String {
    let agg = aggregate(records);
    let mut policies: Vec<PolicyKind> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for a in &agg {
        if !policies.contains(&a.policy) {
            policies.push(a.policy);
        }
        if !values.contains(&a.value) {
            values.push(a.value);
        }
    }
    let mut out = String::from("# value");
    for p in &policies {
        out += &format!(" {}", p.name());
    }
    out.push('\n');
    for v in values {
        out += &v.to_string();
        for p in &policies {
            let cell = agg
                .iter()
                .find(|a| a.value == v && a.policy == *p)
                .map_or("nan".to_string(), |a| metric(a).to_string());
            out += &format!(" {cell}");
        }
        out.push('\n');
    }
    out
}

/// Writes `results.csv`, per-figure plot data and learning curves to `dir`.
pub fn emit(records: &[RunRecord], dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_csv(records, fs::File::create(dir.join("results.csv"))?)?;
    fs::write(dir.join("plot_served.dat"), plot_table(records, |a| a.served))?;
    fs::write(dir.join("plot_served_frac.dat"), plot_table(records, |a| a.served_frac))?;
    fs::write(dir.join("plot_efficiency.dat"), plot_table(records, |a| a.eff_bits_per_j))?;
    for r in records.iter().filter(|r| !r.curve.is_empty()) {
        let name = format!("curve_{}_{}_{}_{}.csv", r.policy.name(), r.sweep_var, r.value, r.seed);
        write_curve_csv(&r.curve, fs::File::create(dir.join(name))?)?;
    }
    Ok(())
}
