//! PPO agent over the flattened joint action space.
//!
//! Policy and value function are separate three-layer perceptrons (tanh
//! hidden units). Gradients are computed by hand; the tests check them
//! against central finite differences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{RadioParams, Vec3};
use crate::env::{ActionSpace, Env, EnvError, EnvState, EpisodeConfig};

pub const HIDDEN_UNITS: usize = 64;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("rollout buffer is empty")]
    EmptyBuffer,
    #[error("non-finite {what} during update (policy loss {policy_loss}, value loss {value_loss})")]
    NonFinite {
        what: &'static str,
        policy_loss: f64,
        value_loss: f64,
    },
    #[error("network shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Affine layer, `y = W x + b` with `W` stored row-major (`outputs × inputs`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `±scale/sqrt(fan_in)`, zero bias.
    pub fn random<R: Rng>(inputs: usize, outputs: usize, scale: f64, rng: &mut R) -> Self {
        let bound = scale / (inputs.max(1) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.gen_range(-bound..=bound)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Three affine layers with tanh after the first two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

struct MlpTrace {
    /// Input to each layer; entries 1 and 2 are tanh outputs.
    inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Mlp {
    pub fn new<R: Rng>(inputs: usize, hidden: usize, outputs: usize, output_scale: f64, rng: &mut R) -> Self {
        Self {
            layers: vec![
                Dense::random(inputs, hidden, 1.0, rng),
                Dense::random(hidden, hidden, 1.0, rng),
                Dense::random(hidden, outputs, output_scale, rng),
            ],
        }
    }

    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            layers: vec![
                Dense::zeros(inputs, hidden),
                Dense::zeros(hidden, hidden),
                Dense::zeros(hidden, outputs),
            ],
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).output
    }

    fn trace(&self, x: &[f64]) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(&cur);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut cur, out));
        }
        MlpTrace { inputs, output: cur }
    }

    /// Adds `d loss / d params` into `grads` given `d loss / d output`.
    fn backward(&self, trace: &MlpTrace, grad_out: &[f64], grads: &mut Mlp) {
        let mut delta = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &trace.inputs[i];
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(w, x)| *w += d * x);
            }
            if i == 0 {
                break;
            }
            // back through W, then through tanh (input[i] = tanh(pre))
            let mut next = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                next.iter_mut().zip(row).for_each(|(n, w)| *n += d * w);
            }
            next.iter_mut().zip(input).for_each(|(n, a)| *n *= 1.0 - a * a);
            delta = next;
        }
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }
}

/// Policy and value networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub policy: Mlp,
    pub value: Mlp,
}

impl NetParams {
    pub fn new(features: usize, actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            // small output layer so the initial policy is close to uniform
            policy: Mlp::new(features, HIDDEN_UNITS, actions, 0.01, &mut rng),
            value: Mlp::new(features, HIDDEN_UNITS, 1, 1.0, &mut rng),
        }
    }

    pub fn zeros(features: usize, actions: usize) -> Self {
        Self {
            policy: Mlp::zeros(features, HIDDEN_UNITS, actions),
            value: Mlp::zeros(features, HIDDEN_UNITS, 1),
        }
    }

    pub fn feature_len(&self) -> usize {
        self.policy.input_len()
    }

    pub fn action_len(&self) -> usize {
        self.policy.output_len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub gamma: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Episodes collected between updates.
    pub episodes_per_update: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            gamma: 0.08,
            clip: 0.02,
            epochs: 4,
            episodes_per_update: 8,
            minibatch: 64,
            value_coef: 0.5,
            entropy_coef: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if !(self.clip > 0.0) || !(self.learning_rate > 0.0) {
            return Err("clip and learning rate must be positive".into());
        }
        if self.epochs == 0 || self.episodes_per_update == 0 || self.minibatch == 0 {
            return Err("epochs, episodes_per_update and minibatch must be positive".into());
        }
        Ok(())
    }
}

/// Features: UAV position and slot progress, then per device position,
/// window start/end relative to the current slot, remaining payload
/// fraction and an eligibility flag. Everything is scaled to roughly [-1, 1].
pub fn encode_state(state: &EnvState, config: &EpisodeConfig) -> Vec<f64> {
    let horizon = config.horizon as f64;
    let slot = state.slot as f64;
    let mut f = Vec::with_capacity(feature_len(config));
    f.push(state.uav.x / config.area_x);
    f.push(state.uav.y / config.area_y);
    f.push(slot / horizon);
    for d in &state.devices {
        let eligible = !d.served && d.is_active(state.slot);
        f.push(d.position.x / config.area_x);
        f.push(d.position.y / config.area_y);
        f.push((d.window_start as f64 - slot) / horizon);
        f.push((d.deadline as f64 - slot) / horizon);
        f.push(d.remaining() / d.payload);
        f.push(if eligible { 1.0 } else { 0.0 });
    }
    f
}

pub const UAV_FEATURES: usize = 3;
pub const DEVICE_FEATURES: usize = 6;

pub fn feature_len(config: &EpisodeConfig) -> usize {
    UAV_FEATURES + DEVICE_FEATURES * config.num_devices
}

/// Recovers horizontal UAV and device positions from a feature vector.
pub fn decode_positions(features: &[f64], config: &EpisodeConfig) -> (Vec3, Vec<(f64, f64)>) {
    let uav = Vec3::new(features[0] * config.area_x, features[1] * config.area_y, config.uav_altitude);
    let devices = features[UAV_FEATURES..]
        .chunks_exact(DEVICE_FEATURES)
        .map(|c| (c[0] * config.area_x, c[1] * config.area_y))
        .collect();
    (uav, devices)
}

/// Softmax restricted to `mask`; with nothing legal, uniform over `fallback`.
pub fn masked_softmax(logits: &[f64], mask: &[bool], fallback: &[usize]) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(z, _)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let p = 1.0 / fallback.len() as f64;
        fallback.iter().for_each(|&i| probs[i] = p);
        return probs;
    }
    let mut total = 0.0;
    for ((p, z), &m) in probs.iter_mut().zip(logits).zip(mask) {
        if m {
            *p = (z - max).exp();
            total += *p;
        }
    }
    probs.iter_mut().for_each(|p| *p /= total);
    probs
}

pub fn policy_forward(params: &NetParams, features: &[f64], mask: &[bool], fallback: &[usize]) -> Vec<f64> {
    masked_softmax(&params.policy.forward(features), mask, fallback)
}

pub fn value_forward(params: &NetParams, features: &[f64]) -> f64 {
    params.value.forward(features)[0]
}

fn masked_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub features: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// True on the last step of an episode.
    pub dones: Vec<bool>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(&mut self, features: Vec<f64>, mask: Vec<bool>, action: usize, log_prob: f64, value: f64, reward: f64, done: bool) {
        self.features.push(features);
        self.masks.push(mask);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.values.push(value);
        self.rewards.push(reward);
        self.dones.push(done);
    }

    pub fn append(&mut self, mut other: RolloutBuffer) {
        self.features.append(&mut other.features);
        self.masks.append(&mut other.masks);
        self.actions.append(&mut other.actions);
        self.log_probs.append(&mut other.log_probs);
        self.values.append(&mut other.values);
        self.rewards.append(&mut other.rewards);
        self.dones.append(&mut other.dones);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    /// Discounted return from each step to the end of its episode.
    pub returns: Vec<f64>,
    /// `return - value` before normalization.
    pub raw: Vec<f64>,
    /// Zero-mean, unit-variance advantages over the batch.
    pub normalized: Vec<f64>,
}

/// Monte-Carlo returns and advantages; an unterminated tail is treated as
/// ending at the buffer end.
pub fn compute_advantages(buffer: &RolloutBuffer, gamma: f64) -> Result<Advantages, AgentError> {
    if buffer.is_empty() {
        return Err(AgentError::EmptyBuffer);
    }
    let n = buffer.len();
    let mut returns = vec![0.0; n];
    let mut running = 0.0;
    for i in (0..n).rev() {
        if buffer.dones[i] {
            running = 0.0;
        }
        running = buffer.rewards[i] + gamma * running;
        returns[i] = running;
    }
    let raw: Vec<f64> = returns.iter().zip(&buffer.values).map(|(g, v)| g - v).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let var = raw.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let normalized = raw
        .iter()
        .map(|a| if std > 1e-12 { (a - mean) / std } else { 0.0 })
        .collect();
    Ok(Advantages {
        returns,
        raw,
        normalized,
    })
}

/// Clipped surrogate `min(ρÂ, clip(ρ, 1-ε, 1+ε)Â)` and its derivative in `ρ`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// One minibatch worth of training targets.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub buffer: &'a RolloutBuffer,
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
    pub indices: &'a [usize],
}

/// Mean PPO loss over the batch and its gradient with respect to both
/// networks. `fallback` is the movement-only index list used when a mask is
/// empty.
pub fn loss_and_grad(params: &NetParams, batch: &Batch<'_>, hyper: &Hyperparams, fallback: &[usize]) -> (f64, LossStats, NetParams) {
    let mut grads = NetParams {
        policy: params.policy.zeros_like(),
        value: params.value.zeros_like(),
    };
    let mut stats = LossStats::default();
    let scale = 1.0 / batch.indices.len() as f64;
    let mut total = 0.0;
    for &i in batch.indices {
        let x = &batch.buffer.features[i];
        let mask = &batch.buffer.masks[i];
        let action = batch.buffer.actions[i];
        let adv = batch.advantages[i];

        let ptrace = params.policy.trace(x);
        let probs = masked_softmax(&ptrace.output, mask, fallback);
        let any_legal = mask.iter().any(|&m| m);
        let logp = probs[action].ln();
        let ratio = (logp - batch.buffer.log_probs[i]).exp();
        let (surr, dsurr_dratio) = clipped_surrogate(ratio, adv, hyper.clip);
        let entropy = masked_entropy(&probs);

        let vtrace = params.value.trace(x);
        let v = vtrace.output[0];
        let verr = v - batch.returns[i];

        total += scale * (-surr + hyper.value_coef * verr * verr - hyper.entropy_coef * entropy);
        stats.policy_loss -= scale * surr;
        stats.value_loss += scale * verr * verr;
        stats.entropy += scale * entropy;
        stats.approx_kl += scale * (batch.buffer.log_probs[i] - logp);
        if dsurr_dratio == 0.0 && adv != 0.0 {
            stats.clip_fraction += scale;
        }

        if any_legal {
            // d/dz_k of log p_a = 1[k=a] - p_k ; of H = -p_k (ln p_k + H)
            let dlogp = dsurr_dratio * ratio;
            let grad_logits: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    if !mask[k] {
                        return 0.0;
                    }
                    let onehot = if k == action { 1.0 } else { 0.0 };
                    let dh = if p > 0.0 { -p * (p.ln() + entropy) } else { 0.0 };
                    scale * (-dlogp * (onehot - p) - hyper.entropy_coef * dh)
                })
                .collect();
            params.policy.backward(&ptrace, &grad_logits, &mut grads.policy);
        }
        params
            .value
            .backward(&vtrace, &[scale * 2.0 * hyper.value_coef * verr], &mut grads.value);
    }
    (total, stats, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Mlp, grads: &Mlp, hyper: &Hyperparams) {
        self.t += 1;
        let (b1, b2) = (hyper.adam_beta1, hyper.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .params_mut()
            .zip(grads.params())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= hyper.learning_rate * (*m / c1) / ((*v / c2).sqrt() + hyper.adam_eps);
        }
    }
}

/// Trainable agent: current networks plus optimizer state.
#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub params: NetParams,
    policy_opt: AdamState,
    value_opt: AdamState,
    pub hyper: Hyperparams,
    pub space: ActionSpace,
    rng: ChaCha8Rng,
}

impl PpoAgent {
    pub fn new(config: &EpisodeConfig, hyper: Hyperparams, seed: u64) -> Self {
        let space = ActionSpace::new(config);
        let params = NetParams::new(feature_len(config), space.len(), seed);
        Self::with_params(params, space, hyper, seed)
    }

    pub fn with_params(params: NetParams, space: ActionSpace, hyper: Hyperparams, seed: u64) -> Self {
        let policy_opt = AdamState::new(params.policy.param_count());
        let value_opt = AdamState::new(params.value.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        Self {
            params,
            policy_opt,
            value_opt,
            hyper,
            space,
            rng,
        }
    }

    /// Clipped-surrogate update over the buffer. The networks are left
    /// untouched if anything non-finite shows up.
    pub fn update(&mut self, buffer: &RolloutBuffer) -> Result<LossStats, AgentError> {
        let adv = compute_advantages(buffer, self.hyper.gamma)?;
        let fallback = self.space.movement_only();
        let mut params = self.params.clone();
        let mut popt = self.policy_opt.clone();
        let mut vopt = self.value_opt.clone();
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        let mut stats = LossStats::default();
        let mut batches = 0usize;
        for _ in 0..self.hyper.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.hyper.minibatch) {
                let batch = Batch {
                    buffer,
                    advantages: &adv.normalized,
                    returns: &adv.returns,
                    indices: chunk,
                };
                let (loss, s, grads) = loss_and_grad(&params, &batch, &self.hyper, &fallback);
                if !loss.is_finite() {
                    return Err(AgentError::NonFinite {
                        what: "loss",
                        policy_loss: s.policy_loss,
                        value_loss: s.value_loss,
                    });
                }
                popt.step(&mut params.policy, &grads.policy, &self.hyper);
                vopt.step(&mut params.value, &grads.value, &self.hyper);
                stats.policy_loss += s.policy_loss;
                stats.value_loss += s.value_loss;
                stats.entropy += s.entropy;
                stats.approx_kl += s.approx_kl;
                stats.clip_fraction += s.clip_fraction;
                batches += 1;
            }
        }
        if !params.policy.is_finite() || !params.value.is_finite() {
            return Err(AgentError::NonFinite {
                what: "parameters",
                policy_loss: stats.policy_loss,
                value_loss: stats.value_loss,
            });
        }
        let n = batches.max(1) as f64;
        stats.policy_loss /= n;
        stats.value_loss /= n;
        stats.entropy /= n;
        stats.approx_kl /= n;
        stats.clip_fraction /= n;
        self.params = params;
        self.policy_opt = popt;
        self.value_opt = vopt;
        Ok(stats)
    }
}

/// One-shot update of `params` from a filled buffer.
pub fn ppo_update(params: &NetParams, buffer: &RolloutBuffer, hyper: &Hyperparams, space: &ActionSpace, seed: u64) -> Result<(NetParams, LossStats), AgentError> {
    let mut agent = PpoAgent::with_params(params.clone(), space.clone(), hyper.clone(), seed);
    let stats = agent.update(buffer)?;
    Ok((agent.params, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSelection {
    Sample,
    Greedy,
}

/// What happened in one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub episode_return: f64,
    pub served: usize,
    pub served_bits: f64,
    /// UAV position at the start and after every slot.
    pub positions: Vec<Vec3>,
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0
}

/// Plays one episode with the given networks, optionally recording it.
pub fn run_episode<R: Rng>(
    env: &mut Env,
    params: &NetParams,
    space: &ActionSpace,
    selection: ActionSelection,
    rng: &mut R,
    mut buffer: Option<&mut RolloutBuffer>,
) -> Result<EpisodeSummary, AgentError> {
    let fallback = space.movement_only();
    let mut positions = vec![env.state().uav];
    let mut total = 0.0;
    while !env.is_done() {
        let features = encode_state(env.state(), env.config());
        let mask = space.mask(env.state());
        let probs = policy_forward(params, &features, &mask, &fallback);
        let index = match selection {
            ActionSelection::Sample => sample_index(&probs, rng),
            ActionSelection::Greedy => argmax(&probs),
        };
        let action = space.decode(index, env.state());
        let result = env.step(&action)?;
        positions.push(result.uav);
        total += result.reward as f64;
        if let Some(buf) = buffer.as_deref_mut() {
            let value = value_forward(params, &features);
            buf.push(features, mask, index, probs[index].ln(), value, result.reward as f64, result.done);
        }
    }
    Ok(EpisodeSummary {
        episode_return: total,
        served: env.state().served_total(),
        served_bits: env.state().served_bits(),
        positions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Draw a new device layout every episode instead of replaying the
    /// configured one.
    pub randomize_layout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 800,
            seed: 0,
            randomize_layout: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub episode_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub curve: Vec<CurvePoint>,
}

/// Layout seed of training episode `k`.
pub fn episode_seed(base: u64, episode: usize, randomize: bool) -> u64 {
    if randomize {
        base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(episode as u64 + 1)
    } else {
        base
    }
}

/// Batched PPO training. Episodes within a batch are rolled out in
/// parallel, each with its own seeded generator, so results do not depend
/// on thread scheduling.
pub fn train(env_config: &EpisodeConfig, radio: &RadioParams, hyper: &Hyperparams, train_cfg: &TrainConfig) -> Result<TrainOutcome, AgentError> {
    hyper.validate().map_err(|e| AgentError::Env(EnvError::Config(e)))?;
    env_config.validate()?;
    let mut agent = PpoAgent::new(env_config, hyper.clone(), train_cfg.seed);
    let mut curve = Vec::with_capacity(train_cfg.episodes);
    let mut start = 0;
    while start < train_cfg.episodes {
        let end = (start + hyper.episodes_per_update).min(train_cfg.episodes);
        let rollouts = (start..end)
            .into_par_iter()
            .map(|k| {
                let cfg = EpisodeConfig {
                    seed: episode_seed(env_config.seed, k, train_cfg.randomize_layout),
                    ..env_config.clone()
                };
                let mut env = Env::reset(cfg, radio.clone())?;
                let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
                rng.set_stream(k as u64);
                let mut buf = RolloutBuffer::default();
                let summary = run_episode(&mut env, &agent.params, &agent.space, ActionSelection::Sample, &mut rng, Some(&mut buf))?;
                Ok((summary, buf))
            })
            .collect::<Result<Vec<_>, AgentError>>()?;
        let mut buffer = RolloutBuffer::default();
        let mut returns = Vec::with_capacity(rollouts.len());
        for (summary, buf) in rollouts {
            returns.push(summary.episode_return);
            buffer.append(buf);
        }
        let stats = agent.update(&buffer)?;
        for (k, r) in (start..end).zip(returns) {
            curve.push(CurvePoint {
                episode: k,
                episode_return: r,
                policy_loss: stats.policy_loss,
                value_loss: stats.value_loss,
                entropy: stats.entropy,
            });
        }
        start = end;
    }
    Ok(TrainOutcome {
        params: agent.params,
        curve,
    })
}

const CHECKPOINT_MAGIC: &str = "ris-uav-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Text checkpoint: a header line, then for each network its name and layer
/// count, and for each layer a shape line followed by one line of weights
/// and one of biases. Floats use the shortest representation that parses
/// back to the same bits.
pub fn write_checkpoint(params: &NetParams) -> String {
    let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
    for (name, net) in [("policy", &params.policy), ("value", &params.value)] {
        out += &format!("net {name} {}\n", net.layers.len());
        for l in &net.layers {
            out += &format!("layer {} {}\n", l.inputs, l.outputs);
            out += &join_floats("w", &l.weights);
            out += &join_floats("b", &l.bias);
        }
    }
    out
}

fn join_floats(tag: &str, values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20 + 4);
    s.push_str(tag);
    for v in values {
        s.push(' ');
        s.push_str(&v.to_string());
    }
    s.push('\n');
    s
}

pub fn read_checkpoint(text: &str) -> Result<NetParams, AgentError> {
    let bad = |m: String| AgentError::Checkpoint(m);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing header".into()));
    }
    let version: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut nets = Vec::new();
    for expected in ["policy", "value"] {
        let line = lines.next().ok_or_else(|| bad(format!("missing {expected} net")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 || f[0] != "net" || f[1] != expected {
            return Err(bad(format!("expected `net {expected} <layers>`, got `{line}`")));
        }
        let count: usize = f[2].parse().map_err(|_| bad(format!("bad layer count `{}`", f[2])))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let shape = lines.next().ok_or_else(|| bad("missing layer".into()))?;
            let s: Vec<&str> = shape.split_whitespace().collect();
            if s.len() != 3 || s[0] != "layer" {
                return Err(bad(format!("bad layer line `{shape}`")));
            }
            let inputs: usize = s[1].parse().map_err(|_| bad("bad layer inputs".into()))?;
            let outputs: usize = s[2].parse().map_err(|_| bad("bad layer outputs".into()))?;
            let weights = parse_floats(lines.next(), "w", inputs * outputs)?;
            let bias = parse_floats(lines.next(), "b", outputs)?;
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(AgentError::Shape(format!("{expected}: layer widths {} and {} do not chain", w[0].outputs, w[1].inputs)));
            }
        }
        nets.push(Mlp { layers });
    }
    let value = nets.pop().unwrap();
    let policy = nets.pop().unwrap();
    if policy.input_len() != value.input_len() || value.output_len() != 1 {
        return Err(AgentError::Shape("policy and value networks disagree".into()));
    }
    Ok(NetParams { policy, value })
}

fn parse_floats(line: Option<&str>, tag: &str, expected: usize) -> Result<Vec<f64>, AgentError> {
    let line = line.ok_or_else(|| AgentError::Checkpoint(format!("missing `{tag}` line")))?;
    let mut it = line.split_whitespace();
    if it.next() != Some(tag) {
        return Err(AgentError::Checkpoint(format!("expected `{tag}` line")));
    }
    let values = it
        .map(|v| v.parse::<f64>().map_err(|_| AgentError::Checkpoint(format!("bad float `{v}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != expected {
        return Err(AgentError::Checkpoint(format!("`{tag}` has {} values, expected {expected}", values.len())));
    }
    Ok(values)
}
