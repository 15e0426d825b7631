//! Plain-text episode records.
//!
//! A record is a state snapshot plus the actions played from it, enough to
//! replay the episode bit for bit. One item per line, fields separated by
//! single spaces, in this order:
//!
//! ```text
//! ris-uav-episode 1
//! config <EpisodeConfig as one-line JSON>
//! radio <RadioParams as one-line JSON>
//! slot <next slot>
//! uav <x> <y> <z>
//! device <id> <x> <y> <z> <payload> <window_start> <deadline> <uploaded> <served 0|1>
//! action <slot> <move> <comma-separated device ids, or ->
//! outcome <slot> <reward> <uav x> <uav y>
//! ```
//!
//! `device` lines appear once per device in id order. Each `action` line is
//! followed by the `outcome` it produced. Floats are written in the shortest
//! form that parses back to the same value.

use std::fmt::Write as _;

use thiserror::Error;

use crate::channel::{RadioParams, Vec3};
use crate::env::{Action, Env, EnvError, EnvState, EpisodeConfig, IoTDevice, Move};

pub const MAGIC: &str = "ris-uav-episode";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("replay diverged at slot {slot}: {message}")]
    Diverged { slot: usize, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub slot: usize,
    pub reward: u32,
    pub uav_x: f64,
    pub uav_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub config: EpisodeConfig,
    pub radio: RadioParams,
    pub start: EnvState,
    pub actions: Vec<Action>,
    pub outcomes: Vec<Outcome>,
}

impl EpisodeRecord {
    pub fn new(env: &Env) -> Self {
        Self {
            config: env.config().clone(),
            radio: env.radio().clone(),
            start: env.state().clone(),
            actions: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    /// Steps `env` and logs the action with its outcome.
    pub fn step(&mut self, env: &mut Env, action: Action) -> Result<crate::env::StepResult, EnvError> {
        let slot = env.state().slot;
        let result = env.step(&action)?;
        self.outcomes.push(Outcome {
            slot,
            reward: result.reward,
            uav_x: result.uav.x,
            uav_y: result.uav.y,
        });
        self.actions.push(action);
        Ok(result)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n");
        // serde_json cannot fail on these plain structs
        writeln!(out, "config {}", serde_json::to_string(&self.config).unwrap()).unwrap();
        writeln!(out, "radio {}", serde_json::to_string(&self.radio).unwrap()).unwrap();
        writeln!(out, "slot {}", self.start.slot).unwrap();
        let u = self.start.uav;
        writeln!(out, "uav {} {} {}", u.x, u.y, u.z).unwrap();
        for d in &self.start.devices {
            writeln!(
                out,
                "device {} {} {} {} {} {} {} {} {}",
                d.id,
                d.position.x,
                d.position.y,
                d.position.z,
                d.payload,
                d.window_start,
                d.deadline,
                d.uploaded,
                u8::from(d.served)
            )
            .unwrap();
        }
        for (a, o) in self.actions.iter().zip(&self.outcomes) {
            let ids = if a.schedule.is_empty() {
                "-".to_string()
            } else {
                a.schedule.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
            };
            writeln!(out, "action {} {} {}", o.slot, a.movement.name(), ids).unwrap();
            writeln!(out, "outcome {} {} {} {}", o.slot, o.reward, o.uav_x, o.uav_y).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ReplayError> {
        let mut config = None;
        let mut radio = None;
        let mut slot = None;
        let mut uav = None;
        let mut devices = Vec::new();
        let mut actions = Vec::new();
        let mut outcomes = Vec::new();
        let mut saw_header = false;

        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let err = |message: String| ReplayError::Parse { line, message };
            let raw = raw.trim_end();
            if raw.is_empty() {
                continue;
            }
            let (key, rest) = raw.split_once(' ').unwrap_or((raw, ""));
            if !saw_header {
                if key != MAGIC {
                    return Err(err("missing episode header".into()));
                }
                let v: u32 = rest.trim().parse().map_err(|_| err("bad version".into()))?;
                if v != VERSION {
                    return Err(err(format!("unsupported version {v}")));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = rest.split(' ').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")));
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad integer `{s}`")));
            let want = |k: usize| {
                if fields.len() == k {
                    Ok(())
                } else {
                    Err(err(format!("`{key}` expects {k} fields, got {}", fields.len())))
                }
            };
            match key {
                "config" => config = Some(serde_json::from_str(rest).map_err(|e| err(e.to_string()))?),
                "radio" => radio = Some(serde_json::from_str(rest).map_err(|e| err(e.to_string()))?),
                "slot" => {
                    want(1)?;
                    slot = Some(int(fields[0])?);
                }
                "uav" => {
                    want(3)?;
                    uav = Some(Vec3::new(num(fields[0])?, num(fields[1])?, num(fields[2])?));
                }
                "device" => {
                    want(9)?;
                    devices.push(IoTDevice {
                        id: int(fields[0])?,
                        position: Vec3::new(num(fields[1])?, num(fields[2])?, num(fields[3])?),
                        payload: num(fields[4])?,
                        window_start: int(fields[5])?,
                        deadline: int(fields[6])?,
                        uploaded: num(fields[7])?,
                        served: match fields[8] {
                            "0" => false,
                            "1" => true,
                            other => return Err(err(format!("bad served flag `{other}`"))),
                        },
                    });
                }
                "action" => {
                    want(3)?;
                    let movement = Move::from_name(fields[1]).ok_or_else(|| err(format!("unknown move `{}`", fields[1])))?;
                    let schedule = if fields[2] == "-" {
                        Vec::new()
                    } else {
                        fields[2].split(',').map(int).collect::<Result<_, _>>()?
                    };
                    actions.push(Action::new(movement, schedule));
                }
                "outcome" => {
                    want(4)?;
                    outcomes.push(Outcome {
                        slot: int(fields[0])?,
                        reward: fields[1].parse().map_err(|_| err("bad reward".into()))?,
                        uav_x: num(fields[2])?,
                        uav_y: num(fields[3])?,
                    });
                }
                other => return Err(err(format!("unknown record `{other}`"))),
            }
        }
        let missing = |what: &str| ReplayError::Parse {
            line: 0,
            message: format!("missing `{what}` line"),
        };
        if !saw_header {
            return Err(missing(MAGIC));
        }
        if actions.len() != outcomes.len() {
            return Err(ReplayError::Parse {
                line: 0,
                message: "every action needs an outcome".into(),
            });
        }
        Ok(Self {
            config: config.ok_or_else(|| missing("config"))?,
            radio: radio.ok_or_else(|| missing("radio"))?,
            start: EnvState {
                slot: slot.ok_or_else(|| missing("slot"))?,
                uav: uav.ok_or_else(|| missing("uav"))?,
                devices,
            },
            actions,
            outcomes,
        })
    }

    /// Re-runs the action log from the snapshot and checks every outcome.
    pub fn replay(&self) -> Result<Env, ReplayError> {
        let mut env = Env::from_state(self.config.clone(), self.radio.clone(), self.start.clone())?;
        for (action, expected) in self.actions.iter().zip(&self.outcomes) {
            let slot = env.state().slot;
            let r = env.step(action)?;
            let got = Outcome {
                slot,
                reward: r.reward,
                uav_x: r.uav.x,
                uav_y: r.uav.y,
            };
            if got != *expected {
                return Err(ReplayError::Diverged {
                    slot,
                    message: format!("expected {expected:?}, got {got:?}"),
                });
            }
        }
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::edf_schedule;

    fn scripted(cfg: EpisodeConfig) -> (EpisodeRecord, Env) {
        let radio = RadioParams {
            elements: 6,
            ..RadioParams::default()
        };
        let mut env = Env::reset(cfg, radio).unwrap();
        let mut rec = EpisodeRecord::new(&env);
        let mut k = 0;
        while !env.is_done() {
            let sched = edf_schedule(env.state(), 3);
            rec.step(&mut env, Action { movement: Move::ALL[k % 5], schedule: sched }).unwrap();
            k += 1;
        }
        (rec, env)
    }

    fn cfg() -> EpisodeConfig {
        EpisodeConfig {
            num_devices: 5,
            horizon: 30,
            activation_len: 8,
            seed: 4,
            ..EpisodeConfig::default()
        }
    }

    #[test]
    fn text_round_trip_and_replay() {
        let (rec, env) = scripted(cfg());
        let parsed = EpisodeRecord::parse(&rec.to_text()).unwrap();
        assert_eq!(parsed, rec);
        let replayed = parsed.replay().unwrap();
        assert_eq!(replayed.state(), env.state());
    }

    #[test]
    fn resumes_from_mid_episode_snapshot() {
        let radio = RadioParams {
            elements: 6,
            ..RadioParams::default()
        };
        let mut env = Env::reset(cfg(), radio).unwrap();
        for _ in 0..12 {
            let sched = edf_schedule(env.state(), 3);
            env.step(&Action { movement: Move::Right, schedule: sched }).unwrap();
        }
        let mut rec = EpisodeRecord::new(&env);
        let text_snapshot = EpisodeRecord::parse(&rec.to_text()).unwrap();
        let mut twin = Env::from_state(text_snapshot.config, text_snapshot.radio, text_snapshot.start).unwrap();
        while !env.is_done() {
            let sched = edf_schedule(env.state(), 3);
            let a = Action { movement: Move::Forward, schedule: sched };
            let r1 = rec.step(&mut env, a.clone()).unwrap();
            let r2 = twin.step(&a).unwrap();
            assert_eq!(r1, r2);
        }
        assert_eq!(env.state(), twin.state());
        assert_eq!(EpisodeRecord::parse(&rec.to_text()).unwrap().replay().unwrap().state(), env.state());
    }

    #[test]
    fn tampered_record_diverges() {
        let (rec, _) = scripted(cfg());
        let text = rec.to_text().replacen("action 1 left", "action 1 right", 1);
        let parsed = EpisodeRecord::parse(&text).unwrap();
        assert!(matches!(parsed.replay(), Err(ReplayError::Diverged { slot: 1, .. })));
    }

    #[test]
    fn rejects_garbage() {
        assert!(EpisodeRecord::parse("hello").is_err());
        assert!(EpisodeRecord::parse("ris-uav-episode 2\n").is_err());
        let (rec, _) = scripted(cfg());
        let text = rec.to_text().replacen("slot 1", "slot x", 1);
        assert!(matches!(EpisodeRecord::parse(&text), Err(ReplayError::Parse { .. })));
    }
}
