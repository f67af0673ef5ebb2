//! Wire frames. Each websocket text message carries one frame as a single
//! JSON line tagged by `type`; unknown types and fields are rejected.

use ommbrl::drivesim::{Controls, Instruction, SimState, STATE_DIM};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Frame {
    /// Client to server: open or resume `session` (empty for a new one).
    /// Server to client: the session now running.
    Hello { session: String },
    Tick { t: u64, state: [f64; STATE_DIM], instruction_id: usize, speed_id: usize, play_flag: bool },
    Input { t: u64, steer: f64, throttle: f64, brake: f64, reverse: bool },
    /// Per-tick tracking costs of the finished episode.
    EpisodeEnd { costs: Vec<f64>, collisions: usize, missed_turns: usize },
    RoundEnd { kl_estimate_unavailable: bool, regret_gap_if_available: Option<f64> },
    Error { msg: String },
}

/// Message of the error frame sent to a second client.
pub const BUSY: &str = "busy";

impl Frame {
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("frames serialize")
    }

    pub fn decode(text: &str) -> Result<Frame> {
        let line = text.strip_suffix('\n').unwrap_or(text);
        if line.contains('\n') {
            return Err(ServiceError::Frame("one frame per line".into()));
        }
        let frame: Frame = serde_json::from_str(line).map_err(|e| ServiceError::Frame(e.to_string()))?;
        frame.validate()?;
        Ok(frame)
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(ServiceError::Frame(what.into()));
        match self {
            Frame::Input { steer, throttle, brake, .. } => {
                if !(-1.0..=1.0).contains(steer) {
                    return bad("steer outside [-1, 1]");
                }
                if !(0.0..=1.0).contains(throttle) || !(0.0..=1.0).contains(brake) {
                    return bad("throttle and brake lie in [0, 1]");
                }
            }
            Frame::Tick { state, instruction_id, speed_id, .. } => {
                if state.iter().any(|x| !x.is_finite()) {
                    return bad("non-finite state");
                }
                if Instruction::from_id(instruction_id + 7 * speed_id).is_none() || *instruction_id >= 7 {
                    return bad("unknown instruction");
                }
            }
            Frame::EpisodeEnd { costs, .. } => {
                if costs.iter().any(|c| !c.is_finite()) {
                    return bad("non-finite cost");
                }
            }
            Frame::Hello { .. } | Frame::RoundEnd { .. } | Frame::Error { .. } => {}
        }
        Ok(())
    }

    pub fn tick(t: u64, state: &SimState, instruction: Instruction, play_flag: bool) -> Frame {
        let v = state.to_vec();
        let mut arr = [0.0; STATE_DIM];
        arr.copy_from_slice(&v);
        Frame::Tick { t, state: arr, instruction_id: instruction.base as usize, speed_id: instruction.speed as usize, play_flag }
    }

    pub fn input(t: u64, c: Controls) -> Frame {
        Frame::Input { t, steer: c.steer, throttle: c.throttle, brake: c.brake, reverse: c.reverse }
    }

    pub fn error(msg: impl Into<String>) -> Frame {
        Frame::Error { msg: msg.into() }
    }
}
