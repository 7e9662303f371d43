//! Cosine-annealed weighting of the alignment loss.

use crate::error::{Error, Result};

/// Which end of the schedule carries the weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// λ grows from 0 to `lambda_max` (detection-first curriculum).
    Up,
    /// λ shrinks from `lambda_max` to 0 (alignment-first curriculum).
    Down,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            other => Err(Error::Parameter(format!(
                "unknown schedule direction {other:?} (expected up|down)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub lambda_max: f64,
    pub direction: Direction,
}

impl ScheduleConfig {
    pub fn new(total_steps: u64, lambda_max: f64, direction: Direction) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Parameter("schedule needs total_steps >= 1".into()));
        }
        if lambda_max < 0.0 {
            return Err(Error::Parameter("lambda_max must be nonnegative".into()));
        }
        Ok(Self { total_steps, lambda_max, direction })
    }
}

/// `λ(t)`; `t` past the end clamps to the endpoint.
pub fn lambda_schedule(t: u64, cfg: &ScheduleConfig) -> f64 {
    let t = t.min(cfg.total_steps);
    let phase = std::f64::consts::PI * t as f64 / cfg.total_steps as f64;
    let up = cfg.lambda_max * 0.5 * (1.0 - phase.cos());
    match cfg.direction {
        Direction::Up => up,
        Direction::Down => cfg.lambda_max - up,
    }
}
