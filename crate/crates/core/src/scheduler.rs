//! Dynamic two-task weighting: loss EMAs, loss-reduction probabilities, focal weights and
//! the phase switch between ID-only and combined training.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::Task;
use crate::tensor::{Element, Graph, Var};

pub const P_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    IdOnly,
    Combined,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::IdOnly => "id_only",
            Phase::Combined => "combined",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id_only" => Ok(Phase::IdOnly),
            "combined" => Ok(Phase::Combined),
            other => Err(Error::invalid("phase", format!("unknown phase `{other}`"))),
        }
    }
}

pub fn update_ema(k_prev: f64, loss: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(alpha * loss + (1.0 - alpha) * k_prev)
}

/// `min(k, k_prev) / k_prev`, clamped to `[P_FLOOR, 1]`.
pub fn loss_reduction_prob(k: f64, k_prev: f64) -> Result<f64> {
    if !(k_prev > 0.0) {
        return Err(Error::invalid(
            "loss_reduction_prob",
            format!("previous average must be positive, got {k_prev}"),
        ));
    }
    Ok((k.min(k_prev) / k_prev).clamp(P_FLOOR, 1.0))
}

pub fn focal_weight(p: f64, gamma: f64) -> f64 {
    let p = p.clamp(P_FLOOR, 1.0);
    if p == 1.0 {
        return 0.0;
    }
    -(1.0 - p).powf(gamma) * p.ln()
}

/// `previous` is returned when both weights vanish.
pub fn select_phase(fl_id: f64, fl_tp: f64, switch_ratio: f64, previous: Phase) -> Phase {
    match (fl_id > 0.0, fl_tp > 0.0) {
        (false, false) => previous,
        (false, true) => Phase::Combined,
        _ if fl_tp / fl_id < switch_ratio => Phase::IdOnly,
        _ => Phase::Combined,
    }
}

pub fn combined_value(l_id: f64, l_tp: f64, fl_id: f64, fl_tp: f64) -> f64 {
    fl_id * l_id + fl_tp * l_tp
}

/// Weighted sum of the task losses with constant weights. `None` when no term survives.
pub fn combined_objective<T: Element>(
    g: &mut Graph<T>,
    l_id: Var,
    l_tp: Option<Var>,
    fl_id: f64,
    fl_tp: f64,
) -> Result<Option<Var>> {
    let mut terms = Vec::with_capacity(2);
    if fl_id > 0.0 {
        terms.push(g.scale(l_id, T::lit(fl_id))?);
    }
    if let (Some(l), true) = (l_tp, fl_tp > 0.0) {
        terms.push(g.scale(l, T::lit(fl_tp))?);
    }
    Ok(match terms[..] {
        [] => None,
        [a] => Some(a),
        [a, b] => Some(g.add(a, b)?),
        _ => unreachable!(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulerConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub switch_ratio: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            alpha: 0.25,
            gamma: 2.0,
            switch_ratio: 0.16,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be a finite value >= 0, got {}", self.gamma)));
        }
        if !(self.switch_ratio > 0.0 && self.switch_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "switch_ratio must be positive and finite, got {}",
                self.switch_ratio
            )));
        }
        Ok(())
    }
}

/// Running statistics of one task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskTrack {
    pub k_prev: f64,
    pub k: f64,
    pub p: f64,
    pub fl: f64,
    pub observations: u64,
}

impl TaskTrack {
    fn with_prob(p: f64, gamma: f64) -> Self {
        let p = p.clamp(P_FLOOR, 1.0);
        TaskTrack {
            k_prev: 0.0,
            k: 0.0,
            p,
            fl: focal_weight(p, gamma),
            observations: 0,
        }
    }

    fn observe(&mut self, loss: f64, cfg: &SchedulerConfig) -> Result<()> {
        if !(loss.is_finite() && loss >= 0.0) {
            return Err(Error::invalid("scheduler", format!("loss must be finite and >= 0, got {loss}")));
        }
        let k_prev = if self.observations == 0 { loss } else { self.k };
        let k = update_ema(k_prev, loss, cfg.alpha)?;
        // A zero average has nothing left to reduce.
        self.p = if k_prev > 0.0 { loss_reduction_prob(k, k_prev)? } else { 1.0 };
        self.k_prev = k_prev;
        self.k = k;
        self.fl = focal_weight(self.p, cfg.gamma);
        self.observations += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    config: SchedulerConfig,
    pub id: TaskTrack,
    pub tp: TaskTrack,
    pub tau: u64,
    pub phase: Phase,
}

/// Number of values produced by [`SchedulerState::encode`].
pub const ENCODED_LEN: usize = 13;

impl SchedulerState {
    /// Starts with the ID task maximally weighted and the triplet task at zero weight.
    pub fn new(config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        Ok(SchedulerState {
            config,
            id: TaskTrack::with_prob(0.0, config.gamma),
            tp: TaskTrack::with_prob(1.0, config.gamma),
            tau: 0,
            phase: Phase::IdOnly,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn track(&self, task: Task) -> &TaskTrack {
        match task {
            Task::Id => &self.id,
            Task::Triplet => &self.tp,
        }
    }

    pub fn weights(&self) -> (f64, f64) {
        (self.id.fl, self.tp.fl)
    }

    /// Chooses the phase for the coming iteration from the current weights.
    pub fn decide(&mut self) -> Phase {
        self.phase = select_phase(self.id.fl, self.tp.fl, self.config.switch_ratio, self.phase);
        self.phase
    }

    pub fn observe(&mut self, task: Task, loss: f64) -> Result<()> {
        let cfg = self.config;
        match task {
            Task::Id => self.id.observe(loss, &cfg),
            Task::Triplet => self.tp.observe(loss, &cfg),
        }
    }

    pub fn advance(&mut self) {
        self.tau += 1;
    }

    pub fn encode(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(ENCODED_LEN);
        for t in [&self.id, &self.tp] {
            out.extend([t.k_prev, t.k, t.p, t.fl, t.observations as f64]);
        }
        out.push(self.tau as f64);
        out.push(match self.phase {
            Phase::IdOnly => 0.0,
            Phase::Combined => 1.0,
        });
        out.push(self.config.switch_ratio);
        out
    }

    pub fn decode(config: SchedulerConfig, values: &[f64]) -> Result<Self> {
        config.validate()?;
        if values.len() != ENCODED_LEN {
            return Err(Error::Checkpoint(format!(
                "scheduler state has {} values, expected {ENCODED_LEN}",
                values.len()
            )));
        }
        let track = |v: &[f64]| TaskTrack {
            k_prev: v[0],
            k: v[1],
            p: v[2],
            fl: v[3],
            observations: v[4] as u64,
        };
        let phase = match values[11] {
            v if v == 0.0 => Phase::IdOnly,
            v if v == 1.0 => Phase::Combined,
            v => return Err(Error::Checkpoint(format!("invalid phase code {v}"))),
        };
        Ok(SchedulerState {
            config,
            id: track(&values[0..5]),
            tp: track(&values[5..10]),
            tau: values[10] as u64,
            phase,
        })
    }
}
