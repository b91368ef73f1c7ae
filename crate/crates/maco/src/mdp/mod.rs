//! Environment contract and shared step types for parallel construction.

mod conflict;
mod rollout;

pub use conflict::{resolve_conflicts, PriorityKind};
pub use rollout::{
    rollout, rollout_batch, rollout_batch_serial, DecodeMode, Policy, PolicyError, RolloutError,
    RolloutOptions,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("agent {agent} cannot take action {action}: {reason}")]
    InvalidAction { agent: usize, action: usize, reason: String },
    #[error("trace is not terminal: {0}")]
    NonTerminal(String),
}

/// Row-major boolean feasibility grid, agents x actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMask {
    agents: usize,
    actions: usize,
    bits: Vec<bool>,
}

impl ActionMask {
    pub fn new_false(agents: usize, actions: usize) -> Self {
        Self { agents, actions, bits: vec![false; agents * actions] }
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn get(&self, agent: usize, action: usize) -> bool {
        self.bits[agent * self.actions + action]
    }

    pub fn set(&mut self, agent: usize, action: usize, value: bool) {
        self.bits[agent * self.actions + action] = value;
    }

    pub fn row(&self, agent: usize) -> &[bool] {
        &self.bits[agent * self.actions..(agent + 1) * self.actions]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn feasible_count(&self, agent: usize) -> usize {
        self.row(agent).iter().filter(|&&b| b).count()
    }

    /// Clear a row down to a single feasible column.
    pub fn restrict_row(&mut self, agent: usize, only: usize) {
        for a in 0..self.actions {
            self.set(agent, a, a == only);
        }
    }
}

/// Row-major probability grid, agents x actions. Rows of active agents sum
/// to 1; infeasible entries are exactly 0.
#[derive(Debug, Clone)]
pub struct ProbGrid {
    agents: usize,
    actions: usize,
    probs: Vec<f64>,
}

impl ProbGrid {
    pub fn new(agents: usize, actions: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), agents * actions);
        Self { agents, actions, probs }
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn get(&self, agent: usize, action: usize) -> f64 {
        self.probs[agent * self.actions + action]
    }

    pub fn row(&self, agent: usize) -> &[f64] {
        &self.probs[agent * self.actions..(agent + 1) * self.actions]
    }
}

/// Joint action after conflict resolution. A raised fallback flag means the
/// agent performs no state change this step; the action value then only
/// records the fallback target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedAction {
    pub actions: Vec<usize>,
    pub fallback: Vec<bool>,
}

/// One construction step of a finished rollout.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub actions: Vec<usize>,
    /// No-op markers: conflict losers and finished agents.
    pub noop: Vec<bool>,
    /// Number of active agents that lost a conflict this step.
    pub conflict_losses: usize,
    /// Sum of ln p over active agents' pre-resolution choices.
    pub log_prob: f64,
}

#[derive(Debug, Clone)]
pub struct SolutionTrace {
    pub steps: Vec<TraceStep>,
    pub objective: f64,
    pub seed: u64,
    /// Seconds spent constructing; not part of serialized artifacts.
    pub wall_time: f64,
}

impl SolutionTrace {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn num_agents(&self) -> usize {
        self.steps.first().map_or(0, |s| s.actions.len())
    }

    /// Non-noop actions of one agent, in step order.
    pub fn agent_route(&self, agent: usize) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| !s.noop[agent])
            .map(|s| s.actions[agent])
            .collect()
    }

    pub fn total_conflicts(&self) -> usize {
        self.steps.iter().map(|s| s.conflict_losses).sum()
    }

    /// Conflict losses per agent decision slot.
    pub fn conflict_rate(&self) -> f64 {
        let slots = self.num_steps() * self.num_agents();
        if slots == 0 {
            0.0
        } else {
            self.total_conflicts() as f64 / slots as f64
        }
    }

    pub fn total_log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.log_prob).sum()
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub constraint: &'static str,
    pub passed: bool,
    pub detail: Option<String>,
}

/// Constraint-by-constraint verdict of an independent feasibility check.
#[derive(Debug, Clone, Default)]
pub struct VerificationReport {
    pub checks: Vec<CheckOutcome>,
    pub recomputed_objective: Option<f64>,
}

impl VerificationReport {
    pub fn pass(&mut self, constraint: &'static str) {
        self.checks.push(CheckOutcome { constraint, passed: true, detail: None });
    }

    pub fn fail(&mut self, constraint: &'static str, detail: String) {
        self.checks.push(CheckOutcome { constraint, passed: false, detail: Some(detail) });
    }

    pub fn feasible(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_violation(&self) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| !c.passed)
    }
}

/// A multi-agent construction environment. State transitions are pure:
/// `transition` consumes nothing and returns the successor state.
pub trait Environment {
    type Instance: Send + Sync;
    type State: Clone + Send;

    fn num_agents(&self, inst: &Self::Instance) -> usize;
    fn num_actions(&self, inst: &Self::Instance) -> usize;
    fn reset(&self, inst: &Self::Instance) -> Self::State;
    fn action_mask(&self, inst: &Self::Instance, state: &Self::State) -> ActionMask;
    /// Per-agent action substituted for conflict losers. Always feasible to
    /// apply as a no-op.
    fn fallback_actions(&self, inst: &Self::Instance, state: &Self::State) -> Vec<usize>;
    /// Actions that any number of agents may take simultaneously.
    fn shareable_actions(&self, inst: &Self::Instance, state: &Self::State) -> Vec<bool>;
    /// Agents with nothing left to do; they are forced to a no-op and
    /// excluded from log-probabilities and conflict resolution.
    fn finished_agents(&self, inst: &Self::Instance, state: &Self::State) -> Vec<bool>;
    fn transition(
        &self,
        inst: &Self::Instance,
        state: &Self::State,
        action: &ResolvedAction,
    ) -> Result<Self::State, EnvError>;
    fn is_terminal(&self, inst: &Self::Instance, state: &Self::State) -> bool;
    /// Objective recomputed by replaying the trace from reset; errors on
    /// non-terminal or invalid traces.
    fn objective(&self, inst: &Self::Instance, trace: &SolutionTrace) -> Result<f64, EnvError>;
    /// Independent constraint check; never panics on malformed traces.
    fn verify(&self, inst: &Self::Instance, trace: &SolutionTrace) -> VerificationReport;

    /// Cost accumulated so far by one agent, for the smallest-cost handler.
    fn accumulated_cost(&self, inst: &Self::Instance, state: &Self::State, agent: usize) -> f64;
    /// Effort for an agent to take an action now, for the closest handler.
    fn action_distance(
        &self,
        inst: &Self::Instance,
        state: &Self::State,
        agent: usize,
        action: usize,
    ) -> f64;

    /// Livelock guard: rollouts exceeding this many steps are an error.
    fn step_budget(&self, inst: &Self::Instance) -> usize {
        10 * (self.num_actions(inst) + self.num_agents(inst))
    }
}
