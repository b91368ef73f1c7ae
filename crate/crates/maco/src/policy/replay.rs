//! Re-running a finished rollout against the same or perturbed parameters.
//!
//! A recorded script freezes both the sampled choices and the resolved
//! joint actions, making the accumulated log-probability a deterministic
//! function of the parameters. Finite-difference checks rely on this.

use std::cell::RefCell;

use crate::mdp::{
    rollout, ActionMask, Environment, Policy, PolicyError, ProbGrid, ResolvedAction, RolloutError,
    RolloutOptions, SolutionTrace,
};

use super::{Featurize, PointerCtx, PointerPolicy};

#[derive(Debug, Clone)]
pub struct ReplayStep {
    /// Pre-resolution choice per agent; `None` marks a finished agent.
    pub choices: Vec<Option<usize>>,
    /// Joint action actually applied after conflict resolution.
    pub resolved: ResolvedAction,
}

/// Observes `note_chosen` calls while delegating to the wrapped policy.
struct Recorder<'a, P> {
    inner: &'a P,
    choices: RefCell<Vec<Vec<Option<usize>>>>,
}

impl<'a, E: Environment, P: Policy<E>> Policy<E> for Recorder<'a, P> {
    type Ctx = P::Ctx;

    fn begin(&self, inst: &E::Instance) -> Result<Self::Ctx, PolicyError> {
        self.inner.begin(inst)
    }

    fn probabilities(
        &self,
        inst: &E::Instance,
        state: &E::State,
        mask: &ActionMask,
        ctx: &mut Self::Ctx,
    ) -> Result<ProbGrid, PolicyError> {
        self.inner.probabilities(inst, state, mask, ctx)
    }

    fn note_chosen(&self, ctx: &mut Self::Ctx, choices: &[Option<usize>]) -> Result<(), PolicyError> {
        self.choices.borrow_mut().push(choices.to_vec());
        self.inner.note_chosen(ctx, choices)
    }
}

/// Run one rollout and capture a replayable script alongside the trace.
pub fn record_rollout<E, P>(
    env: &E,
    inst: &E::Instance,
    policy: &P,
    opts: &RolloutOptions,
) -> Result<(SolutionTrace, Vec<ReplayStep>), RolloutError>
where
    E: Environment,
    P: Policy<E>,
{
    let recorder = Recorder { inner: policy, choices: RefCell::new(Vec::new()) };
    let (trace, _) = rollout(env, inst, &recorder, opts)?;
    let choices = recorder.choices.into_inner();
    debug_assert_eq!(choices.len(), trace.steps.len());
    let script = choices
        .into_iter()
        .zip(&trace.steps)
        .map(|(choices, step)| ReplayStep {
            choices,
            resolved: ResolvedAction { actions: step.actions.clone(), fallback: step.noop.clone() },
        })
        .collect();
    Ok((trace, script))
}

/// Drive the environment along a recorded script, re-deriving every
/// distribution from the given policy's current parameters.
pub fn replay_log_prob<E: Featurize + Clone>(
    env: &E,
    inst: &E::Instance,
    policy: &PointerPolicy<E>,
    script: &[ReplayStep],
) -> Result<PointerCtx, RolloutError> {
    let m = env.num_agents(inst);
    let mut ctx = policy.begin(inst)?;
    let mut state = env.reset(inst);
    for step in script {
        let finished = env.finished_agents(inst, &state);
        let fallbacks = env.fallback_actions(inst, &state);
        let mut mask = env.action_mask(inst, &state);
        for agent in 0..m {
            if finished[agent] {
                mask.restrict_row(agent, fallbacks[agent]);
            }
        }
        policy.probabilities(inst, &state, &mask, &mut ctx)?;
        policy.note_chosen(&mut ctx, &step.choices)?;
        state = env.transition(inst, &state, &step.resolved)?;
    }
    debug_assert!(env.is_terminal(inst, &state), "script must end in a terminal state");
    Ok(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::hcvrp::{self, Hcvrp};
    use crate::mdp::{DecodeMode, PriorityKind};
    use crate::policy::{NormKind, PolicyConfig};

    fn config() -> PolicyConfig {
        PolicyConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            mlp_width: 16,
            norm: NormKind::Rms,
            beta: 10.0,
            communication: true,
        }
    }

    #[test]
    fn replay_reproduces_the_recorded_log_prob_exactly() {
        let policy = PointerPolicy::new(Hcvrp, config(), 5);
        let inst = hcvrp::generate(5, 2, 91);
        let opts = RolloutOptions {
            mode: DecodeMode::Sample,
            priority: PriorityKind::Learned,
            seed: 13,
        };
        let (trace, script) = record_rollout(&Hcvrp, &inst, &policy, &opts).unwrap();
        assert_eq!(script.len(), trace.steps.len());
        let ctx = replay_log_prob(&Hcvrp, &inst, &policy, &script).unwrap();
        // Identical operations in identical order, so bit-equal.
        assert_eq!(ctx.log_prob_value().to_bits(), {
            let (_, live_ctx) = rollout(&Hcvrp, &inst, &policy, &opts).unwrap();
            live_ctx.log_prob_value().to_bits()
        });
    }

    #[test]
    fn script_records_conflict_losers_pre_resolution_choice() {
        let policy = PointerPolicy::new(Hcvrp, config(), 6);
        // Many samples over a contested instance; at least one step must
        // contain a loser whose choice differs from the resolved action.
        let inst = hcvrp::generate(4, 3, 55);
        let mut saw_conflict = false;
        for seed in 0..40 {
            let opts = RolloutOptions {
                mode: DecodeMode::Sample,
                priority: PriorityKind::Learned,
                seed,
            };
            let (_, script) = record_rollout(&Hcvrp, &inst, &policy, &opts).unwrap();
            for step in &script {
                for agent in 0..3 {
                    if let Some(choice) = step.choices[agent] {
                        if step.resolved.fallback[agent] {
                            saw_conflict = true;
                            assert_ne!(
                                choice, step.resolved.actions[agent],
                                "a loser keeps its original proposal in the script"
                            );
                        }
                    }
                }
            }
        }
        assert!(saw_conflict, "no conflicts in 40 sampled rollouts");
    }
}
