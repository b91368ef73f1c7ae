//! Rollout engine: all agents propose actions each step, conflicts are
//! resolved by priority, losers and finished agents take flagged no-ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::conflict::{resolve_conflicts, PriorityKind};
use super::{ActionMask, EnvError, Environment, ProbGrid, ResolvedAction, SolutionTrace, TraceStep};
use crate::batch;
use crate::seed;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("gradient engine: {0}")]
    Grad(#[from] maco_grad::GradError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("step budget of {budget} exceeded without reaching a terminal state")]
    StepBudgetExceeded { budget: usize },
    #[error("agent {agent} has no feasible action at step {step}")]
    EmptyMask { agent: usize, step: usize },
    #[error("agent {agent} got a bad distribution at step {step}: {detail}")]
    BadDistribution { agent: usize, step: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Most probable feasible action per agent; ties toward lowest index.
    Greedy,
    /// Categorical draw from each agent's row.
    Sample,
}

/// A decision rule mapping states to per-agent action distributions.
/// `Ctx` carries whatever the policy accumulates across one rollout
/// (for the learned policy, the gradient tape and chosen-action terms).
pub trait Policy<E: Environment> {
    type Ctx;

    fn begin(&self, inst: &E::Instance) -> Result<Self::Ctx, PolicyError>;

    /// Distribution over actions for every agent. Rows of active agents
    /// must sum to 1 with exact zeros on masked-out entries; rows patched
    /// to a single feasible column get probability 1 there.
    fn probabilities(
        &self,
        inst: &E::Instance,
        state: &E::State,
        mask: &ActionMask,
        ctx: &mut Self::Ctx,
    ) -> Result<ProbGrid, PolicyError>;

    /// Record the pre-resolution choice of each active agent. Finished
    /// agents appear as `None` and contribute no probability terms.
    fn note_chosen(
        &self,
        _ctx: &mut Self::Ctx,
        _choices: &[Option<usize>],
    ) -> Result<(), PolicyError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    pub mode: DecodeMode,
    pub priority: PriorityKind,
    pub seed: u64,
}

fn sample_row(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (a, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = a;
            acc += p;
            if u < acc {
                return a;
            }
        }
    }
    // Cumulative fell short of u by rounding; the tail entry wins.
    last_positive
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (a, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = a;
        }
    }
    best
}

fn check_row(
    row: &[f64],
    mask_row: &[bool],
    agent: usize,
    step: usize,
) -> Result<(), RolloutError> {
    let mut sum = 0.0;
    for (a, &p) in row.iter().enumerate() {
        if p < 0.0 {
            return Err(RolloutError::BadDistribution {
                agent,
                step,
                detail: format!("negative probability {p} at action {a}"),
            });
        }
        if !mask_row[a] && p != 0.0 {
            return Err(RolloutError::BadDistribution {
                agent,
                step,
                detail: format!("probability {p} on masked action {a}"),
            });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(RolloutError::BadDistribution {
            agent,
            step,
            detail: format!("row sums to {sum}"),
        });
    }
    Ok(())
}

/// Construct one solution. Returns the trace together with the policy's
/// per-rollout context so callers can derive gradients from it.
pub fn rollout<E: Environment, P: Policy<E>>(
    env: &E,
    inst: &E::Instance,
    policy: &P,
    opts: &RolloutOptions,
) -> Result<(SolutionTrace, P::Ctx), RolloutError> {
    let started = std::time::Instant::now();
    let m = env.num_agents(inst);
    let budget = env.step_budget(inst);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut ctx = policy.begin(inst)?;
    let mut state = env.reset(inst);
    let mut steps: Vec<TraceStep> = Vec::new();

    while !env.is_terminal(inst, &state) {
        if steps.len() >= budget {
            return Err(RolloutError::StepBudgetExceeded { budget });
        }
        let finished = env.finished_agents(inst, &state);
        let fallbacks = env.fallback_actions(inst, &state);
        let mut mask = env.action_mask(inst, &state);
        for i in 0..m {
            if finished[i] {
                mask.restrict_row(i, fallbacks[i]);
            } else if mask.feasible_count(i) == 0 {
                return Err(RolloutError::EmptyMask { agent: i, step: steps.len() });
            }
        }

        let probs = policy.probabilities(inst, &state, &mask, &mut ctx)?;
        let mut choices: Vec<Option<usize>> = vec![None; m];
        let mut proposed = vec![0usize; m];
        let mut log_prob = 0.0;
        for i in 0..m {
            if finished[i] {
                proposed[i] = fallbacks[i];
                continue;
            }
            let row = probs.row(i);
            check_row(row, mask.row(i), i, steps.len())?;
            let a = match opts.mode {
                DecodeMode::Greedy => argmax_row(row),
                DecodeMode::Sample => sample_row(row, &mut rng),
            };
            choices[i] = Some(a);
            proposed[i] = a;
            log_prob += row[a].ln();
        }
        policy.note_chosen(&mut ctx, &choices)?;

        let resolved = resolve_active(
            env, inst, &state, &probs, &proposed, &finished, &fallbacks, opts.priority, &mut rng,
        );
        let conflict_losses = resolved
            .fallback
            .iter()
            .zip(&finished)
            .filter(|(&lost, &fin)| lost && !fin)
            .count();
        let noop = resolved.fallback.clone();
        state = env.transition(inst, &state, &resolved)?;
        steps.push(TraceStep { actions: resolved.actions, noop, conflict_losses, log_prob });
    }

    let mut trace = SolutionTrace {
        steps,
        objective: 0.0,
        seed: opts.seed,
        wall_time: 0.0,
    };
    trace.objective = env.objective(inst, &trace)?;
    trace.wall_time = started.elapsed().as_secs_f64();
    Ok((trace, ctx))
}

/// Resolution over active agents only; finished agents are flagged onto
/// their fallback without contesting anything.
#[allow(clippy::too_many_arguments)]
fn resolve_active<E: Environment>(
    env: &E,
    inst: &E::Instance,
    state: &E::State,
    probs: &ProbGrid,
    proposed: &[usize],
    finished: &[bool],
    fallbacks: &[usize],
    priority: PriorityKind,
    rng: &mut ChaCha8Rng,
) -> ResolvedAction {
    let m = proposed.len();
    let active: Vec<usize> = (0..m).filter(|&i| !finished[i]).collect();
    let sub_proposed: Vec<usize> = active.iter().map(|&i| proposed[i]).collect();
    let sub_fallbacks: Vec<usize> = active.iter().map(|&i| fallbacks[i]).collect();
    let sub_priorities: Vec<f64> = active
        .iter()
        .map(|&i| match priority {
            PriorityKind::Random => rng.gen::<f64>(),
            PriorityKind::Learned => probs.get(i, proposed[i]),
            PriorityKind::SmallestCost => -env.accumulated_cost(inst, state, i),
            PriorityKind::Closest => -env.action_distance(inst, state, i, proposed[i]),
        })
        .collect();
    let shareable = env.shareable_actions(inst, state);
    let sub = resolve_conflicts(&sub_proposed, &sub_priorities, &sub_fallbacks, &shareable);

    let mut actions = vec![0usize; m];
    let mut fallback = vec![false; m];
    for i in 0..m {
        if finished[i] {
            actions[i] = fallbacks[i];
            fallback[i] = true;
        }
    }
    for (k, &i) in active.iter().enumerate() {
        actions[i] = sub.actions[k];
        fallback[i] = sub.fallback[k];
    }
    ResolvedAction { actions, fallback }
}

/// Roll out `samples_per_instance` solutions for every instance. Work is
/// spread across threads when the `parallel` feature is on; results and
/// per-rollout seeds are identical either way.
#[allow(clippy::type_complexity)]
pub fn rollout_batch<E, P>(
    env: &E,
    instances: &[E::Instance],
    policy: &P,
    mode: DecodeMode,
    priority: PriorityKind,
    samples_per_instance: usize,
    base_seed: u64,
) -> Vec<Result<(SolutionTrace, P::Ctx), RolloutError>>
where
    E: Environment + Sync,
    P: Policy<E> + Sync,
    P::Ctx: Send,
{
    batch::map_range(instances.len() * samples_per_instance, |idx| {
        let inst = idx / samples_per_instance;
        let sample = idx % samples_per_instance;
        let opts = RolloutOptions {
            mode,
            priority,
            seed: seed::mix(base_seed, &[inst as u64, sample as u64]),
        };
        rollout(env, &instances[inst], policy, &opts)
    })
}

/// Single-threaded twin of [`rollout_batch`] regardless of features, for
/// throughput comparisons.
#[allow(clippy::type_complexity)]
pub fn rollout_batch_serial<E, P>(
    env: &E,
    instances: &[E::Instance],
    policy: &P,
    mode: DecodeMode,
    priority: PriorityKind,
    samples_per_instance: usize,
    base_seed: u64,
) -> Vec<Result<(SolutionTrace, P::Ctx), RolloutError>>
where
    E: Environment,
    P: Policy<E>,
{
    batch::map_range_serial(instances.len() * samples_per_instance, |idx| {
        let inst = idx / samples_per_instance;
        let sample = idx % samples_per_instance;
        let opts = RolloutOptions {
            mode,
            priority,
            seed: seed::mix(base_seed, &[inst as u64, sample as u64]),
        };
        rollout(env, &instances[inst], policy, &opts)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::VerificationReport;

    /// Token-claim toy: action 0 is a shareable stay, action a claims token
    /// a-1. An agent holding `cap` tokens is finished; terminal when every
    /// token is claimed.
    struct TokenEnv {
        cap: usize,
    }

    struct TokenInstance {
        tokens: usize,
        agents: usize,
    }

    #[derive(Clone)]
    struct TokenState {
        claimed: Vec<bool>,
        held: Vec<usize>,
    }

    impl Environment for TokenEnv {
        type Instance = TokenInstance;
        type State = TokenState;

        fn num_agents(&self, inst: &TokenInstance) -> usize {
            inst.agents
        }

        fn num_actions(&self, inst: &TokenInstance) -> usize {
            inst.tokens + 1
        }

        fn reset(&self, inst: &TokenInstance) -> TokenState {
            TokenState { claimed: vec![false; inst.tokens], held: vec![0; inst.agents] }
        }

        fn action_mask(&self, inst: &TokenInstance, state: &TokenState) -> ActionMask {
            let mut mask = ActionMask::new_false(inst.agents, inst.tokens + 1);
            for i in 0..inst.agents {
                mask.set(i, 0, true);
                for t in 0..inst.tokens {
                    mask.set(i, t + 1, !state.claimed[t]);
                }
            }
            mask
        }

        fn fallback_actions(&self, inst: &TokenInstance, _state: &TokenState) -> Vec<usize> {
            vec![0; inst.agents]
        }

        fn shareable_actions(&self, inst: &TokenInstance, _state: &TokenState) -> Vec<bool> {
            let mut s = vec![false; inst.tokens + 1];
            s[0] = true;
            s
        }

        fn finished_agents(&self, inst: &TokenInstance, state: &TokenState) -> Vec<bool> {
            (0..inst.agents).map(|i| state.held[i] >= self.cap).collect()
        }

        fn transition(
            &self,
            _inst: &TokenInstance,
            state: &TokenState,
            action: &ResolvedAction,
        ) -> Result<TokenState, EnvError> {
            let mut next = state.clone();
            for (i, (&a, &skip)) in action.actions.iter().zip(&action.fallback).enumerate() {
                if skip || a == 0 {
                    continue;
                }
                let token = a - 1;
                if next.claimed[token] {
                    return Err(EnvError::InvalidAction {
                        agent: i,
                        action: a,
                        reason: "token already claimed".into(),
                    });
                }
                next.claimed[token] = true;
                next.held[i] += 1;
            }
            Ok(next)
        }

        fn is_terminal(&self, _inst: &TokenInstance, state: &TokenState) -> bool {
            state.claimed.iter().all(|&c| c)
        }

        fn objective(
            &self,
            inst: &TokenInstance,
            trace: &SolutionTrace,
        ) -> Result<f64, EnvError> {
            let mut state = self.reset(inst);
            for step in &trace.steps {
                let action = ResolvedAction {
                    actions: step.actions.clone(),
                    fallback: step.noop.clone(),
                };
                state = self.transition(inst, &state, &action)?;
            }
            if !self.is_terminal(inst, &state) {
                return Err(EnvError::NonTerminal("tokens left unclaimed".into()));
            }
            Ok(trace.steps.len() as f64)
        }

        fn verify(&self, inst: &TokenInstance, trace: &SolutionTrace) -> VerificationReport {
            let mut report = VerificationReport::default();
            let mut claimed = vec![false; inst.tokens];
            let mut duplicate = None;
            for (s, step) in trace.steps.iter().enumerate() {
                for (i, (&a, &skip)) in step.actions.iter().zip(&step.noop).enumerate() {
                    if skip || a == 0 {
                        continue;
                    }
                    if claimed[a - 1] {
                        duplicate = Some((s, i, a));
                    }
                    claimed[a - 1] = true;
                }
            }
            match duplicate {
                None => report.pass("each token claimed once"),
                Some((s, i, a)) => report.fail(
                    "each token claimed once",
                    format!("step {s}: agent {i} re-claimed token via action {a}"),
                ),
            }
            if claimed.iter().all(|&c| c) {
                report.pass("all tokens claimed");
            } else {
                report.fail("all tokens claimed", "unclaimed tokens remain".into());
            }
            report.recomputed_objective = self.objective(inst, trace).ok();
            report
        }

        fn accumulated_cost(&self, _inst: &TokenInstance, state: &TokenState, agent: usize) -> f64 {
            state.held[agent] as f64
        }

        fn action_distance(
            &self,
            _inst: &TokenInstance,
            _state: &TokenState,
            agent: usize,
            action: usize,
        ) -> f64 {
            (agent as f64 - action as f64).abs()
        }
    }

    /// Uniform over feasible actions.
    struct UniformPolicy;

    impl Policy<TokenEnv> for UniformPolicy {
        type Ctx = ();

        fn begin(&self, _inst: &TokenInstance) -> Result<(), PolicyError> {
            Ok(())
        }

        fn probabilities(
            &self,
            inst: &TokenInstance,
            _state: &TokenState,
            mask: &ActionMask,
            _ctx: &mut (),
        ) -> Result<ProbGrid, PolicyError> {
            let actions = inst.tokens + 1;
            let mut probs = vec![0.0; inst.agents * actions];
            for i in 0..inst.agents {
                let k = mask.feasible_count(i);
                for a in 0..actions {
                    if mask.get(i, a) {
                        probs[i * actions + a] = 1.0 / k as f64;
                    }
                }
            }
            Ok(ProbGrid::new(inst.agents, actions, probs))
        }
    }

    /// Probability 1 on the lowest feasible claim; stays only when no
    /// tokens are left feasible.
    struct LowestClaimPolicy;

    impl Policy<TokenEnv> for LowestClaimPolicy {
        type Ctx = ();

        fn begin(&self, _inst: &TokenInstance) -> Result<(), PolicyError> {
            Ok(())
        }

        fn probabilities(
            &self,
            inst: &TokenInstance,
            _state: &TokenState,
            mask: &ActionMask,
            _ctx: &mut (),
        ) -> Result<ProbGrid, PolicyError> {
            let actions = inst.tokens + 1;
            let mut probs = vec![0.0; inst.agents * actions];
            for i in 0..inst.agents {
                let pick = (1..actions)
                    .find(|&a| mask.get(i, a))
                    .unwrap_or(0);
                let pick = if mask.get(i, pick) { pick } else { 0 };
                probs[i * actions + pick] = 1.0;
            }
            Ok(ProbGrid::new(inst.agents, actions, probs))
        }
    }

    /// Probability 1 on stay, forever.
    struct StayPolicy;

    impl Policy<TokenEnv> for StayPolicy {
        type Ctx = ();

        fn begin(&self, _inst: &TokenInstance) -> Result<(), PolicyError> {
            Ok(())
        }

        fn probabilities(
            &self,
            inst: &TokenInstance,
            _state: &TokenState,
            _mask: &ActionMask,
            _ctx: &mut (),
        ) -> Result<ProbGrid, PolicyError> {
            let actions = inst.tokens + 1;
            let mut probs = vec![0.0; inst.agents * actions];
            for i in 0..inst.agents {
                probs[i * actions] = 1.0;
            }
            Ok(ProbGrid::new(inst.agents, actions, probs))
        }
    }

    #[test]
    fn sampled_rollout_terminates_and_verifies() {
        let env = TokenEnv { cap: 4 };
        let inst = TokenInstance { tokens: 4, agents: 2 };
        let opts = RolloutOptions {
            mode: DecodeMode::Sample,
            priority: PriorityKind::Random,
            seed: 7,
        };
        let (trace, _) = rollout(&env, &inst, &UniformPolicy, &opts).unwrap();
        let report = env.verify(&inst, &trace);
        assert!(report.feasible(), "{:?}", report.first_violation());
        assert_eq!(trace.objective, trace.steps.len() as f64);
        assert_eq!(report.recomputed_objective, Some(trace.objective));
    }

    #[test]
    fn same_seed_reproduces_the_trace() {
        let env = TokenEnv { cap: 4 };
        let inst = TokenInstance { tokens: 5, agents: 3 };
        let opts = RolloutOptions {
            mode: DecodeMode::Sample,
            priority: PriorityKind::Random,
            seed: 9,
        };
        let (a, _) = rollout(&env, &inst, &UniformPolicy, &opts).unwrap();
        let (b, _) = rollout(&env, &inst, &UniformPolicy, &opts).unwrap();
        assert_eq!(a.steps.len(), b.steps.len());
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.actions, sb.actions);
            assert_eq!(sa.noop, sb.noop);
            assert_eq!(sa.log_prob.to_bits(), sb.log_prob.to_bits());
        }
    }

    #[test]
    fn conflict_loser_retries_and_winner_finishes() {
        let env = TokenEnv { cap: 1 };
        let inst = TokenInstance { tokens: 2, agents: 2 };
        let opts = RolloutOptions {
            mode: DecodeMode::Greedy,
            priority: PriorityKind::Learned,
            seed: 0,
        };
        // Both want token 1; equal learned priority breaks toward agent 0.
        let (trace, _) = rollout(&env, &inst, &LowestClaimPolicy, &opts).unwrap();
        assert_eq!(trace.steps.len(), 2);
        assert_eq!(trace.steps[0].actions, vec![1, 0]);
        assert_eq!(trace.steps[0].noop, vec![false, true]);
        assert_eq!(trace.steps[0].conflict_losses, 1);
        // Agent 0 is now finished: forced stay, excluded from the step's
        // probability terms.
        assert_eq!(trace.steps[1].actions, vec![0, 2]);
        assert_eq!(trace.steps[1].noop, vec![true, false]);
        assert_eq!(trace.steps[1].conflict_losses, 0);
        assert_eq!(trace.steps[1].log_prob, 0.0);
        assert_eq!(trace.agent_route(0), vec![1]);
        assert_eq!(trace.agent_route(1), vec![2]);
        assert_eq!(trace.total_conflicts(), 1);
        assert!((trace.conflict_rate() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn never_terminating_policy_hits_the_step_budget() {
        let env = TokenEnv { cap: 1 };
        let inst = TokenInstance { tokens: 1, agents: 1 };
        let opts = RolloutOptions {
            mode: DecodeMode::Greedy,
            priority: PriorityKind::Random,
            seed: 3,
        };
        let err = rollout(&env, &inst, &StayPolicy, &opts).unwrap_err();
        match err {
            RolloutError::StepBudgetExceeded { budget } => assert_eq!(budget, 30),
            other => panic!("expected step budget error, got {other}"),
        }
    }

    #[test]
    fn batch_matches_individually_seeded_rollouts() {
        let env = TokenEnv { cap: 4 };
        let instances = vec![
            TokenInstance { tokens: 3, agents: 2 },
            TokenInstance { tokens: 4, agents: 2 },
        ];
        let batch = rollout_batch(
            &env,
            &instances,
            &UniformPolicy,
            DecodeMode::Sample,
            PriorityKind::Random,
            3,
            123,
        );
        assert_eq!(batch.len(), 6);
        for (idx, result) in batch.iter().enumerate() {
            let inst = idx / 3;
            let sample = idx % 3;
            let opts = RolloutOptions {
                mode: DecodeMode::Sample,
                priority: PriorityKind::Random,
                seed: crate::seed::mix(123, &[inst as u64, sample as u64]),
            };
            let (expect, _) = rollout(&env, &instances[inst], &UniformPolicy, &opts).unwrap();
            let got = result.as_ref().unwrap();
            assert_eq!(got.0.seed, expect.seed);
            assert_eq!(got.0.objective, expect.objective);
            for (sa, sb) in got.0.steps.iter().zip(&expect.steps) {
                assert_eq!(sa.actions, sb.actions);
            }
        }
    }

    #[test]
    fn greedy_mode_ignores_the_seed() {
        let env = TokenEnv { cap: 4 };
        let inst = TokenInstance { tokens: 3, agents: 1 };
        let mk = |seed| RolloutOptions {
            mode: DecodeMode::Greedy,
            priority: PriorityKind::Learned,
            seed,
        };
        let (a, _) = rollout(&env, &inst, &LowestClaimPolicy, &mk(1)).unwrap();
        let (b, _) = rollout(&env, &inst, &LowestClaimPolicy, &mk(2)).unwrap();
        let acts_a: Vec<_> = a.steps.iter().map(|s| s.actions.clone()).collect();
        let acts_b: Vec<_> = b.steps.iter().map(|s| s.actions.clone()).collect();
        assert_eq!(acts_a, acts_b);
    }
}
