//! Open multi-depot pickup-and-delivery: vehicles leave their own start
//! location, never return, and minimize the summed delivery times.
//!
//! Action space per vehicle: action j < N is pickup j, action N + j is
//! delivery j. Only the vehicle that picked pair j up may deliver it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dist;
use crate::mdp::{
    ActionMask, EnvError, Environment, ResolvedAction, SolutionTrace, VerificationReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmdcpdpInstance {
    pub starts: Vec<[f64; 2]>,
    pub pickups: Vec<[f64; 2]>,
    pub deliveries: Vec<[f64; 2]>,
    /// Stacking limit shared by the whole fleet.
    pub capacity: usize,
}

impl OmdcpdpInstance {
    pub fn num_pairs(&self) -> usize {
        self.pickups.len()
    }

    pub fn num_vehicles(&self) -> usize {
        self.starts.len()
    }

    pub fn action_pos(&self, action: usize) -> [f64; 2] {
        if action < self.num_pairs() {
            self.pickups[action]
        } else {
            self.deliveries[action - self.num_pairs()]
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidInstance(msg));
        if self.pickups.is_empty() {
            return bad("no pickup-delivery pairs".into());
        }
        if self.deliveries.len() != self.pickups.len() {
            return bad(format!(
                "{} deliveries for {} pickups",
                self.deliveries.len(),
                self.pickups.len()
            ));
        }
        if self.starts.is_empty() {
            return bad("no vehicles".into());
        }
        if self.capacity == 0 {
            return bad("zero stacking capacity".into());
        }
        Ok(())
    }
}

/// Draw an instance with all locations in the unit square and the fleet
/// stacking limit fixed at 3.
pub fn generate(pairs: usize, vehicles: usize, seed: u64) -> OmdcpdpInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>()];
    let starts = (0..vehicles).map(|_| point(&mut rng)).collect();
    let pickups = (0..pairs).map(|_| point(&mut rng)).collect();
    let deliveries = (0..pairs).map(|_| point(&mut rng)).collect();
    OmdcpdpInstance { starts, pickups, deliveries, capacity: 3 }
}

#[derive(Debug, Clone)]
pub struct OmdcpdpState {
    pub pos: Vec<[f64; 2]>,
    pub clock: Vec<f64>,
    /// Pair ids picked up and not yet delivered, per vehicle.
    pub carried: Vec<Vec<usize>>,
    pub picked: Vec<bool>,
    pub owner: Vec<Option<usize>>,
    pub delivered: Vec<bool>,
    pub arrival: Vec<f64>,
}

#[derive(Clone, Copy)]
pub struct Omdcpdp;

impl Environment for Omdcpdp {
    type Instance = OmdcpdpInstance;
    type State = OmdcpdpState;

    fn num_agents(&self, inst: &OmdcpdpInstance) -> usize {
        inst.num_vehicles()
    }

    fn num_actions(&self, inst: &OmdcpdpInstance) -> usize {
        2 * inst.num_pairs()
    }

    fn reset(&self, inst: &OmdcpdpInstance) -> OmdcpdpState {
        let m = inst.num_vehicles();
        let n = inst.num_pairs();
        OmdcpdpState {
            pos: inst.starts.clone(),
            clock: vec![0.0; m],
            carried: vec![Vec::new(); m],
            picked: vec![false; n],
            owner: vec![None; n],
            delivered: vec![false; n],
            arrival: vec![0.0; n],
        }
    }

    fn action_mask(&self, inst: &OmdcpdpInstance, state: &OmdcpdpState) -> ActionMask {
        let m = inst.num_vehicles();
        let n = inst.num_pairs();
        let mut mask = ActionMask::new_false(m, 2 * n);
        for k in 0..m {
            let has_room = state.carried[k].len() < inst.capacity;
            for j in 0..n {
                mask.set(k, j, has_room && !state.picked[j]);
                mask.set(k, n + j, state.owner[j] == Some(k) && !state.delivered[j]);
            }
        }
        mask
    }

    fn fallback_actions(&self, inst: &OmdcpdpInstance, _state: &OmdcpdpState) -> Vec<usize> {
        // There is no stay action; losers are flagged, so the value only
        // fills the trace slot.
        vec![0; inst.num_vehicles()]
    }

    fn shareable_actions(&self, inst: &OmdcpdpInstance, _state: &OmdcpdpState) -> Vec<bool> {
        vec![false; 2 * inst.num_pairs()]
    }

    fn finished_agents(&self, inst: &OmdcpdpInstance, state: &OmdcpdpState) -> Vec<bool> {
        let all_picked = state.picked.iter().all(|&p| p);
        (0..inst.num_vehicles())
            .map(|k| all_picked && state.carried[k].is_empty())
            .collect()
    }

    fn transition(
        &self,
        inst: &OmdcpdpInstance,
        state: &OmdcpdpState,
        action: &ResolvedAction,
    ) -> Result<OmdcpdpState, EnvError> {
        let n = inst.num_pairs();
        let mut next = state.clone();
        for (k, (&a, &skip)) in action.actions.iter().zip(&action.fallback).enumerate() {
            if skip {
                continue;
            }
            if a >= 2 * n {
                return Err(EnvError::InvalidAction {
                    agent: k,
                    action: a,
                    reason: "action index out of range".into(),
                });
            }
            if a < n {
                if next.picked[a] {
                    return Err(EnvError::InvalidAction {
                        agent: k,
                        action: a,
                        reason: "pair already picked up".into(),
                    });
                }
                if next.carried[k].len() >= inst.capacity {
                    return Err(EnvError::InvalidAction {
                        agent: k,
                        action: a,
                        reason: "stacking limit reached".into(),
                    });
                }
                next.clock[k] += dist(next.pos[k], inst.pickups[a]);
                next.pos[k] = inst.pickups[a];
                next.picked[a] = true;
                next.owner[a] = Some(k);
                next.carried[k].push(a);
            } else {
                let j = a - n;
                if next.owner[j] != Some(k) || next.delivered[j] {
                    return Err(EnvError::InvalidAction {
                        agent: k,
                        action: a,
                        reason: "delivery not owned or already done".into(),
                    });
                }
                next.clock[k] += dist(next.pos[k], inst.deliveries[j]);
                next.pos[k] = inst.deliveries[j];
                next.delivered[j] = true;
                next.arrival[j] = next.clock[k];
                next.carried[k].retain(|&p| p != j);
            }
        }
        Ok(next)
    }

    fn is_terminal(&self, _inst: &OmdcpdpInstance, state: &OmdcpdpState) -> bool {
        state.delivered.iter().all(|&d| d)
    }

    fn objective(&self, inst: &OmdcpdpInstance, trace: &SolutionTrace) -> Result<f64, EnvError> {
        let mut state = self.reset(inst);
        for step in &trace.steps {
            let action = ResolvedAction {
                actions: step.actions.clone(),
                fallback: step.noop.clone(),
            };
            state = self.transition(inst, &state, &action)?;
        }
        if !self.is_terminal(inst, &state) {
            return Err(EnvError::NonTerminal("undelivered pairs remain".into()));
        }
        Ok(state.arrival.iter().sum())
    }

    fn verify(&self, inst: &OmdcpdpInstance, trace: &SolutionTrace) -> VerificationReport {
        let mut report = VerificationReport::default();
        let n = inst.num_pairs();
        let m = inst.num_vehicles();

        let mut pos = inst.starts.clone();
        let mut clock = vec![0.0; m];
        let mut carried: Vec<Vec<usize>> = vec![Vec::new(); m];
        let mut pickup_time: Vec<Option<(usize, f64)>> = vec![None; n];
        let mut delivery_time: Vec<Option<f64>> = vec![None; n];
        let mut range_err = None;
        let mut revisit = None;
        let mut wrong_owner = None;
        let mut overstack = None;
        for (s, step) in trace.steps.iter().enumerate() {
            if step.actions.len() != m || step.noop.len() != m {
                report.fail(
                    "trace-shape",
                    format!("step {s} has {} agent slots, expected {m}", step.actions.len()),
                );
                return report;
            }
            for k in 0..m {
                if step.noop[k] {
                    continue;
                }
                let a = step.actions[k];
                if a >= 2 * n {
                    range_err.get_or_insert((s, k, a));
                    continue;
                }
                if a < n {
                    if pickup_time[a].is_some() {
                        revisit.get_or_insert((s, k, a));
                    }
                    if carried[k].len() >= inst.capacity {
                        overstack.get_or_insert((s, k));
                    }
                    clock[k] += dist(pos[k], inst.pickups[a]);
                    pos[k] = inst.pickups[a];
                    pickup_time[a].get_or_insert((k, clock[k]));
                    carried[k].push(a);
                } else {
                    let j = a - n;
                    if delivery_time[j].is_some() {
                        revisit.get_or_insert((s, k, a));
                    }
                    match pickup_time[j] {
                        Some((owner, _)) if owner == k => {}
                        _ => {
                            wrong_owner.get_or_insert((s, k, j));
                        }
                    }
                    clock[k] += dist(pos[k], inst.deliveries[j]);
                    pos[k] = inst.deliveries[j];
                    delivery_time[j].get_or_insert(clock[k]);
                    carried[k].retain(|&p| p != j);
                }
            }
        }

        match range_err {
            None => report.pass("action-range"),
            Some((s, k, a)) => {
                report.fail("action-range", format!("step {s}: agent {k} took action {a}"))
            }
        }
        match revisit {
            None => report.pass("visit-once"),
            Some((s, k, a)) => report.fail(
                "visit-once",
                format!("step {s}: agent {k} repeated action {a}"),
            ),
        }
        match wrong_owner {
            None => report.pass("ownership-precedence"),
            Some((s, k, j)) => report.fail(
                "ownership-precedence",
                format!("step {s}: agent {k} delivered pair {j} it never picked up"),
            ),
        }
        match overstack {
            None => report.pass("stacking-limit"),
            Some((s, k)) => report.fail(
                "stacking-limit",
                format!("step {s}: agent {k} picked up beyond capacity {}", inst.capacity),
            ),
        }
        if let Some(j) = delivery_time.iter().position(|t| t.is_none()) {
            report.fail("all-delivered", format!("pair {j} never delivered"));
        } else {
            report.pass("all-delivered");
        }
        let late = (0..n).find(|&j| match (pickup_time[j], delivery_time[j]) {
            (Some((_, tp)), Some(td)) => td < tp,
            _ => false,
        });
        match late {
            None => report.pass("delivery-after-pickup"),
            Some(j) => report.fail(
                "delivery-after-pickup",
                format!("pair {j} delivered before its pickup time"),
            ),
        }
        if report.feasible() {
            report.recomputed_objective =
                Some(delivery_time.iter().map(|t| t.unwrap()).sum());
        }
        report
    }

    fn accumulated_cost(&self, _inst: &OmdcpdpInstance, state: &OmdcpdpState, agent: usize) -> f64 {
        state.clock[agent]
    }

    fn action_distance(
        &self,
        inst: &OmdcpdpInstance,
        state: &OmdcpdpState,
        agent: usize,
        action: usize,
    ) -> f64 {
        dist(state.pos[agent], inst.action_pos(action))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::RandomPolicy;
    use crate::mdp::{rollout, DecodeMode, PriorityKind, RolloutOptions, TraceStep};

    fn trace_of(steps: Vec<(Vec<usize>, Vec<bool>)>) -> SolutionTrace {
        let steps = steps
            .into_iter()
            .map(|(actions, noop)| TraceStep {
                actions,
                noop,
                conflict_losses: 0,
                log_prob: 0.0,
            })
            .collect();
        SolutionTrace { steps, objective: 0.0, seed: 0, wall_time: 0.0 }
    }

    fn chain_instance() -> OmdcpdpInstance {
        OmdcpdpInstance {
            starts: vec![[0.0, 0.0]],
            pickups: vec![[0.0, 1.0]],
            deliveries: vec![[0.0, 2.0]],
            capacity: 3,
        }
    }

    #[test]
    fn single_chain_records_arrival_two() {
        let inst = chain_instance();
        let env = Omdcpdp;
        let state = env.reset(&inst);
        let s1 = env
            .transition(&inst, &state, &ResolvedAction { actions: vec![0], fallback: vec![false] })
            .unwrap();
        assert_eq!(s1.clock[0], 1.0);
        let s2 = env
            .transition(&inst, &s1, &ResolvedAction { actions: vec![1], fallback: vec![false] })
            .unwrap();
        assert_eq!(s2.clock[0], 2.0);
        assert_eq!(s2.arrival[0], 2.0);
        assert!(env.is_terminal(&inst, &s2));

        let trace = trace_of(vec![
            (vec![0], vec![false]),
            (vec![1], vec![false]),
        ]);
        assert_eq!(env.objective(&inst, &trace).unwrap(), 2.0);
    }

    #[test]
    fn objective_sums_arrival_times() {
        let inst = OmdcpdpInstance {
            starts: vec![[0.0, 0.0], [3.0, 0.0]],
            pickups: vec![[0.0, 1.0], [3.0, 2.0]],
            deliveries: vec![[0.0, 2.0], [3.0, 5.0]],
            capacity: 3,
        };
        let env = Omdcpdp;
        let trace = trace_of(vec![
            (vec![0, 1], vec![false, false]),
            (vec![2, 3], vec![false, false]),
        ]);
        // Arrivals 2.0 and 5.0.
        assert_eq!(env.objective(&inst, &trace).unwrap(), 7.0);
    }

    #[test]
    fn mask_enforces_precedence_and_ownership() {
        let inst = OmdcpdpInstance {
            starts: vec![[0.0, 0.0], [1.0, 0.0]],
            pickups: vec![[0.0, 1.0], [1.0, 1.0]],
            deliveries: vec![[0.0, 2.0], [1.0, 2.0]],
            capacity: 3,
        };
        let env = Omdcpdp;
        let state = env.reset(&inst);
        let mask = env.action_mask(&inst, &state);
        assert_eq!(mask.row(0), &[true, true, false, false]);
        assert_eq!(mask.row(1), &[true, true, false, false]);

        let s1 = env
            .transition(
                &inst,
                &state,
                &ResolvedAction { actions: vec![0, 0], fallback: vec![false, true] },
            )
            .unwrap();
        let mask = env.action_mask(&inst, &s1);
        // Pair 0 now belongs to agent 0.
        assert_eq!(mask.row(0), &[false, true, true, false]);
        assert_eq!(mask.row(1), &[false, true, false, false]);
    }

    #[test]
    fn stacking_limit_blocks_pickups() {
        let mut inst = generate(3, 1, 2);
        inst.capacity = 1;
        let env = Omdcpdp;
        let state = env.reset(&inst);
        let s1 = env
            .transition(&inst, &state, &ResolvedAction { actions: vec![0], fallback: vec![false] })
            .unwrap();
        let mask = env.action_mask(&inst, &s1);
        assert_eq!(mask.row(0), &[false, false, false, true, false, false]);
    }

    #[test]
    fn loser_of_the_last_pickup_finishes_idle() {
        let inst = OmdcpdpInstance {
            starts: vec![[0.0, 0.0], [0.0, 0.5]],
            pickups: vec![[0.0, 1.0]],
            deliveries: vec![[0.0, 2.0]],
            capacity: 3,
        };
        let env = Omdcpdp;
        let opts = RolloutOptions {
            mode: DecodeMode::Sample,
            priority: PriorityKind::Learned,
            seed: 0,
        };
        // One pickup, two vehicles: both propose it with probability 1,
        // the tie goes to agent 0, agent 1 never gets work again.
        let (trace, _) = rollout(&env, &inst, &RandomPolicy, &opts).unwrap();
        assert_eq!(trace.steps.len(), 2);
        assert_eq!(trace.steps[0].noop, vec![false, true]);
        assert_eq!(trace.steps[0].conflict_losses, 1);
        assert_eq!(trace.steps[1].noop, vec![false, true]);
        assert_eq!(trace.steps[1].conflict_losses, 0);
        assert_eq!(trace.agent_route(1), Vec::<usize>::new());
        assert_eq!(trace.objective, 2.0);
    }

    #[test]
    fn sampled_rollouts_verify_clean() {
        let env = Omdcpdp;
        for seed in 0..25 {
            let inst = generate(5, 2, 300 + seed);
            inst.validate().unwrap();
            let opts = RolloutOptions {
                mode: DecodeMode::Sample,
                priority: PriorityKind::Random,
                seed,
            };
            let (trace, _) = rollout(&env, &inst, &RandomPolicy, &opts).unwrap();
            let report = env.verify(&inst, &trace);
            assert!(report.feasible(), "{:?}", report.first_violation());
            assert!((report.recomputed_objective.unwrap() - trace.objective).abs() < 1e-9);
        }
    }

    #[test]
    fn forged_delivery_before_pickup_is_named() {
        let inst = chain_instance();
        let env = Omdcpdp;
        let trace = trace_of(vec![
            (vec![1], vec![false]),
            (vec![0], vec![false]),
        ]);
        let report = env.verify(&inst, &trace);
        assert!(!report.feasible());
        assert_eq!(report.first_violation().unwrap().constraint, "ownership-precedence");
    }

    #[test]
    fn forged_overstacking_is_named() {
        let mut inst = generate(4, 1, 9);
        inst.capacity = 3;
        let env = Omdcpdp;
        let trace = trace_of(vec![
            (vec![0], vec![false]),
            (vec![1], vec![false]),
            (vec![2], vec![false]),
            (vec![3], vec![false]),
            (vec![4], vec![false]),
            (vec![5], vec![false]),
            (vec![6], vec![false]),
            (vec![7], vec![false]),
        ]);
        let report = env.verify(&inst, &trace);
        assert!(!report.feasible());
        assert_eq!(report.first_violation().unwrap().constraint, "stacking-limit");
    }

    #[test]
    fn generator_is_seeded_with_capacity_three() {
        let a = generate(6, 2, 4);
        let b = generate(6, 2, 4);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.capacity, 3);
        assert_eq!(a.num_pairs(), 6);
        assert_eq!(a.num_vehicles(), 2);
        assert!(a.pickups.iter().all(|c| (0.0..1.0).contains(&c[0])));
    }
}
