//! Heterogeneous capacitated vehicle routing with a min-max objective:
//! the worst route duration (distance over speed) across the fleet.
//!
//! Action space per vehicle: node 0 is the depot, node j (1-based) is
//! customer j-1. Visiting the depot refills the vehicle to capacity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dist;
use crate::mdp::{
    ActionMask, EnvError, Environment, ResolvedAction, SolutionTrace, VerificationReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcvrpInstance {
    pub depot: [f64; 2],
    /// Customer coordinates; customer j sits behind action j+1.
    pub coords: Vec<[f64; 2]>,
    pub demands: Vec<f64>,
    pub capacities: Vec<f64>,
    pub speeds: Vec<f64>,
}

impl HcvrpInstance {
    pub fn num_customers(&self) -> usize {
        self.coords.len()
    }

    pub fn num_vehicles(&self) -> usize {
        self.capacities.len()
    }

    pub fn node_pos(&self, node: usize) -> [f64; 2] {
        if node == 0 {
            self.depot
        } else {
            self.coords[node - 1]
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidInstance(msg));
        if self.coords.is_empty() {
            return bad("no customers".into());
        }
        if self.demands.len() != self.coords.len() {
            return bad(format!(
                "{} demands for {} customers",
                self.demands.len(),
                self.coords.len()
            ));
        }
        if self.capacities.is_empty() {
            return bad("no vehicles".into());
        }
        if self.speeds.len() != self.capacities.len() {
            return bad(format!(
                "{} speeds for {} vehicles",
                self.speeds.len(),
                self.capacities.len()
            ));
        }
        let min_cap = self.capacities.iter().cloned().fold(f64::INFINITY, f64::min);
        for (j, &d) in self.demands.iter().enumerate() {
            if !(d > 0.0) {
                return bad(format!("customer {j} has non-positive demand {d}"));
            }
            if d > min_cap {
                return bad(format!(
                    "customer {j} demand {d} exceeds smallest capacity {min_cap}"
                ));
            }
        }
        if self.speeds.iter().any(|&f| !(f > 0.0)) {
            return bad("non-positive speed".into());
        }
        Ok(())
    }
}

/// Draw an instance with coordinates in the unit square, demands in
/// [1, 10], capacities in [20, 41], speeds in [0.5, 1].
pub fn generate(customers: usize, vehicles: usize, seed: u64) -> HcvrpInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>()];
    let depot = point(&mut rng);
    let coords = (0..customers).map(|_| point(&mut rng)).collect();
    let demands = (0..customers).map(|_| rng.gen_range(1.0..10.0)).collect();
    let capacities = (0..vehicles).map(|_| rng.gen_range(20.0..41.0)).collect();
    let speeds = (0..vehicles).map(|_| rng.gen_range(0.5..1.0)).collect();
    HcvrpInstance { depot, coords, demands, capacities, speeds }
}

#[derive(Debug, Clone)]
pub struct HcvrpState {
    /// Current node per vehicle; 0 is the depot.
    pub node: Vec<usize>,
    pub load: Vec<f64>,
    pub elapsed: Vec<f64>,
    pub visited: Vec<bool>,
}

#[derive(Clone, Copy)]
pub struct Hcvrp;

impl Hcvrp {
    fn all_visited(state: &HcvrpState) -> bool {
        state.visited.iter().all(|&v| v)
    }
}

impl Environment for Hcvrp {
    type Instance = HcvrpInstance;
    type State = HcvrpState;

    fn num_agents(&self, inst: &HcvrpInstance) -> usize {
        inst.num_vehicles()
    }

    fn num_actions(&self, inst: &HcvrpInstance) -> usize {
        inst.num_customers() + 1
    }

    fn reset(&self, inst: &HcvrpInstance) -> HcvrpState {
        HcvrpState {
            node: vec![0; inst.num_vehicles()],
            load: inst.capacities.clone(),
            elapsed: vec![0.0; inst.num_vehicles()],
            visited: vec![false; inst.num_customers()],
        }
    }

    fn action_mask(&self, inst: &HcvrpInstance, state: &HcvrpState) -> ActionMask {
        let m = inst.num_vehicles();
        let n = inst.num_customers();
        let mut mask = ActionMask::new_false(m, n + 1);
        for k in 0..m {
            // No depot self-loop: a vehicle parked at the depot must go
            // serve someone (its load is full there by construction).
            mask.set(k, 0, state.node[k] != 0);
            for j in 0..n {
                mask.set(k, j + 1, !state.visited[j] && inst.demands[j] <= state.load[k]);
            }
        }
        mask
    }

    fn fallback_actions(&self, _inst: &HcvrpInstance, state: &HcvrpState) -> Vec<usize> {
        state.node.clone()
    }

    fn shareable_actions(&self, inst: &HcvrpInstance, _state: &HcvrpState) -> Vec<bool> {
        let mut s = vec![false; inst.num_customers() + 1];
        s[0] = true;
        s
    }

    fn finished_agents(&self, inst: &HcvrpInstance, state: &HcvrpState) -> Vec<bool> {
        let done = Self::all_visited(state);
        (0..inst.num_vehicles()).map(|k| done && state.node[k] == 0).collect()
    }

    fn transition(
        &self,
        inst: &HcvrpInstance,
        state: &HcvrpState,
        action: &ResolvedAction,
    ) -> Result<HcvrpState, EnvError> {
        let mut next = state.clone();
        for (k, (&a, &skip)) in action.actions.iter().zip(&action.fallback).enumerate() {
            if skip {
                continue;
            }
            if a > inst.num_customers() {
                return Err(EnvError::InvalidAction {
                    agent: k,
                    action: a,
                    reason: "node index out of range".into(),
                });
            }
            if a == 0 {
                if next.node[k] == 0 {
                    return Err(EnvError::InvalidAction {
                        agent: k,
                        action: a,
                        reason: "already at the depot".into(),
                    });
                }
                next.elapsed[k] += dist(inst.node_pos(next.node[k]), inst.depot) / inst.speeds[k];
                next.node[k] = 0;
                next.load[k] = inst.capacities[k];
                continue;
            }
            let j = a - 1;
            if next.visited[j] {
                return Err(EnvError::InvalidAction {
                    agent: k,
                    action: a,
                    reason: "customer already visited".into(),
                });
            }
            if inst.demands[j] > next.load[k] {
                return Err(EnvError::InvalidAction {
                    agent: k,
                    action: a,
                    reason: format!(
                        "demand {} exceeds remaining load {}",
                        inst.demands[j], next.load[k]
                    ),
                });
            }
            next.elapsed[k] += dist(inst.node_pos(next.node[k]), inst.coords[j]) / inst.speeds[k];
            next.node[k] = a;
            next.load[k] -= inst.demands[j];
            next.visited[j] = true;
        }
        Ok(next)
    }

    fn is_terminal(&self, _inst: &HcvrpInstance, state: &HcvrpState) -> bool {
        Self::all_visited(state) && state.node.iter().all(|&n| n == 0)
    }

    fn objective(&self, inst: &HcvrpInstance, trace: &SolutionTrace) -> Result<f64, EnvError> {
        let mut state = self.reset(inst);
        for step in &trace.steps {
            let action = ResolvedAction {
                actions: step.actions.clone(),
                fallback: step.noop.clone(),
            };
            state = self.transition(inst, &state, &action)?;
        }
        if !self.is_terminal(inst, &state) {
            return Err(EnvError::NonTerminal(
                "customers unserved or vehicles away from the depot".into(),
            ));
        }
        Ok(state.elapsed.iter().cloned().fold(0.0, f64::max))
    }

    fn verify(&self, inst: &HcvrpInstance, trace: &SolutionTrace) -> VerificationReport {
        let mut report = VerificationReport::default();
        let n = inst.num_customers();
        let m = inst.num_vehicles();

        let mut pos: Vec<[f64; 2]> = vec![inst.depot; m];
        let mut load = inst.capacities.clone();
        let mut duration = vec![0.0; m];
        let mut served_by: Vec<Option<usize>> = vec![None; n];
        let mut range_err = None;
        let mut double_visit = None;
        let mut overload = None;
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
                if a > n {
                    range_err.get_or_insert((s, k, a));
                    continue;
                }
                if a == 0 {
                    duration[k] += dist(pos[k], inst.depot) / inst.speeds[k];
                    pos[k] = inst.depot;
                    load[k] = inst.capacities[k];
                    continue;
                }
                let j = a - 1;
                if let Some(prev) = served_by[j] {
                    double_visit.get_or_insert((s, k, j, prev));
                }
                if inst.demands[j] > load[k] + 1e-12 {
                    overload.get_or_insert((s, k, j));
                }
                duration[k] += dist(pos[k], inst.coords[j]) / inst.speeds[k];
                pos[k] = inst.coords[j];
                load[k] -= inst.demands[j];
                served_by[j] = Some(k);
            }
        }

        match range_err {
            None => report.pass("action-range"),
            Some((s, k, a)) => {
                report.fail("action-range", format!("step {s}: agent {k} took node {a}"))
            }
        }
        match double_visit {
            None => report.pass("visit-exactly-once"),
            Some((s, k, j, prev)) => report.fail(
                "visit-exactly-once",
                format!("step {s}: agent {k} revisited customer {j} first served by {prev}"),
            ),
        }
        match overload {
            None => report.pass("capacity"),
            Some((s, k, j)) => report.fail(
                "capacity",
                format!("step {s}: agent {k} served customer {j} beyond remaining load"),
            ),
        }
        if let Some(j) = served_by.iter().position(|v| v.is_none()) {
            report.fail("all-customers-served", format!("customer {j} never served"));
        } else {
            report.pass("all-customers-served");
        }
        if let Some(k) = (0..m).find(|&k| pos[k] != inst.depot) {
            report.fail("routes-return-to-depot", format!("agent {k} ended away from the depot"));
        } else {
            report.pass("routes-return-to-depot");
        }
        if let Some(k) = (0..m).find(|&k| load[k] < -1e-12) {
            report.fail("non-negative-load", format!("agent {k} ended with load {}", load[k]));
        } else {
            report.pass("non-negative-load");
        }
        if report.feasible() {
            report.recomputed_objective = Some(duration.iter().cloned().fold(0.0, f64::max));
        }
        report
    }

    fn accumulated_cost(&self, _inst: &HcvrpInstance, state: &HcvrpState, agent: usize) -> f64 {
        state.elapsed[agent]
    }

    fn action_distance(
        &self,
        inst: &HcvrpInstance,
        state: &HcvrpState,
        agent: usize,
        action: usize,
    ) -> f64 {
        dist(inst.node_pos(state.node[agent]), inst.node_pos(action)) / inst.speeds[agent]
    }
}
