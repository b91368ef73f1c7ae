//! Non-neural reference policies: uniform random, nearest-feasible-node
//! dispatch for routing, and shortest-job-first for the flow shop.

use crate::env::Ffsp;
use crate::mdp::{ActionMask, Environment, Policy, PolicyError, ProbGrid};

/// Uniform distribution over each agent's feasible actions.
pub struct RandomPolicy;

impl<E: Environment> Policy<E> for RandomPolicy {
    type Ctx = ();

    fn begin(&self, _inst: &E::Instance) -> Result<(), PolicyError> {
        Ok(())
    }

    fn probabilities(
        &self,
        _inst: &E::Instance,
        _state: &E::State,
        mask: &ActionMask,
        _ctx: &mut (),
    ) -> Result<ProbGrid, PolicyError> {
        let (m, n) = (mask.agents(), mask.actions());
        let mut probs = vec![0.0; m * n];
        for i in 0..m {
            let k = mask.feasible_count(i);
            if k == 0 {
                continue;
            }
            for a in 0..n {
                if mask.get(i, a) {
                    probs[i * n + a] = 1.0 / k as f64;
                }
            }
        }
        Ok(ProbGrid::new(m, n, probs))
    }
}

/// Probability 1 on each agent's nearest feasible action, by the
/// environment's own effort metric. Pair with the closest-agent conflict
/// priority so contested nodes go to whoever is actually nearer.
pub struct GreedyDistancePolicy<E>(pub E);

impl<E: Environment> Policy<E> for GreedyDistancePolicy<E> {
    type Ctx = ();

    fn begin(&self, _inst: &E::Instance) -> Result<(), PolicyError> {
        Ok(())
    }

    fn probabilities(
        &self,
        inst: &E::Instance,
        state: &E::State,
        mask: &ActionMask,
        _ctx: &mut (),
    ) -> Result<ProbGrid, PolicyError> {
        let (m, n) = (mask.agents(), mask.actions());
        let mut probs = vec![0.0; m * n];
        for i in 0..m {
            let mut best: Option<(f64, usize)> = None;
            for a in 0..n {
                if !mask.get(i, a) {
                    continue;
                }
                let d = self.0.action_distance(inst, state, i, a);
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, a));
                }
            }
            if let Some((_, a)) = best {
                probs[i * n + a] = 1.0;
            }
        }
        Ok(ProbGrid::new(m, n, probs))
    }
}

/// Flow-shop dispatch rule: each step, pair idle-capable machines with
/// available jobs in ascending processing time; leftover machines skip.
pub struct SjfPolicy;

impl Policy<Ffsp> for SjfPolicy {
    type Ctx = ();

    fn begin(&self, _inst: &crate::env::FfspInstance) -> Result<(), PolicyError> {
        Ok(())
    }

    fn probabilities(
        &self,
        inst: &crate::env::FfspInstance,
        _state: &crate::env::ffsp::FfspState,
        mask: &ActionMask,
        _ctx: &mut (),
    ) -> Result<ProbGrid, PolicyError> {
        let m = mask.agents();
        let n = inst.num_jobs();
        let mut pairs: Vec<(u32, usize, usize)> = Vec::new();
        for k in 0..m {
            let (stage, local) = inst.machine_stage(k);
            for j in 0..n {
                if mask.get(k, j) {
                    pairs.push((inst.proc_times[stage][j][local], k, j));
                }
            }
        }
        pairs.sort();

        let mut pick = vec![n; m];
        let mut machine_used = vec![false; m];
        let mut job_used = vec![false; n];
        for (_, k, j) in pairs {
            if machine_used[k] || job_used[j] {
                continue;
            }
            machine_used[k] = true;
            job_used[j] = true;
            pick[k] = j;
        }

        let mut probs = vec![0.0; m * (n + 1)];
        for k in 0..m {
            let a = if pick[k] < n {
                pick[k]
            } else {
                // Dummy, unless the engine pinned this row elsewhere.
                (0..=n).rev().find(|&a| mask.get(k, a)).unwrap_or(n)
            };
            probs[k * (n + 1) + a] = 1.0;
        }
        Ok(ProbGrid::new(m, n + 1, probs))
    }
}
