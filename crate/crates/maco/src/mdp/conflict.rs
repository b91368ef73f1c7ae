//! Priority-based conflict resolution for simultaneous action proposals.

use serde::{Deserialize, Serialize};

use super::ResolvedAction;

/// Source of the per-agent priority scores fed to [`resolve_conflicts`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorityKind {
    /// Uniform random scores drawn per step.
    Random,
    /// Probability the policy assigned to the agent's chosen action.
    Learned,
    /// Negated accumulated cost: cheapest-so-far agent wins.
    SmallestCost,
    /// Negated distance to the proposed action: nearest agent wins.
    Closest,
}

/// Keep the highest-priority claimant of each contested action; losers take
/// their fallback with the flag raised. Ties break toward the lowest agent
/// index. Shareable actions are never contested.
pub fn resolve_conflicts(
    proposed: &[usize],
    priorities: &[f64],
    fallbacks: &[usize],
    shareable: &[bool],
) -> ResolvedAction {
    assert_eq!(proposed.len(), priorities.len());
    assert_eq!(proposed.len(), fallbacks.len());

    let n = proposed.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps equal priorities in index order.
    order.sort_by(|&a, &b| priorities[b].total_cmp(&priorities[a]));

    let mut actions = proposed.to_vec();
    let mut fallback = vec![false; n];
    let mut claimed = vec![false; shareable.len()];
    for &agent in &order {
        let want = proposed[agent];
        if shareable[want] {
            continue;
        }
        if claimed[want] {
            actions[agent] = fallbacks[agent];
            fallback[agent] = true;
        } else {
            claimed[want] = true;
        }
    }
    ResolvedAction { actions, fallback }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shareable_only(action: usize, len: usize) -> Vec<bool> {
        (0..len).map(|a| a == action).collect()
    }

    #[test]
    fn highest_priority_keeps_contested_action() {
        let r = resolve_conflicts(
            &[7, 7, 3],
            &[0.2, 0.8, 0.5],
            &[0, 1, 2],
            &shareable_only(0, 8),
        );
        assert_eq!(r.actions, vec![0, 7, 3]);
        assert_eq!(r.fallback, vec![true, false, false]);
    }

    #[test]
    fn three_way_conflict_leaves_one_winner() {
        let r = resolve_conflicts(
            &[4, 4, 4],
            &[0.1, 0.9, 0.5],
            &[0, 1, 2],
            &shareable_only(0, 5),
        );
        assert_eq!(r.actions, vec![0, 4, 2]);
        assert_eq!(r.fallback, vec![true, false, true]);
    }

    #[test]
    fn equal_priorities_break_toward_lowest_index() {
        let r = resolve_conflicts(
            &[5, 5],
            &[0.3, 0.3],
            &[0, 0],
            &shareable_only(0, 6),
        );
        assert_eq!(r.actions, vec![5, 0]);
        assert_eq!(r.fallback, vec![false, true]);
    }

    #[test]
    fn shareable_action_admits_everyone() {
        let r = resolve_conflicts(
            &[0, 0, 0],
            &[0.1, 0.2, 0.3],
            &[0, 0, 0],
            &shareable_only(0, 3),
        );
        assert_eq!(r.actions, vec![0, 0, 0]);
        assert_eq!(r.fallback, vec![false, false, false]);
    }

    #[test]
    fn distinct_proposals_pass_through() {
        let r = resolve_conflicts(
            &[1, 2, 3],
            &[0.5, 0.5, 0.5],
            &[0, 0, 0],
            &shareable_only(0, 4),
        );
        assert_eq!(r.actions, vec![1, 2, 3]);
        assert_eq!(r.fallback, vec![false, false, false]);
    }

    /// Reference resolver: walk agents in priority order, granting each
    /// claim one at a time.
    fn sequential_oracle(
        proposed: &[usize],
        priorities: &[f64],
        fallbacks: &[usize],
        shareable: &[bool],
    ) -> ResolvedAction {
        let n = proposed.len();
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut actions = vec![0usize; n];
        let mut fallback = vec![false; n];
        let mut taken = vec![false; shareable.len()];
        while !remaining.is_empty() {
            let best = remaining
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    priorities[a]
                        .total_cmp(&priorities[b])
                        .then(b.cmp(&a))
                })
                .unwrap();
            remaining.retain(|&a| a != best);
            let want = proposed[best];
            if !shareable[want] && taken[want] {
                actions[best] = fallbacks[best];
                fallback[best] = true;
            } else {
                actions[best] = want;
                taken[want] = true;
            }
        }
        ResolvedAction { actions, fallback }
    }

    #[test]
    fn matches_sequential_resolution_on_random_cases() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..500 {
            let n = rng.gen_range(1..8);
            let num_actions = rng.gen_range(2..10);
            let proposed: Vec<usize> =
                (0..n).map(|_| rng.gen_range(0..num_actions)).collect();
            let priorities: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let fallbacks: Vec<usize> = vec![0; n];
            let mut shareable = vec![false; num_actions];
            shareable[0] = true;
            let got = resolve_conflicts(&proposed, &priorities, &fallbacks, &shareable);
            let want = sequential_oracle(&proposed, &priorities, &fallbacks, &shareable);
            assert_eq!(got, want);
        }
    }
}
