//! Flexible flow shop: every machine is an agent, jobs pass the stages in
//! order, and the objective is the makespan of the final schedule.
//!
//! Action space per machine: job indices 0..N plus a shareable dummy at
//! index N meaning "schedule nothing this step". Decoding is event-driven:
//! a step with no real assignment advances the clock to the next
//! completion instead of one time unit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{
    ActionMask, EnvError, Environment, ResolvedAction, SolutionTrace, VerificationReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfspInstance {
    pub stages: usize,
    pub machines_per_stage: Vec<usize>,
    /// Processing times indexed stage, job, machine-within-stage.
    pub proc_times: Vec<Vec<Vec<u32>>>,
}

impl FfspInstance {
    pub fn num_jobs(&self) -> usize {
        self.proc_times.first().map_or(0, |stage| stage.len())
    }

    pub fn total_machines(&self) -> usize {
        self.machines_per_stage.iter().sum()
    }

    /// Stage and within-stage index of a global machine id.
    pub fn machine_stage(&self, machine: usize) -> (usize, usize) {
        let mut offset = 0;
        for (s, &count) in self.machines_per_stage.iter().enumerate() {
            if machine < offset + count {
                return (s, machine - offset);
            }
            offset += count;
        }
        panic!("machine {machine} out of range");
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidInstance(msg));
        if self.stages == 0 {
            return bad("no stages".into());
        }
        if self.machines_per_stage.len() != self.stages {
            return bad(format!(
                "{} machine counts for {} stages",
                self.machines_per_stage.len(),
                self.stages
            ));
        }
        if self.machines_per_stage.iter().any(|&c| c == 0) {
            return bad("stage without machines".into());
        }
        if self.proc_times.len() != self.stages {
            return bad(format!(
                "{} processing-time tables for {} stages",
                self.proc_times.len(),
                self.stages
            ));
        }
        let jobs = self.num_jobs();
        if jobs == 0 {
            return bad("no jobs".into());
        }
        for (s, table) in self.proc_times.iter().enumerate() {
            if table.len() != jobs {
                return bad(format!("stage {s} lists {} jobs, expected {jobs}", table.len()));
            }
            for (j, row) in table.iter().enumerate() {
                if row.len() != self.machines_per_stage[s] {
                    return bad(format!(
                        "stage {s} job {j} lists {} machines, expected {}",
                        row.len(),
                        self.machines_per_stage[s]
                    ));
                }
                if row.iter().any(|&p| p == 0) {
                    return bad(format!("stage {s} job {j} has a zero processing time"));
                }
            }
        }
        Ok(())
    }
}

/// Draw an instance with integer processing times uniform on [2, 10].
pub fn generate(jobs: usize, stages: usize, machines_per_stage: &[usize], seed: u64) -> FfspInstance {
    assert_eq!(machines_per_stage.len(), stages);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proc_times = (0..stages)
        .map(|s| {
            (0..jobs)
                .map(|_| (0..machines_per_stage[s]).map(|_| rng.gen_range(2..=10)).collect())
                .collect()
        })
        .collect();
    FfspInstance { stages, machines_per_stage: machines_per_stage.to_vec(), proc_times }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledOp {
    pub stage: usize,
    pub job: usize,
    /// Global machine id.
    pub machine: usize,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone)]
pub struct FfspState {
    pub clock: u32,
    pub idle_at: Vec<u32>,
    /// Next stage each job needs; equal to `stages` once done.
    pub next_stage: Vec<usize>,
    /// Completion time of the job's latest scheduled stage.
    pub avail_at: Vec<u32>,
    pub ops: Vec<ScheduledOp>,
}

#[derive(Clone, Copy)]
pub struct Ffsp;

impl Environment for Ffsp {
    type Instance = FfspInstance;
    type State = FfspState;

    fn num_agents(&self, inst: &FfspInstance) -> usize {
        inst.total_machines()
    }

    fn num_actions(&self, inst: &FfspInstance) -> usize {
        inst.num_jobs() + 1
    }

    fn reset(&self, inst: &FfspInstance) -> FfspState {
        FfspState {
            clock: 0,
            idle_at: vec![0; inst.total_machines()],
            next_stage: vec![0; inst.num_jobs()],
            avail_at: vec![0; inst.num_jobs()],
            ops: Vec::new(),
        }
    }

    fn action_mask(&self, inst: &FfspInstance, state: &FfspState) -> ActionMask {
        let m = inst.total_machines();
        let n = inst.num_jobs();
        let mut mask = ActionMask::new_false(m, n + 1);
        for k in 0..m {
            let (stage, _) = inst.machine_stage(k);
            for j in 0..n {
                mask.set(
                    k,
                    j,
                    state.next_stage[j] == stage && state.avail_at[j] <= state.clock,
                );
            }
            mask.set(k, n, true);
        }
        mask
    }

    fn fallback_actions(&self, inst: &FfspInstance, _state: &FfspState) -> Vec<usize> {
        vec![inst.num_jobs(); inst.total_machines()]
    }

    fn shareable_actions(&self, inst: &FfspInstance, _state: &FfspState) -> Vec<bool> {
        let mut s = vec![false; inst.num_jobs() + 1];
        s[inst.num_jobs()] = true;
        s
    }

    fn finished_agents(&self, inst: &FfspInstance, state: &FfspState) -> Vec<bool> {
        (0..inst.total_machines())
            .map(|k| {
                let (stage, _) = inst.machine_stage(k);
                state.next_stage.iter().all(|&s| s > stage)
            })
            .collect()
    }

    fn transition(
        &self,
        inst: &FfspInstance,
        state: &FfspState,
        action: &ResolvedAction,
    ) -> Result<FfspState, EnvError> {
        let n = inst.num_jobs();
        let mut next = state.clone();
        let mut assigned = false;
        for (k, (&a, &skip)) in action.actions.iter().zip(&action.fallback).enumerate() {
            if skip || a == n {
                continue;
            }
            if a > n {
                return Err(EnvError::InvalidAction {
                    agent: k,
                    action: a,
                    reason: "job index out of range".into(),
                });
            }
            let (stage, local) = inst.machine_stage(k);
            if next.next_stage[a] != stage {
                return Err(EnvError::InvalidAction {
                    agent: k,
                    action: a,
                    reason: format!("job is at stage {}, machine serves {stage}", next.next_stage[a]),
                });
            }
            if next.avail_at[a] > next.clock {
                return Err(EnvError::InvalidAction {
                    agent: k,
                    action: a,
                    reason: "job still in flight at the previous stage".into(),
                });
            }
            let start = next.idle_at[k].max(next.avail_at[a]);
            let end = start + inst.proc_times[stage][a][local];
            next.idle_at[k] = end;
            next.next_stage[a] = stage + 1;
            next.avail_at[a] = end;
            next.ops.push(ScheduledOp { stage, job: a, machine: k, start, end });
            assigned = true;
        }
        if !assigned {
            // All-dummy step: jump to the next completion that unlocks work.
            let horizon = next
                .avail_at
                .iter()
                .zip(&next.next_stage)
                .filter(|&(&avail, &stage)| stage < inst.stages && avail > next.clock)
                .map(|(&avail, _)| avail)
                .min();
            if let Some(t) = horizon {
                next.clock = t;
            }
        }
        Ok(next)
    }

    fn is_terminal(&self, inst: &FfspInstance, state: &FfspState) -> bool {
        state.next_stage.iter().all(|&s| s == inst.stages)
    }

    fn objective(&self, inst: &FfspInstance, trace: &SolutionTrace) -> Result<f64, EnvError> {
        let mut state = self.reset(inst);
        for step in &trace.steps {
            let action = ResolvedAction {
                actions: step.actions.clone(),
                fallback: step.noop.clone(),
            };
            state = self.transition(inst, &state, &action)?;
        }
        if !self.is_terminal(inst, &state) {
            return Err(EnvError::NonTerminal("unscheduled job-stage pairs remain".into()));
        }
        Ok(state.avail_at.iter().copied().max().unwrap_or(0) as f64)
    }

    fn verify(&self, inst: &FfspInstance, trace: &SolutionTrace) -> VerificationReport {
        let mut report = VerificationReport::default();
        let n = inst.num_jobs();
        let m = inst.total_machines();

        // Re-derive the schedule from the raw actions, checking decode-time
        // availability as we go.
        let mut clock = 0u32;
        let mut idle_at = vec![0u32; m];
        let mut next_stage = vec![0usize; n];
        let mut avail_at = vec![0u32; n];
        let mut ops: Vec<ScheduledOp> = Vec::new();
        let mut bad_action = None;
        for (s, step) in trace.steps.iter().enumerate() {
            if step.actions.len() != m || step.noop.len() != m {
                report.fail(
                    "trace-shape",
                    format!("step {s} has {} agent slots, expected {m}", step.actions.len()),
                );
                return report;
            }
            let mut assigned = false;
            for k in 0..m {
                if step.noop[k] || step.actions[k] == n {
                    continue;
                }
                let a = step.actions[k];
                let (stage, local) = inst.machine_stage(k);
                if a > n || next_stage[a] != stage || avail_at[a] > clock {
                    bad_action.get_or_insert((s, k, a));
                    continue;
                }
                let start = idle_at[k].max(avail_at[a]);
                let end = start + inst.proc_times[stage][a][local];
                idle_at[k] = end;
                next_stage[a] = stage + 1;
                avail_at[a] = end;
                ops.push(ScheduledOp { stage, job: a, machine: k, start, end });
                assigned = true;
            }
            if !assigned {
                if let Some(t) = avail_at
                    .iter()
                    .zip(&next_stage)
                    .filter(|&(&avail, &st)| st < inst.stages && avail > clock)
                    .map(|(&avail, _)| avail)
                    .min()
                {
                    clock = t;
                }
            }
        }
        match bad_action {
            None => report.pass("availability"),
            Some((s, k, a)) => report.fail(
                "availability",
                format!("step {s}: machine {k} selected job {a} that was not assignable"),
            ),
        }
        audit_schedule(inst, &ops, &mut report);
        if report.feasible() {
            report.recomputed_objective =
                Some(ops.iter().map(|op| op.end).max().unwrap_or(0) as f64);
        }
        report
    }

    fn accumulated_cost(&self, _inst: &FfspInstance, state: &FfspState, agent: usize) -> f64 {
        state.idle_at[agent] as f64
    }

    fn action_distance(
        &self,
        inst: &FfspInstance,
        _state: &FfspState,
        agent: usize,
        action: usize,
    ) -> f64 {
        if action >= inst.num_jobs() {
            0.0
        } else {
            let (stage, local) = inst.machine_stage(agent);
            inst.proc_times[stage][action][local] as f64
        }
    }
}

/// Check a schedule against the shop constraints: one machine per
/// job-stage, no overlap per machine, stage order per job, and interval
/// lengths equal to the processing times.
pub fn audit_schedule(inst: &FfspInstance, ops: &[ScheduledOp], report: &mut VerificationReport) {
    let n = inst.num_jobs();
    let mut per_pair: Vec<Vec<&ScheduledOp>> = vec![Vec::new(); n * inst.stages];
    for op in ops {
        per_pair[op.job * inst.stages + op.stage].push(op);
    }
    let dup = (0..n * inst.stages).find(|&i| per_pair[i].len() > 1);
    match dup {
        None => report.pass("assign-once-per-stage"),
        Some(i) => report.fail(
            "assign-once-per-stage",
            format!("job {} scheduled {} times at stage {}", i / inst.stages, per_pair[i].len(), i % inst.stages),
        ),
    }
    let missing = (0..n * inst.stages).find(|&i| per_pair[i].is_empty());
    match missing {
        None => report.pass("all-scheduled"),
        Some(i) => report.fail(
            "all-scheduled",
            format!("job {} never scheduled at stage {}", i / inst.stages, i % inst.stages),
        ),
    }

    let mut per_machine: Vec<Vec<&ScheduledOp>> = vec![Vec::new(); inst.total_machines()];
    for op in ops {
        per_machine[op.machine].push(op);
    }
    let mut overlap = None;
    for (k, intervals) in per_machine.iter_mut().enumerate() {
        intervals.sort_by_key(|op| op.start);
        for pair in intervals.windows(2) {
            if pair[1].start < pair[0].end {
                overlap.get_or_insert((k, pair[0].clone(), pair[1].clone()));
            }
        }
    }
    match overlap {
        None => report.pass("machine-overlap"),
        Some((k, a, b)) => report.fail(
            "machine-overlap",
            format!(
                "machine {k} runs jobs {} [{},{}] and {} [{},{}] concurrently",
                a.job, a.start, a.end, b.job, b.start, b.end
            ),
        ),
    }

    let mut precedence = None;
    let mut arithmetic = None;
    for op in ops {
        let (_, local) = inst.machine_stage(op.machine);
        if op.end != op.start + inst.proc_times[op.stage][op.job][local] {
            arithmetic.get_or_insert(op.clone());
        }
        if op.stage > 0 {
            if let Some(prev) = per_pair[op.job * inst.stages + op.stage - 1].first() {
                if op.start < prev.end {
                    precedence.get_or_insert(op.clone());
                }
            }
        }
    }
    match precedence {
        None => report.pass("stage-precedence"),
        Some(op) => report.fail(
            "stage-precedence",
            format!("job {} starts stage {} at {} before finishing the prior stage", op.job, op.stage, op.start),
        ),
    }
    match arithmetic {
        None => report.pass("completion-arithmetic"),
        Some(op) => report.fail(
            "completion-arithmetic",
            format!("job {} stage {}: interval [{},{}] does not match its processing time", op.job, op.stage, op.start, op.end),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::RandomPolicy;
    use crate::mdp::{rollout, DecodeMode, PriorityKind, RolloutOptions, TraceStep};

    fn trace_of(steps: Vec<Vec<usize>>) -> SolutionTrace {
        let steps = steps
            .into_iter()
            .map(|actions| {
                let noop = vec![false; actions.len()];
                TraceStep { actions, noop, conflict_losses: 0, log_prob: 0.0 }
            })
            .collect();
        SolutionTrace { steps, objective: 0.0, seed: 0, wall_time: 0.0 }
    }

    fn chain_instance() -> FfspInstance {
        FfspInstance {
            stages: 2,
            machines_per_stage: vec![1, 1],
            proc_times: vec![vec![vec![3]], vec![vec![2]]],
        }
    }

    #[test]
    fn single_job_chain_makespan_is_the_sum() {
        let inst = chain_instance();
        let env = Ffsp;
        // Dummy is action 1 here. Step 2 is all-dummy: the clock jumps to
        // the stage-1 completion so stage 2 can pick the job up.
        let trace = trace_of(vec![vec![0, 1], vec![1, 1], vec![1, 0]]);
        assert_eq!(env.objective(&inst, &trace).unwrap(), 5.0);
    }

    #[test]
    fn clock_advances_only_on_all_dummy_steps() {
        let inst = chain_instance();
        let env = Ffsp;
        let s0 = env.reset(&inst);
        let s1 = env
            .transition(
                &inst,
                &s0,
                &ResolvedAction { actions: vec![0, 1], fallback: vec![false, false] },
            )
            .unwrap();
        assert_eq!(s1.clock, 0);
        assert_eq!(s1.avail_at[0], 3);
        let s2 = env
            .transition(
                &inst,
                &s1,
                &ResolvedAction { actions: vec![1, 1], fallback: vec![false, false] },
            )
            .unwrap();
        assert_eq!(s2.clock, 3);
        let s3 = env
            .transition(
                &inst,
                &s2,
                &ResolvedAction { actions: vec![1, 0], fallback: vec![false, false] },
            )
            .unwrap();
        assert!(env.is_terminal(&inst, &s3));
        assert_eq!(s3.ops.last().unwrap().start, 3);
        assert_eq!(s3.ops.last().unwrap().end, 5);
    }

    #[test]
    fn single_machine_pair_of_jobs_makespan_is_seven_either_order() {
        let inst = FfspInstance {
            stages: 1,
            machines_per_stage: vec![1],
            proc_times: vec![vec![vec![3], vec![4]]],
        };
        let env = Ffsp;
        let a = trace_of(vec![vec![0], vec![1]]);
        let b = trace_of(vec![vec![1], vec![0]]);
        assert_eq!(env.objective(&inst, &a).unwrap(), 7.0);
        assert_eq!(env.objective(&inst, &b).unwrap(), 7.0);
    }

    #[test]
    fn start_time_is_the_later_of_machine_and_job() {
        let inst = FfspInstance {
            stages: 2,
            machines_per_stage: vec![1, 1],
            proc_times: vec![vec![vec![1]], vec![vec![3]]],
        };
        let env = Ffsp;
        // Busy machine, job ready earlier: the job queues until 6.
        let state = FfspState {
            clock: 4,
            idle_at: vec![1, 6],
            next_stage: vec![1],
            avail_at: vec![4],
            ops: Vec::new(),
        };
        let next = env
            .transition(
                &inst,
                &state,
                &ResolvedAction { actions: vec![1, 0], fallback: vec![false, false] },
            )
            .unwrap();
        let op = next.ops.last().unwrap();
        assert_eq!((op.start, op.end), (6, 9));

        // Idle machine, job finishing later: the machine waits until 6.
        let state = FfspState {
            clock: 6,
            idle_at: vec![1, 4],
            next_stage: vec![1],
            avail_at: vec![6],
            ops: Vec::new(),
        };
        let next = env
            .transition(
                &inst,
                &state,
                &ResolvedAction { actions: vec![1, 0], fallback: vec![false, false] },
            )
            .unwrap();
        let op = next.ops.last().unwrap();
        assert_eq!((op.start, op.end), (6, 9));
    }

    #[test]
    fn mask_respects_stage_order_and_flight_time() {
        let inst = FfspInstance {
            stages: 2,
            machines_per_stage: vec![1, 1],
            proc_times: vec![vec![vec![3], vec![2]], vec![vec![2], vec![2]]],
        };
        let env = Ffsp;
        let s0 = env.reset(&inst);
        let mask = env.action_mask(&inst, &s0);
        assert_eq!(mask.row(0), &[true, true, true]);
        assert_eq!(mask.row(1), &[false, false, true]);

        let s1 = env
            .transition(
                &inst,
                &s0,
                &ResolvedAction { actions: vec![0, 2], fallback: vec![false, false] },
            )
            .unwrap();
        let mask = env.action_mask(&inst, &s1);
        // Job 0 is in flight at stage 1 until t=3: not yet offered to
        // stage 2, no longer offered to stage 1.
        assert_eq!(mask.row(0), &[false, true, true]);
        assert_eq!(mask.row(1), &[false, false, true]);
    }

    #[test]
    fn sampled_rollouts_verify_and_beat_the_critical_path() {
        let env = Ffsp;
        for seed in 0..25 {
            let inst = generate(4, 2, &[2, 2], 500 + seed);
            inst.validate().unwrap();
            let opts = RolloutOptions {
                mode: DecodeMode::Sample,
                priority: PriorityKind::Random,
                seed,
            };
            let (trace, _) = rollout(&env, &inst, &RandomPolicy, &opts).unwrap();
            let report = env.verify(&inst, &trace);
            assert!(report.feasible(), "{:?}", report.first_violation());
            assert_eq!(report.recomputed_objective.unwrap(), trace.objective);
            assert_eq!(trace.objective.fract(), 0.0);
            let bound = (0..inst.num_jobs())
                .map(|j| {
                    (0..inst.stages)
                        .map(|s| inst.proc_times[s][j].iter().copied().min().unwrap())
                        .sum::<u32>()
                })
                .max()
                .unwrap();
            assert!(trace.objective >= bound as f64);
        }
    }

    #[test]
    fn forged_early_stage_two_selection_is_named() {
        let inst = chain_instance();
        let env = Ffsp;
        // Stage 2 grabs the job before stage 1 ever ran.
        let trace = trace_of(vec![vec![1, 0], vec![0, 1]]);
        let report = env.verify(&inst, &trace);
        assert!(!report.feasible());
        assert_eq!(report.first_violation().unwrap().constraint, "availability");
    }

    #[test]
    fn forged_overlapping_schedule_is_named() {
        let inst = FfspInstance {
            stages: 1,
            machines_per_stage: vec![1],
            proc_times: vec![vec![vec![3], vec![4]]],
        };
        let mut report = VerificationReport::default();
        let ops = vec![
            ScheduledOp { stage: 0, job: 0, machine: 0, start: 0, end: 3 },
            ScheduledOp { stage: 0, job: 1, machine: 0, start: 2, end: 6 },
        ];
        audit_schedule(&inst, &ops, &mut report);
        assert!(!report.feasible());
        assert_eq!(report.first_violation().unwrap().constraint, "machine-overlap");
    }

    #[test]
    fn forged_precedence_break_is_named() {
        let inst = chain_instance();
        let mut report = VerificationReport::default();
        let ops = vec![
            ScheduledOp { stage: 0, job: 0, machine: 0, start: 0, end: 3 },
            ScheduledOp { stage: 1, job: 0, machine: 1, start: 2, end: 4 },
        ];
        audit_schedule(&inst, &ops, &mut report);
        assert!(!report.feasible());
        assert_eq!(report.first_violation().unwrap().constraint, "stage-precedence");
    }

    #[test]
    fn generator_is_seeded_and_in_range() {
        let a = generate(5, 3, &[2, 2, 2], 21);
        let b = generate(5, 3, &[2, 2, 2], 21);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        a.validate().unwrap();
        assert_eq!(a.num_jobs(), 5);
        assert_eq!(a.total_machines(), 6);
        let all_in_range = a
            .proc_times
            .iter()
            .flatten()
            .flatten()
            .all(|&p| (2..=10).contains(&p));
        assert!(all_in_range);
    }
}
