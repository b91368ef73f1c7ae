//! Exhaustive reference solvers for small instances. Each search
//! enumerates complete solutions depth-first with cost-bound pruning and
//! returns both the optimal objective and an action trace realizing it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{dist, Ffsp, FfspInstance, HcvrpInstance, OmdcpdpInstance};
use crate::io::{self, AnyInstance};
use crate::mdp::{EnvError, Environment, ResolvedAction, SolutionTrace, TraceStep};

/// Enumeration ceiling; searches past this many nodes abort.
pub const NODE_LIMIT: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("search exceeded {NODE_LIMIT} enumeration nodes")]
    TooLarge,
    #[error("no feasible solution found")]
    Infeasible,
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub objective: f64,
    pub trace: SolutionTrace,
    pub nodes: u64,
    pub wall_time: f64,
}

struct Budget {
    nodes: u64,
}

impl Budget {
    fn tick(&mut self) -> Result<(), OracleError> {
        self.nodes += 1;
        if self.nodes > NODE_LIMIT {
            Err(OracleError::TooLarge)
        } else {
            Ok(())
        }
    }
}

/// Pad per-agent action sequences into parallel trace steps; exhausted
/// agents are marked as no-ops.
fn routes_to_trace(routes: &[Vec<usize>], objective: f64) -> SolutionTrace {
    let horizon = routes.iter().map(|r| r.len()).max().unwrap_or(0);
    let steps = (0..horizon)
        .map(|t| {
            let actions: Vec<usize> =
                routes.iter().map(|r| r.get(t).copied().unwrap_or(0)).collect();
            let noop: Vec<bool> = routes.iter().map(|r| t >= r.len()).collect();
            TraceStep { actions, noop, conflict_losses: 0, log_prob: 0.0 }
        })
        .collect();
    SolutionTrace { steps, objective, seed: 0, wall_time: 0.0 }
}

// ---------------------------------------------------------------------------
// Heterogeneous CVRP

struct HcvrpSearch<'a> {
    inst: &'a HcvrpInstance,
    visited: Vec<bool>,
    remaining: usize,
    routes: Vec<Vec<usize>>,
    best: f64,
    best_routes: Option<Vec<Vec<usize>>>,
    budget: Budget,
}

impl<'a> HcvrpSearch<'a> {
    fn travel(&self, k: usize, from: usize, to: usize) -> f64 {
        dist(self.inst.node_pos(from), self.inst.node_pos(to)) / self.inst.speeds[k]
    }

    /// Identical vehicles are interchangeable; force their routes into
    /// canonical order by first customer to avoid relabeled duplicates.
    fn first_floor(&self, k: usize) -> usize {
        if k == 0 {
            return 0;
        }
        let same = self.inst.capacities[k] == self.inst.capacities[k - 1]
            && self.inst.speeds[k] == self.inst.speeds[k - 1];
        if !same {
            return 0;
        }
        match self.routes[k - 1].first() {
            Some(&node) => node,
            None => usize::MAX,
        }
    }

    fn place_agent(&mut self, k: usize, max_prev: f64) -> Result<(), OracleError> {
        if k == self.inst.num_vehicles() {
            if self.remaining == 0 && max_prev < self.best {
                self.best = max_prev;
                self.best_routes = Some(self.routes.clone());
            }
            return Ok(());
        }
        let floor = self.first_floor(k);
        self.extend(k, 0, self.inst.capacities[k], 0.0, max_prev, floor)
    }

    fn extend(
        &mut self,
        k: usize,
        pos: usize,
        load: f64,
        dur: f64,
        max_prev: f64,
        first_floor: usize,
    ) -> Result<(), OracleError> {
        self.budget.tick()?;
        if dur >= self.best {
            return Ok(());
        }

        // End the route here and hand off to the next vehicle.
        let finish = if pos == 0 { dur } else { dur + self.travel(k, pos, 0) };
        if finish.max(max_prev) < self.best {
            if pos != 0 {
                self.routes[k].push(0);
            }
            self.place_agent(k + 1, finish.max(max_prev))?;
            if pos != 0 {
                self.routes[k].pop();
            }
        }

        for j in 0..self.inst.num_customers() {
            let node = j + 1;
            if self.visited[j] || self.inst.demands[j] > load {
                continue;
            }
            if self.routes[k].is_empty() && node <= first_floor {
                continue;
            }
            let nd = dur + self.travel(k, pos, node);
            if nd >= self.best {
                continue;
            }
            self.visited[j] = true;
            self.remaining -= 1;
            self.routes[k].push(node);
            self.extend(k, node, load - self.inst.demands[j], nd, max_prev, first_floor)?;
            self.routes[k].pop();
            self.remaining += 1;
            self.visited[j] = false;
        }

        // Mid-route reload; only sensible away from the depot with work left.
        if pos != 0 && self.remaining > 0 && load < self.inst.capacities[k] {
            let nd = dur + self.travel(k, pos, 0);
            if nd < self.best {
                self.routes[k].push(0);
                self.extend(k, 0, self.inst.capacities[k], nd, max_prev, first_floor)?;
                self.routes[k].pop();
            }
        }
        Ok(())
    }
}

pub fn solve_hcvrp(inst: &HcvrpInstance) -> Result<OracleResult, OracleError> {
    inst.validate()?;
    let started = std::time::Instant::now();
    let mut search = HcvrpSearch {
        inst,
        visited: vec![false; inst.num_customers()],
        remaining: inst.num_customers(),
        routes: vec![Vec::new(); inst.num_vehicles()],
        best: f64::INFINITY,
        best_routes: None,
        budget: Budget { nodes: 0 },
    };
    search.place_agent(0, 0.0)?;
    let routes = search.best_routes.ok_or(OracleError::Infeasible)?;
    let mut trace = routes_to_trace(&routes, search.best);
    trace.objective = crate::env::Hcvrp.objective(inst, &trace)?;
    Ok(OracleResult {
        objective: trace.objective,
        trace,
        nodes: search.budget.nodes,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Open pickup-and-delivery

struct OmdSearch<'a> {
    inst: &'a OmdcpdpInstance,
    assigned: Vec<bool>,
    assigned_count: usize,
    routes: Vec<Vec<usize>>,
    best: f64,
    best_routes: Option<Vec<Vec<usize>>>,
    budget: Budget,
}

impl<'a> OmdSearch<'a> {
    fn first_floor(&self, k: usize) -> usize {
        if k == 0 || self.inst.starts[k] != self.inst.starts[k - 1] {
            return 0;
        }
        match self.routes[k - 1].first() {
            Some(&pair) => pair + 1,
            None => usize::MAX,
        }
    }

    fn place_agent(&mut self, k: usize, sum: f64) -> Result<(), OracleError> {
        if k == self.inst.num_vehicles() {
            if self.assigned_count == self.inst.num_pairs() && sum < self.best {
                self.best = sum;
                self.best_routes = Some(self.routes.clone());
            }
            return Ok(());
        }
        let floor = self.first_floor(k);
        self.extend(k, self.inst.starts[k], 0.0, Vec::new(), sum, floor)
    }

    fn extend(
        &mut self,
        k: usize,
        pos: [f64; 2],
        clock: f64,
        carried: Vec<usize>,
        sum: f64,
        first_floor: usize,
    ) -> Result<(), OracleError> {
        self.budget.tick()?;
        if sum >= self.best {
            return Ok(());
        }

        if carried.is_empty() {
            self.place_agent(k + 1, sum)?;
        }

        if carried.len() < self.inst.capacity {
            for j in 0..self.inst.num_pairs() {
                if self.assigned[j] {
                    continue;
                }
                if self.routes[k].is_empty() && j + 1 <= first_floor {
                    continue;
                }
                let t = clock + dist(pos, self.inst.pickups[j]);
                self.assigned[j] = true;
                self.assigned_count += 1;
                self.routes[k].push(j);
                let mut next_carried = carried.clone();
                next_carried.push(j);
                self.extend(k, self.inst.pickups[j], t, next_carried, sum, first_floor)?;
                self.routes[k].pop();
                self.assigned_count -= 1;
                self.assigned[j] = false;
            }
        }

        for (idx, &j) in carried.iter().enumerate() {
            let t = clock + dist(pos, self.inst.deliveries[j]);
            if sum + t >= self.best {
                continue;
            }
            self.routes[k].push(self.inst.num_pairs() + j);
            let mut next_carried = carried.clone();
            next_carried.remove(idx);
            self.extend(k, self.inst.deliveries[j], t, next_carried, sum + t, first_floor)?;
            self.routes[k].pop();
        }
        Ok(())
    }
}

pub fn solve_omdcpdp(inst: &OmdcpdpInstance) -> Result<OracleResult, OracleError> {
    inst.validate()?;
    let started = std::time::Instant::now();
    let mut search = OmdSearch {
        inst,
        assigned: vec![false; inst.num_pairs()],
        assigned_count: 0,
        routes: vec![Vec::new(); inst.num_vehicles()],
        best: f64::INFINITY,
        best_routes: None,
        budget: Budget { nodes: 0 },
    };
    search.place_agent(0, 0.0)?;
    let routes = search.best_routes.ok_or(OracleError::Infeasible)?;
    let mut trace = routes_to_trace(&routes, search.best);
    trace.objective = crate::env::Omdcpdp.objective(inst, &trace)?;
    Ok(OracleResult {
        objective: trace.objective,
        trace,
        nodes: search.budget.nodes,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Flexible flow shop

struct FfspSearch<'a> {
    inst: &'a FfspInstance,
    best: u32,
    /// Ordered job queue per global machine, stage-major, for the winner.
    best_queues: Option<Vec<Vec<usize>>>,
    queues: Vec<Vec<usize>>,
    budget: Budget,
}

impl<'a> FfspSearch<'a> {
    fn stage_dfs(&mut self, stage: usize, avail: &[u32]) -> Result<(), OracleError> {
        if stage == self.inst.stages {
            let makespan = avail.iter().copied().max().unwrap_or(0);
            if makespan < self.best {
                self.best = makespan;
                self.best_queues = Some(self.queues.clone());
            }
            return Ok(());
        }
        let jobs = self.inst.num_jobs();
        let mut assignment = vec![0usize; jobs];
        self.assign_dfs(stage, 0, &mut assignment, avail)
    }

    /// Choose a machine for each job of this stage, then try every
    /// per-machine processing order.
    fn assign_dfs(
        &mut self,
        stage: usize,
        job: usize,
        assignment: &mut Vec<usize>,
        avail: &[u32],
    ) -> Result<(), OracleError> {
        if job == self.inst.num_jobs() {
            let machines = self.inst.machines_per_stage[stage];
            let mut sets: Vec<Vec<usize>> = vec![Vec::new(); machines];
            for (j, &m) in assignment.iter().enumerate() {
                sets[m].push(j);
            }
            let mut completion = avail.to_vec();
            return self.order_dfs(stage, &sets, 0, &mut completion, avail);
        }
        for m in 0..self.inst.machines_per_stage[stage] {
            assignment[job] = m;
            self.assign_dfs(stage, job + 1, assignment, avail)?;
        }
        Ok(())
    }

    /// Permute the jobs of each machine in turn; machines within a stage
    /// only interact through the completion times they produce.
    fn order_dfs(
        &mut self,
        stage: usize,
        sets: &[Vec<usize>],
        machine: usize,
        completion: &mut Vec<u32>,
        avail: &[u32],
    ) -> Result<(), OracleError> {
        self.budget.tick()?;
        if machine == sets.len() {
            if completion.iter().copied().max().unwrap_or(0) >= self.best {
                return Ok(());
            }
            let snapshot = completion.clone();
            return self.stage_dfs(stage + 1, &snapshot);
        }
        let offset: usize = self.inst.machines_per_stage[..stage].iter().sum();
        let global = offset + machine;
        let mut order = sets[machine].clone();
        let len = order.len();
        self.permute(stage, sets, machine, completion, avail, &mut order, 0, len, global)
    }

    #[allow(clippy::too_many_arguments)]
    fn permute(
        &mut self,
        stage: usize,
        sets: &[Vec<usize>],
        machine: usize,
        completion: &mut Vec<u32>,
        avail: &[u32],
        order: &mut Vec<usize>,
        depth: usize,
        len: usize,
        global: usize,
    ) -> Result<(), OracleError> {
        if depth == len {
            let mut free = 0u32;
            let saved: Vec<u32> = order.iter().map(|&j| completion[j]).collect();
            for &j in order.iter() {
                let start = free.max(avail[j]);
                let end = start + self.inst.proc_times[stage][j][machine];
                completion[j] = end;
                free = end;
            }
            self.queues[global] = order.clone();
            self.order_dfs(stage, sets, machine + 1, completion, avail)?;
            self.queues[global].clear();
            for (&j, &c) in order.iter().zip(&saved) {
                completion[j] = c;
            }
            return Ok(());
        }
        for i in depth..len {
            order.swap(depth, i);
            self.permute(stage, sets, machine, completion, avail, order, depth + 1, len, global)?;
            order.swap(depth, i);
        }
        Ok(())
    }
}

/// Replay machine queues into a decode-step trace: each step every machine
/// offers its next queued job if that job is ready, otherwise the dummy.
fn queues_to_trace(inst: &FfspInstance, queues: &[Vec<usize>]) -> Result<SolutionTrace, OracleError> {
    let env = Ffsp;
    let m = inst.total_machines();
    let n = inst.num_jobs();
    let mut cursor = vec![0usize; m];
    let mut state = env.reset(inst);
    let mut steps = Vec::new();
    let limit = 4 * env.step_budget(inst);
    while !env.is_terminal(inst, &state) {
        if steps.len() > limit {
            return Err(OracleError::Infeasible);
        }
        let mut actions = vec![n; m];
        for k in 0..m {
            if let Some(&j) = queues[k].get(cursor[k]) {
                let (stage, _) = inst.machine_stage(k);
                if state.next_stage[j] == stage && state.avail_at[j] <= state.clock {
                    actions[k] = j;
                    cursor[k] += 1;
                }
            }
        }
        let resolved = ResolvedAction { actions: actions.clone(), fallback: vec![false; m] };
        state = env.transition(inst, &state, &resolved)?;
        steps.push(TraceStep {
            actions,
            noop: vec![false; m],
            conflict_losses: 0,
            log_prob: 0.0,
        });
    }
    let mut trace = SolutionTrace { steps, objective: 0.0, seed: 0, wall_time: 0.0 };
    trace.objective = env.objective(inst, &trace)?;
    Ok(trace)
}

pub fn solve_ffsp(inst: &FfspInstance) -> Result<OracleResult, OracleError> {
    inst.validate()?;
    let started = std::time::Instant::now();
    let mut search = FfspSearch {
        inst,
        best: u32::MAX,
        best_queues: None,
        queues: vec![Vec::new(); inst.total_machines()],
        budget: Budget { nodes: 0 },
    };
    let avail = vec![0u32; inst.num_jobs()];
    search.stage_dfs(0, &avail)?;
    let queues = search.best_queues.ok_or(OracleError::Infeasible)?;
    let trace = queues_to_trace(inst, &queues)?;
    debug_assert_eq!(trace.objective, search.best as f64);
    Ok(OracleResult {
        objective: trace.objective,
        trace,
        nodes: search.budget.nodes,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Dispatch and cache

pub fn solve(instance: &AnyInstance) -> Result<OracleResult, OracleError> {
    match instance {
        AnyInstance::Hcvrp(inst) => solve_hcvrp(inst),
        AnyInstance::Omdcpdp(inst) => solve_omdcpdp(inst),
        AnyInstance::Ffsp(inst) => solve_ffsp(inst),
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    objective: f64,
    steps: Vec<Vec<i64>>,
    nodes: u64,
}

pub fn cache_key(instance: &AnyInstance) -> String {
    let mut hasher = Sha256::new();
    hasher.update(instance.kind().name().as_bytes());
    hasher.update(b":");
    hasher.update(instance.canonical_json().as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Solve with a content-addressed disk cache. Cache hits report zero
/// wall time and the recorded node count.
pub fn solve_cached(instance: &AnyInstance, cache_dir: &Path) -> Result<OracleResult, OracleError> {
    std::fs::create_dir_all(cache_dir)?;
    let path = cache_dir.join(format!("{}.json", cache_key(instance)));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(record) = serde_json::from_str::<CacheRecord>(&text) {
            return Ok(OracleResult {
                objective: record.objective,
                trace: io::rows_to_trace(&record.steps, record.objective, 0),
                nodes: record.nodes,
                wall_time: 0.0,
            });
        }
    }
    let result = solve(instance)?;
    let record = CacheRecord {
        objective: result.objective,
        steps: io::trace_to_rows(&result.trace),
        nodes: result.nodes,
    };
    std::fs::write(&path, serde_json::to_string(&record).expect("cache serializes"))?;
    Ok(result)
}
