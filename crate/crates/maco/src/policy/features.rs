//! Numeric views of instances and states for the pointer network.
//!
//! Static features describe the instance once per rollout; dynamic features
//! are recomputed every decode step. One node row exists per action, so
//! special actions (depot, dummy job) are embedded like real nodes through
//! the same projection.

use maco_grad::Tensor;

use crate::env::ffsp::Ffsp;
use crate::env::hcvrp::Hcvrp;
use crate::env::omdcpdp::Omdcpdp;
use crate::mdp::Environment;

/// Largest stage count the FFSP one-hot agent encoding supports. Fixed so
/// parameter shapes stay independent of the instance.
pub const MAX_STAGES: usize = 8;

/// Soft scale applied to processing times and clocks so FFSP features sit
/// near the unit range of the routing features.
const TIME_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Agent and node rows concatenated into one self-attention stack.
    SelfAttention,
    /// Dual cross-attention between agent and node rows with a bias matrix.
    CrossAttention,
}

/// Feature widths the policy allocates its projections for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSpec {
    pub agent_static: usize,
    pub node_static: usize,
    pub agent_dyn: usize,
    pub env_dyn: usize,
    pub node_dyn: usize,
    pub encoder: EncoderKind,
}

/// Environments the pointer policy can drive. Row counts follow the
/// environment: agents x width and actions x width.
pub trait Featurize: Environment {
    fn feature_spec(&self) -> FeatureSpec;
    fn agent_features(&self, inst: &Self::Instance) -> Tensor;
    fn node_features(&self, inst: &Self::Instance) -> Tensor;
    /// Pre-softmax attention bias for the cross encoder, agents x actions.
    fn cross_bias(&self, _inst: &Self::Instance) -> Option<Tensor> {
        None
    }
    fn agent_dynamics(&self, inst: &Self::Instance, state: &Self::State) -> Tensor;
    fn env_features(&self, inst: &Self::Instance, state: &Self::State) -> Tensor;
    fn node_dynamics(&self, inst: &Self::Instance, state: &Self::State) -> Tensor;
}

fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("feature row width is uniform")
}

impl Featurize for Hcvrp {
    fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            agent_static: 4,
            node_static: 3,
            agent_dyn: 4,
            env_dyn: 2,
            node_dyn: 2,
            encoder: EncoderKind::SelfAttention,
        }
    }

    /// Depot position, capacity, speed per vehicle.
    fn agent_features(&self, inst: &Self::Instance) -> Tensor {
        let mut data = Vec::with_capacity(inst.num_vehicles() * 4);
        for k in 0..inst.num_vehicles() {
            data.extend([inst.depot[0], inst.depot[1], inst.capacities[k] / 41.0, inst.speeds[k]]);
        }
        tensor(inst.num_vehicles(), 4, data)
    }

    /// Position and demand per action node; the depot keeps demand 0.
    fn node_features(&self, inst: &Self::Instance) -> Tensor {
        let actions = inst.num_customers() + 1;
        let mut data = Vec::with_capacity(actions * 3);
        for node in 0..actions {
            let p = inst.node_pos(node);
            let demand = if node == 0 { 0.0 } else { inst.demands[node - 1] / 10.0 };
            data.extend([p[0], p[1], demand]);
        }
        tensor(actions, 3, data)
    }

    fn agent_dynamics(&self, inst: &Self::Instance, state: &Self::State) -> Tensor {
        let m = inst.num_vehicles();
        let mut data = Vec::with_capacity(m * 4);
        for k in 0..m {
            let p = inst.node_pos(state.node[k]);
            data.extend([p[0], p[1], state.load[k] / inst.capacities[k], state.elapsed[k] / TIME_SCALE]);
        }
        tensor(m, 4, data)
    }

    fn env_features(&self, inst: &Self::Instance, state: &Self::State) -> Tensor {
        let served = state.visited.iter().filter(|&&v| v).count() as f64;
        let longest = state.elapsed.iter().cloned().fold(0.0, f64::max);
        tensor(1, 2, vec![served / inst.num_customers() as f64, longest / TIME_SCALE])
    }

    fn node_dynamics(&self, inst: &Self::Instance, state: &Self::State) -> Tensor {
        let actions = inst.num_customers() + 1;
        let mut data = Vec::with_capacity(actions * 2);
        data.extend([1.0, 0.0]);
        for j in 0..inst.num_customers() {
            let open = !state.visited[j];
            data.extend([open as u8 as f64, if open { inst.demands[j] / 10.0 } else { 0.0 }]);
        }
        tensor(actions, 2, data)
    }
}

impl Featurize for Omdcpdp {
    fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            agent_static: 3,
            node_static: 6,
            agent_dyn: 4,
            env_dyn: 2,
            node_dyn: 2,
            encoder: EncoderKind::SelfAttention,
        }
    }

    fn agent_features(&self, inst: &Self::Instance) -> Tensor {
        let m = inst.num_vehicles();
        let mut data = Vec::with_capacity(m * 3);
        for k in 0..m {
            data.extend([inst.starts[k][0], inst.starts[k][1], inst.capacity as f64 / 5.0]);
        }
        tensor(m, 3, data)
    }

    /// Own position, pickup/delivery role flags, and the partner position.
    fn node_features(&self, inst: &Self::Instance) -> Tensor {
        let n = inst.num_pairs();
        let mut data = Vec::with_capacity(2 * n * 6);
        for j in 0..n {
            let p = inst.pickups[j];
            let d = inst.deliveries[j];
            data.extend([p[0], p[1], 1.0, 0.0, d[0], d[1]]);
        }
        for j in 0..n {
            let p = inst.pickups[j];
            let d = inst.deliveries[j];
            data.extend([d[0], d[1], 0.0, 1.0, p[0], p[1]]);
        }
        tensor(2 * n, 6, data)
    }

    fn agent_dynamics(&self, inst: &Self::Instance, state: &Self::State) -> Tensor {
        let m = inst.num_vehicles();
        let mut data = Vec::with_capacity(m * 4);
        for k in 0..m {
            data.extend([
                state.pos[k][0],
                state.pos[k][1],
                state.carried[k].len() as f64 / inst.capacity as f64,
                state.clock[k] / TIME_SCALE,
            ]);
        }
        tensor(m, 4, data)
    }

    fn env_features(&self, inst: &Self::Instance, state: &Self::State) -> Tensor {
        let n = inst.num_pairs() as f64;
        let picked = state.picked.iter().filter(|&&v| v).count() as f64;
        let delivered = state.delivered.iter().filter(|&&v| v).count() as f64;
        tensor(1, 2, vec![picked / n, delivered / n])
    }

    fn node_dynamics(&self, inst: &Self::Instance, state: &Self::State) -> Tensor {
        let n = inst.num_pairs();
        let mut data = Vec::with_capacity(2 * n * 2);
        for j in 0..n {
            data.extend([!state.picked[j] as u8 as f64, 0.0]);
        }
        for j in 0..n {
            let in_transit = state.picked[j] && !state.delivered[j];
            data.extend([!state.delivered[j] as u8 as f64, in_transit as u8 as f64]);
        }
        tensor(2 * n, 2, data)
    }
}

impl Featurize for Ffsp {
    fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            agent_static: MAX_STAGES,
            node_static: 3,
            agent_dyn: 2,
            env_dyn: 2,
            node_dyn: 3,
            encoder: EncoderKind::CrossAttention,
        }
    }

    /// One-hot stage membership per machine.
    fn agent_features(&self, inst: &Self::Instance) -> Tensor {
        assert!(inst.stages <= MAX_STAGES, "stage one-hot supports at most {MAX_STAGES} stages");
        let m = inst.total_machines();
        let mut data = vec![0.0; m * MAX_STAGES];
        for k in 0..m {
            let (stage, _) = inst.machine_stage(k);
            data[k * MAX_STAGES + stage] = 1.0;
        }
        tensor(m, MAX_STAGES, data)
    }

    /// Mean and minimum processing time per job; the dummy job is flagged.
    fn node_features(&self, inst: &Self::Instance) -> Tensor {
        let n = inst.num_jobs();
        let mut data = Vec::with_capacity((n + 1) * 3);
        for j in 0..n {
            let mut sum = 0.0;
            let mut count = 0.0;
            let mut min = f64::INFINITY;
            for stage in &inst.proc_times {
                for &p in &stage[j] {
                    sum += p as f64;
                    count += 1.0;
                    min = min.min(p as f64);
                }
            }
            data.extend([sum / count / TIME_SCALE, min / TIME_SCALE, 0.0]);
        }
        data.extend([0.0, 0.0, 1.0]);
        tensor(n + 1, 3, data)
    }

    /// Processing time of each machine-job pair; the dummy column is 0.
    fn cross_bias(&self, inst: &Self::Instance) -> Option<Tensor> {
        let m = inst.total_machines();
        let n = inst.num_jobs();
        let mut data = Vec::with_capacity(m * (n + 1));
        for k in 0..m {
            let (stage, local) = inst.machine_stage(k);
            for j in 0..n {
                data.push(inst.proc_times[stage][j][local] as f64 / TIME_SCALE);
            }
            data.push(0.0);
        }
        Some(tensor(m, n + 1, data))
    }

    fn agent_dynamics(&self, inst: &Self::Instance, state: &Self::State) -> Tensor {
        let m = inst.total_machines();
        let mut data = Vec::with_capacity(m * 2);
        for k in 0..m {
            let backlog = state.idle_at[k].saturating_sub(state.clock) as f64;
            data.extend([backlog / TIME_SCALE, state.clock as f64 / (2.0 * TIME_SCALE)]);
        }
        tensor(m, 2, data)
    }

    fn env_features(&self, inst: &Self::Instance, state: &Self::State) -> Tensor {
        let total_ops = (inst.stages * inst.num_jobs()) as f64;
        tensor(
            1,
            2,
            vec![
                state.ops.len() as f64 / total_ops,
                state.clock as f64 / (2.0 * TIME_SCALE),
            ],
        )
    }

    fn node_dynamics(&self, inst: &Self::Instance, state: &Self::State) -> Tensor {
        let n = inst.num_jobs();
        let s = inst.stages as f64;
        let mut data = Vec::with_capacity((n + 1) * 3);
        for j in 0..n {
            let remaining = (inst.stages - state.next_stage[j]) as f64 / s;
            let ready = state.next_stage[j] < inst.stages && state.avail_at[j] <= state.clock;
            let wait = state.avail_at[j].saturating_sub(state.clock) as f64 / TIME_SCALE;
            data.extend([remaining, ready as u8 as f64, wait]);
        }
        data.extend([0.0, 1.0, 0.0]);
        tensor(n + 1, 3, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ffsp, hcvrp, omdcpdp};

    #[test]
    fn hcvrp_shapes_track_instance_size() {
        let inst = hcvrp::generate(7, 3, 11);
        let state = Hcvrp.reset(&inst);
        let spec = Hcvrp.feature_spec();
        assert_eq!(Hcvrp.agent_features(&inst).shape(), [3, spec.agent_static]);
        assert_eq!(Hcvrp.node_features(&inst).shape(), [8, spec.node_static]);
        assert_eq!(Hcvrp.agent_dynamics(&inst, &state).shape(), [3, spec.agent_dyn]);
        assert_eq!(Hcvrp.env_features(&inst, &state).shape(), [1, spec.env_dyn]);
        assert_eq!(Hcvrp.node_dynamics(&inst, &state).shape(), [8, spec.node_dyn]);
    }

    #[test]
    fn hcvrp_visit_flips_node_dynamics_row() {
        let inst = hcvrp::generate(4, 2, 5);
        let mut state = Hcvrp.reset(&inst);
        assert_eq!(Hcvrp.node_dynamics(&inst, &state).at(2, 0), 1.0);
        state.visited[1] = true;
        let dyn_after = Hcvrp.node_dynamics(&inst, &state);
        assert_eq!(dyn_after.at(2, 0), 0.0);
        assert_eq!(dyn_after.at(2, 1), 0.0);
        // Depot row stays open.
        assert_eq!(dyn_after.at(0, 0), 1.0);
    }

    #[test]
    fn omdcpdp_rows_cover_pickups_then_deliveries() {
        let inst = omdcpdp::generate(3, 2, 9);
        let nodes = Omdcpdp.node_features(&inst);
        assert_eq!(nodes.shape(), [6, 6]);
        // Pickup row 1 points at delivery 1 and vice versa.
        assert_eq!(nodes.at(1, 0), inst.pickups[1][0]);
        assert_eq!(nodes.at(1, 4), inst.deliveries[1][0]);
        assert_eq!(nodes.at(4, 0), inst.deliveries[1][0]);
        assert_eq!(nodes.at(4, 4), inst.pickups[1][0]);
        assert_eq!(nodes.at(1, 2), 1.0);
        assert_eq!(nodes.at(4, 3), 1.0);
    }

    #[test]
    fn ffsp_agent_rows_are_stage_one_hot() {
        let inst = ffsp::generate(3, 2, &[2, 1], 4);
        let agents = Ffsp.agent_features(&inst);
        assert_eq!(agents.shape(), [3, MAX_STAGES]);
        assert_eq!(agents.at(0, 0), 1.0);
        assert_eq!(agents.at(1, 0), 1.0);
        assert_eq!(agents.at(2, 1), 1.0);
        assert_eq!(agents.at(2, 0), 0.0);
    }

    #[test]
    fn ffsp_bias_matches_processing_times() {
        let inst = ffsp::generate(2, 2, &[1, 2], 8);
        let bias = Ffsp.cross_bias(&inst).unwrap();
        assert_eq!(bias.shape(), [3, 3]);
        assert_eq!(bias.at(0, 1), inst.proc_times[0][1][0] as f64 / TIME_SCALE);
        assert_eq!(bias.at(2, 0), inst.proc_times[1][0][1] as f64 / TIME_SCALE);
        // Dummy column carries no preference.
        assert_eq!(bias.at(0, 2), 0.0);
        assert_eq!(bias.at(2, 2), 0.0);
    }

    #[test]
    fn ffsp_dummy_node_always_reads_ready() {
        let inst = ffsp::generate(2, 2, &[1, 1], 3);
        let state = Ffsp.reset(&inst);
        let nd = Ffsp.node_dynamics(&inst, &state);
        assert_eq!(nd.shape(), [3, 3]);
        assert_eq!(nd.at(2, 1), 1.0);
        // Fresh jobs are fully remaining and ready at stage 0.
        assert_eq!(nd.at(0, 0), 1.0);
        assert_eq!(nd.at(0, 1), 1.0);
    }
}
