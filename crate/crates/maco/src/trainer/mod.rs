//! Policy-gradient training: sampled rollouts share a per-instance mean
//! baseline, gradients flow through the recorded log-probabilities, and
//! every epoch derives its randomness from the run seed so interrupted
//! runs resume bit-exactly.

pub mod augment;

pub use augment::Augment;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use maco_grad::{
    load_checkpoint, save_checkpoint, Adam, CheckpointError, GradAccum, GradError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch;
use crate::env::{ffsp, hcvrp, omdcpdp, EnvKind, Ffsp, Hcvrp, Omdcpdp};
use crate::mdp::{rollout, DecodeMode, PriorityKind, RolloutError, RolloutOptions};
use crate::policy::{Featurize, PointerPolicy, PolicyConfig};
use crate::seed;

/// Salt separating augmentation randomness from rollout randomness.
const AUGMENT_SALT: u64 = 0x61;
/// Salt separating the held-out instance stream from training streams.
const HELDOUT_SALT: u64 = 0x4845;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("rollout: {0}")]
    Rollout(#[from] RolloutError),
    #[error("gradient engine: {0}")]
    Grad(#[from] GradError),
    #[error("non-finite loss {loss} ({context})")]
    NonFinite { loss: f64, context: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("configuration: {0}")]
    Config(String),
}

/// Rewards with their per-instance mean baselines and centered advantages.
#[derive(Debug, Clone)]
pub struct AdvantageGrid {
    pub rewards: Vec<Vec<f64>>,
    pub baselines: Vec<f64>,
    pub advantages: Vec<Vec<f64>>,
}

/// Mean reward per instance across its samples.
pub fn shared_baseline(rewards: &[Vec<f64>]) -> Vec<f64> {
    rewards
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect()
}

impl AdvantageGrid {
    pub fn from_rewards(rewards: Vec<Vec<f64>>) -> Self {
        let baselines = shared_baseline(&rewards);
        let advantages = rewards
            .iter()
            .zip(&baselines)
            .map(|(row, b)| row.iter().map(|r| r - b).collect())
            .collect();
        Self { rewards, baselines, advantages }
    }
}

/// Step-decayed learning rate; each milestone already passed multiplies the
/// base rate by `decay` once.
pub fn lr_for_epoch(base: f64, decay: f64, milestones: &[usize], epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch > m).count();
    base * decay.powi(passed as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: EnvKind,
    /// Instances per optimizer step.
    pub batch_size: usize,
    /// Sampled rollouts per instance sharing one baseline.
    pub samples: usize,
    pub epochs: usize,
    pub instances_per_epoch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub seed: u64,
    /// Customer / pair / job count range, inclusive.
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Vehicle count range, inclusive; ignored for ffsp where the machine
    /// layout below fixes the agent count.
    pub min_agents: usize,
    pub max_agents: usize,
    pub stages: usize,
    pub machines_per_stage: Vec<usize>,
    /// Rotate/reflect (routing) or relabel machines (ffsp) per sample so
    /// one baseline covers symmetric variants.
    pub augment: bool,
    pub priority: PriorityKind,
    pub policy: PolicyConfig,
    pub heldout_instances: usize,
    /// Epoch period of held-out evaluation and checkpointing.
    pub eval_every: usize,
}

impl TrainConfig {
    /// Single-machine defaults; full-scale values go through the same file.
    pub fn desk(env: EnvKind) -> Self {
        let mut policy = PolicyConfig::desk();
        if env == EnvKind::Ffsp {
            policy.norm = crate::policy::NormKind::Instance;
        }
        Self {
            env,
            batch_size: 64,
            samples: 8,
            epochs: 50,
            instances_per_epoch: 2000,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_milestones: vec![80, 95],
            seed: 1,
            min_nodes: 10,
            max_nodes: 20,
            min_agents: 2,
            max_agents: 3,
            stages: 3,
            machines_per_stage: vec![2, 2, 2],
            augment: true,
            priority: PriorityKind::Learned,
            policy,
            heldout_instances: 64,
            eval_every: 10,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 || self.samples == 0 || self.epochs == 0 {
            return Err("batch_size, samples, and epochs must be positive".into());
        }
        if self.instances_per_epoch == 0 {
            return Err("instances_per_epoch must be positive".into());
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return Err(format!("bad node range [{}, {}]", self.min_nodes, self.max_nodes));
        }
        if self.min_agents == 0 || self.min_agents > self.max_agents {
            return Err(format!("bad agent range [{}, {}]", self.min_agents, self.max_agents));
        }
        if self.env == EnvKind::Ffsp
            && (self.stages == 0 || self.machines_per_stage.len() != self.stages)
        {
            return Err(format!(
                "{} machine counts for {} stages",
                self.machines_per_stage.len(),
                self.stages
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err("learning rate and decay must be positive".into());
        }
        if self.eval_every == 0 || self.heldout_instances == 0 {
            return Err("eval_every and heldout_instances must be positive".into());
        }
        self.policy.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PassStats {
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_steps: f64,
    pub conflict_rate: f64,
}

struct InstanceOut {
    accum: GradAccum,
    loss: f64,
    reward_sum: f64,
    steps_sum: f64,
    conflict_sum: f64,
}

/// Sample `samples` rollouts per instance, center rewards on the instance
/// mean, and push every weighted log-probability gradient into one buffer.
/// The returned loss is -(1/(B*S)) sum of advantage times log-probability.
pub fn reinforce_pass<E>(
    env: &E,
    policy: &PointerPolicy<E>,
    instances: &[E::Instance],
    samples: usize,
    priority: PriorityKind,
    use_augment: bool,
    base_seed: u64,
) -> Result<(PassStats, GradAccum), TrainError>
where
    E: Featurize + Augment + Clone + Sync,
    E::Instance: Clone + Sync,
{
    let b = instances.len();
    assert!(b > 0 && samples > 0);
    let scale = 1.0 / (b * samples) as f64;

    let outs: Vec<Result<InstanceOut, TrainError>> = batch::map_range(b, |i| {
        let mut rollouts = Vec::with_capacity(samples);
        for j in 0..samples {
            let inst = if use_augment {
                env.augment(
                    &instances[i],
                    j,
                    seed::mix(base_seed, &[i as u64, j as u64, AUGMENT_SALT]),
                )
            } else {
                instances[i].clone()
            };
            let opts = RolloutOptions {
                mode: DecodeMode::Sample,
                priority,
                seed: seed::mix(base_seed, &[i as u64, j as u64]),
            };
            rollouts.push(rollout(env, &inst, policy, &opts)?);
        }
        let rewards: Vec<f64> = rollouts.iter().map(|(t, _)| -t.objective).collect();
        let baseline = rewards.iter().sum::<f64>() / samples as f64;
        let mut out = InstanceOut {
            accum: GradAccum::zeros_like(policy.params()),
            loss: 0.0,
            reward_sum: rewards.iter().sum(),
            steps_sum: 0.0,
            conflict_sum: 0.0,
        };
        for ((trace, ctx), reward) in rollouts.iter().zip(&rewards) {
            out.steps_sum += trace.num_steps() as f64;
            out.conflict_sum += trace.conflict_rate();
            let advantage = reward - baseline;
            if advantage != 0.0 {
                out.loss -= advantage * scale * ctx.log_prob_value();
                ctx.accumulate_grad(-advantage * scale, &mut out.accum)?;
            }
        }
        Ok(out)
    });

    let mut grads = GradAccum::zeros_like(policy.params());
    let mut loss = 0.0;
    let mut reward_sum = 0.0;
    let mut steps_sum = 0.0;
    let mut conflict_sum = 0.0;
    for out in outs {
        let out = out?;
        grads.merge(&out.accum);
        loss += out.loss;
        reward_sum += out.reward_sum;
        steps_sum += out.steps_sum;
        conflict_sum += out.conflict_sum;
    }
    let total = (b * samples) as f64;
    let stats = PassStats {
        loss,
        mean_reward: reward_sum / total,
        mean_steps: steps_sum / total,
        conflict_rate: conflict_sum / total,
    };
    Ok((stats, grads))
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub stats: PassStats,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// One optimizer update from a batch of instances. The reported loss is
/// measured before the parameters move.
#[allow(clippy::too_many_arguments)]
pub fn train_step<E>(
    env: &E,
    policy: &mut PointerPolicy<E>,
    optimizer: &mut Adam,
    instances: &[E::Instance],
    samples: usize,
    priority: PriorityKind,
    use_augment: bool,
    lr: f64,
    base_seed: u64,
) -> Result<StepOutcome, TrainError>
where
    E: Featurize + Augment + Clone + Sync,
    E::Instance: Clone + Sync,
{
    let (stats, mut grads) =
        reinforce_pass(env, policy, instances, samples, priority, use_augment, base_seed)?;
    if !stats.loss.is_finite() {
        return Err(TrainError::NonFinite {
            loss: stats.loss,
            context: format!("batch of {} instances, seed {base_seed}", instances.len()),
        });
    }
    let grad_norm = grads.clip_global_norm(1.0);
    optimizer.step(policy.params_mut(), &grads, lr);
    Ok(StepOutcome { stats, grad_norm, lr })
}

/// Mean greedy objective over a fixed instance set.
pub fn heldout_eval<E>(
    env: &E,
    policy: &PointerPolicy<E>,
    instances: &[E::Instance],
) -> Result<f64, TrainError>
where
    E: Featurize + Augment + Clone + Sync,
    E::Instance: Clone + Sync,
{
    let outs = batch::map_range(instances.len(), |i| {
        let opts = RolloutOptions {
            mode: DecodeMode::Greedy,
            priority: PriorityKind::Learned,
            seed: 0,
        };
        rollout(env, &instances[i], policy, &opts).map(|(trace, _)| trace.objective)
    });
    let mut sum = 0.0;
    for out in outs {
        sum += out?;
    }
    Ok(sum / instances.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub heldout: PathBuf,
    pub last_epoch: usize,
    /// Final held-out greedy mean objective.
    pub heldout_mean: f64,
}

/// Epoch loop with fresh instances per epoch, periodic held-out greedy
/// evaluation, and resumable checkpoints. Artifacts land in `out_dir`:
/// metrics.csv, heldout.csv, checkpoint.json.
pub fn train_env<E, G>(
    env: &E,
    cfg: &TrainConfig,
    sample_instance: &G,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome, TrainError>
where
    E: Featurize + Augment + Clone + Sync,
    E::Instance: Clone + Sync,
    G: Fn(&mut ChaCha8Rng) -> E::Instance,
{
    cfg.validate().map_err(TrainError::Config)?;
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    let metrics_path = out_dir.join("metrics.csv");
    let heldout_path = out_dir.join("heldout.csv");

    let (mut policy, mut optimizer, start_epoch) = if resume && checkpoint_path.exists() {
        let loaded = load_checkpoint(&checkpoint_path)?;
        let saved_env = loaded.meta.get("env").and_then(|v| v.as_str()).unwrap_or("");
        if saved_env != cfg.env.name() {
            return Err(TrainError::Config(format!(
                "checkpoint was trained on {saved_env}, config asks for {}",
                cfg.env.name()
            )));
        }
        let epoch = loaded.meta.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let policy = PointerPolicy::from_params(env.clone(), cfg.policy.clone(), loaded.params)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let optimizer = loaded.optimizer.unwrap_or_else(|| Adam::new(policy.params()));
        (policy, optimizer, epoch + 1)
    } else {
        let policy = PointerPolicy::new(env.clone(), cfg.policy.clone(), cfg.seed);
        let optimizer = Adam::new(policy.params());
        (policy, optimizer, 1)
    };

    let mut heldout_rng = ChaCha8Rng::seed_from_u64(seed::mix(cfg.seed, &[HELDOUT_SALT]));
    let heldout: Vec<E::Instance> =
        (0..cfg.heldout_instances).map(|_| sample_instance(&mut heldout_rng)).collect();

    let fresh = start_epoch == 1;
    let mut metrics_file = open_log(&metrics_path, fresh, "epoch,mean_reward,mean_steps,conflict_rate\n")?;
    let mut heldout_file = open_log(&heldout_path, fresh, "epoch,mean_objective\n")?;

    let mut last_heldout = f64::NAN;
    for epoch in start_epoch..=cfg.epochs {
        let mut inst_rng = ChaCha8Rng::seed_from_u64(seed::mix(cfg.seed, &[epoch as u64, 1]));
        let pool: Vec<E::Instance> =
            (0..cfg.instances_per_epoch).map(|_| sample_instance(&mut inst_rng)).collect();
        let lr = lr_for_epoch(cfg.lr, cfg.lr_decay, &cfg.lr_milestones, epoch);

        let mut reward = 0.0;
        let mut steps = 0.0;
        let mut conflicts = 0.0;
        let mut weight = 0.0;
        for (b, chunk) in pool.chunks(cfg.batch_size).enumerate() {
            let outcome = train_step(
                env,
                &mut policy,
                &mut optimizer,
                chunk,
                cfg.samples,
                cfg.priority,
                cfg.augment,
                lr,
                seed::mix(cfg.seed, &[epoch as u64, 2, b as u64]),
            )?;
            let w = (chunk.len() * cfg.samples) as f64;
            reward += outcome.stats.mean_reward * w;
            steps += outcome.stats.mean_steps * w;
            conflicts += outcome.stats.conflict_rate * w;
            weight += w;
        }
        writeln!(
            metrics_file,
            "{epoch},{:.6},{:.6},{:.6}",
            reward / weight,
            steps / weight,
            conflicts / weight
        )?;

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            last_heldout = heldout_eval(env, &policy, &heldout)?;
            writeln!(heldout_file, "{epoch},{:.6}", last_heldout)?;
            save_checkpoint(
                &checkpoint_path,
                policy.params(),
                serde_json::json!({"epoch": epoch, "env": cfg.env.name(), "config": cfg}),
                Some(&optimizer),
            )?;
        }
    }
    if last_heldout.is_nan() {
        // Resumed past the final epoch; nothing ran, so only measure.
        last_heldout = heldout_eval(env, &policy, &heldout)?;
    }
    Ok(TrainOutcome {
        checkpoint: checkpoint_path,
        metrics: metrics_path,
        heldout: heldout_path,
        last_epoch: cfg.epochs,
        heldout_mean: last_heldout,
    })
}

fn open_log(path: &Path, fresh: bool, header: &str) -> Result<std::fs::File, std::io::Error> {
    if fresh {
        let mut f = std::fs::File::create(path)?;
        f.write_all(header.as_bytes())?;
        Ok(f)
    } else {
        std::fs::OpenOptions::new().append(true).create(true).open(path)
    }
}

/// Customer / pair / job count and agent count drawn from the ranges.
fn draw_sizes(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let n = rng.gen_range(cfg.min_nodes..=cfg.max_nodes);
    let m = rng.gen_range(cfg.min_agents..=cfg.max_agents);
    (n, m)
}

/// Train whichever environment the config names.
pub fn run_training(
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome, TrainError> {
    match cfg.env {
        EnvKind::Hcvrp => train_env(
            &Hcvrp,
            cfg,
            &|rng: &mut ChaCha8Rng| {
                let (n, m) = draw_sizes(cfg, rng);
                hcvrp::generate(n, m, rng.gen())
            },
            out_dir,
            resume,
        ),
        EnvKind::Omdcpdp => train_env(
            &Omdcpdp,
            cfg,
            &|rng: &mut ChaCha8Rng| {
                let (n, m) = draw_sizes(cfg, rng);
                omdcpdp::generate(n, m, rng.gen())
            },
            out_dir,
            resume,
        ),
        EnvKind::Ffsp => train_env(
            &Ffsp,
            cfg,
            &|rng: &mut ChaCha8Rng| {
                let (n, _) = draw_sizes(cfg, rng);
                ffsp::generate(n, cfg.stages, &cfg.machines_per_stage, rng.gen())
            },
            out_dir,
            resume,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::hcvrp::{self, Hcvrp, HcvrpInstance};
    use crate::policy::{record_rollout, replay_log_prob, NormKind};
    use maco_grad::check::{central_difference, max_relative_error};

    fn tiny_policy_config() -> PolicyConfig {
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
    fn baseline_centers_each_row() {
        let grid = AdvantageGrid::from_rewards(vec![vec![-3.0, -5.0], vec![2.0, 4.0, 6.0]]);
        assert_eq!(grid.baselines, vec![-4.0, 4.0]);
        assert_eq!(grid.advantages[0], vec![1.0, -1.0]);
        assert_eq!(grid.advantages[1], vec![-2.0, 0.0, 2.0]);
    }

    #[test]
    fn single_sample_rows_have_zero_advantage() {
        let grid = AdvantageGrid::from_rewards(vec![vec![-2.5]]);
        assert_eq!(grid.advantages[0], vec![0.0]);
    }

    #[test]
    fn advantage_rows_are_mean_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rewards: Vec<Vec<f64>> =
            (0..20).map(|_| (0..8).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        for row in AdvantageGrid::from_rewards(rewards).advantages {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn lr_steps_down_after_each_milestone() {
        let milestones = [80, 95];
        assert_eq!(lr_for_epoch(1.0, 0.1, &milestones, 1), 1.0);
        assert_eq!(lr_for_epoch(1.0, 0.1, &milestones, 80), 1.0);
        assert!((lr_for_epoch(1.0, 0.1, &milestones, 81) - 0.1).abs() < 1e-12);
        assert!((lr_for_epoch(1.0, 0.1, &milestones, 95) - 0.1).abs() < 1e-12);
        assert!((lr_for_epoch(1.0, 0.1, &milestones, 96) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn equal_rewards_leave_parameters_untouched() {
        // One customer and one vehicle force the same route every sample.
        let inst = HcvrpInstance {
            depot: [0.0, 0.0],
            coords: vec![[0.6, 0.8]],
            demands: vec![3.0],
            capacities: vec![20.0],
            speeds: vec![1.0],
        };
        let mut policy = PointerPolicy::new(Hcvrp, tiny_policy_config(), 1);
        let before: Vec<Vec<f64>> =
            (0..policy.params().len()).map(|i| policy.params().value(i).data().to_vec()).collect();
        let mut opt = Adam::new(policy.params());
        let outcome = train_step(
            &Hcvrp,
            &mut policy,
            &mut opt,
            &[inst],
            4,
            PriorityKind::Learned,
            false,
            1e-3,
            9,
        )
        .unwrap();
        assert_eq!(outcome.stats.loss, 0.0);
        assert_eq!(outcome.grad_norm, 0.0);
        for (i, row) in before.iter().enumerate() {
            assert_eq!(policy.params().value(i).data(), row.as_slice(), "parameter {i} moved");
        }
    }

    #[test]
    fn update_favors_the_better_sample() {
        let inst = hcvrp::generate(4, 2, 33);
        let mut policy = PointerPolicy::new(Hcvrp, tiny_policy_config(), 2);
        // Find a pass seed whose two samples score differently.
        let base_seed = (0..50)
            .find(|&s| {
                let a = rollout_objective(&policy, &inst, seed::mix(s, &[0, 0]));
                let b = rollout_objective(&policy, &inst, seed::mix(s, &[0, 1]));
                (a - b).abs() > 1e-9
            })
            .expect("some seed separates the samples");
        let (obj_a, script_a) = scripted(&policy, &inst, seed::mix(base_seed, &[0, 0]));
        let (obj_b, script_b) = scripted(&policy, &inst, seed::mix(base_seed, &[0, 1]));
        let (better, worse) = if obj_a < obj_b {
            (script_a, script_b)
        } else {
            (script_b, script_a)
        };

        let diff_before = replayed_diff(&policy, &inst, &better, &worse);
        let mut opt = Adam::new(policy.params());
        train_step(
            &Hcvrp,
            &mut policy,
            &mut opt,
            std::slice::from_ref(&inst),
            2,
            PriorityKind::Learned,
            false,
            1e-3,
            base_seed,
        )
        .unwrap();
        let diff_after = replayed_diff(&policy, &inst, &better, &worse);
        assert!(
            diff_after > diff_before,
            "better-sample log-prob margin fell: {diff_before} -> {diff_after}"
        );
    }

    fn rollout_objective(policy: &PointerPolicy<Hcvrp>, inst: &HcvrpInstance, seed: u64) -> f64 {
        let opts =
            RolloutOptions { mode: DecodeMode::Sample, priority: PriorityKind::Learned, seed };
        rollout(&Hcvrp, inst, policy, &opts).unwrap().0.objective
    }

    fn scripted(
        policy: &PointerPolicy<Hcvrp>,
        inst: &HcvrpInstance,
        seed: u64,
    ) -> (f64, Vec<crate::policy::ReplayStep>) {
        let opts =
            RolloutOptions { mode: DecodeMode::Sample, priority: PriorityKind::Learned, seed };
        let (trace, script) = record_rollout(&Hcvrp, inst, policy, &opts).unwrap();
        (trace.objective, script)
    }

    fn replayed_diff(
        policy: &PointerPolicy<Hcvrp>,
        inst: &HcvrpInstance,
        better: &[crate::policy::ReplayStep],
        worse: &[crate::policy::ReplayStep],
    ) -> f64 {
        let b = replay_log_prob(&Hcvrp, inst, policy, better).unwrap().log_prob_value();
        let w = replay_log_prob(&Hcvrp, inst, policy, worse).unwrap().log_prob_value();
        b - w
    }

    #[test]
    fn pass_gradient_matches_finite_differences() {
        let instances = vec![hcvrp::generate(3, 2, 71), hcvrp::generate(3, 2, 72)];
        let policy = PointerPolicy::new(Hcvrp, tiny_policy_config(), 3);
        let (_, analytic) = reinforce_pass(
            &Hcvrp,
            &policy,
            &instances,
            2,
            PriorityKind::Learned,
            false,
            5,
        )
        .unwrap();
        let config = tiny_policy_config();
        let numeric = central_difference(
            policy.params(),
            |store| {
                let probe =
                    PointerPolicy::from_params(Hcvrp, config.clone(), store.clone()).unwrap();
                reinforce_pass(&Hcvrp, &probe, &instances, 2, PriorityKind::Learned, false, 5)
                    .unwrap()
                    .0
                    .loss
            },
            1e-5,
        );
        let err = max_relative_error(policy.params(), &analytic, &numeric);
        assert!(err < 1e-3, "max relative gradient error {err}");
    }

    fn smoke_config() -> TrainConfig {
        TrainConfig {
            env: EnvKind::Hcvrp,
            batch_size: 4,
            samples: 2,
            epochs: 2,
            instances_per_epoch: 8,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_milestones: vec![80, 95],
            seed: 11,
            min_nodes: 3,
            max_nodes: 4,
            min_agents: 1,
            max_agents: 2,
            stages: 2,
            machines_per_stage: vec![1, 1],
            augment: true,
            priority: PriorityKind::Learned,
            policy: tiny_policy_config(),
            heldout_instances: 4,
            eval_every: 1,
        }
    }

    #[test]
    fn smoke_run_is_bit_reproducible() {
        let cfg = smoke_config();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let out_a = run_training(&cfg, dir_a.path(), false).unwrap();
        let out_b = run_training(&cfg, dir_b.path(), false).unwrap();
        for (a, b) in [
            (&out_a.metrics, &out_b.metrics),
            (&out_a.heldout, &out_b.heldout),
            (&out_a.checkpoint, &out_b.checkpoint),
        ] {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        assert_eq!(out_a.heldout_mean.to_bits(), out_b.heldout_mean.to_bits());
    }

    #[test]
    fn resumed_run_matches_an_uninterrupted_one() {
        let mut cfg = smoke_config();
        cfg.epochs = 3;
        let full_dir = tempfile::tempdir().unwrap();
        let full = run_training(&cfg, full_dir.path(), false).unwrap();

        let split_dir = tempfile::tempdir().unwrap();
        let mut first = cfg.clone();
        first.epochs = 1;
        run_training(&first, split_dir.path(), false).unwrap();
        let resumed = run_training(&cfg, split_dir.path(), true).unwrap();

        assert_eq!(
            std::fs::read(&full.metrics).unwrap(),
            std::fs::read(&resumed.metrics).unwrap()
        );
        assert_eq!(
            std::fs::read(&full.heldout).unwrap(),
            std::fs::read(&resumed.heldout).unwrap()
        );
        assert_eq!(
            std::fs::read(&full.checkpoint).unwrap(),
            std::fs::read(&resumed.checkpoint).unwrap()
        );
    }

    #[test]
    fn heldout_eval_is_deterministic() {
        let policy = PointerPolicy::new(Hcvrp, tiny_policy_config(), 6);
        let instances: Vec<HcvrpInstance> =
            (0..5).map(|s| hcvrp::generate(4, 2, 500 + s)).collect();
        let a = heldout_eval(&Hcvrp, &policy, &instances).unwrap();
        let b = heldout_eval(&Hcvrp, &policy, &instances).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
