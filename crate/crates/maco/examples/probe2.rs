use maco::env::{hcvrp, EnvKind, Hcvrp};
use maco::mdp::{rollout, DecodeMode, PriorityKind, RolloutOptions};
use maco::policy::PointerPolicy;
use maco::trainer::{run_training, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eval_mean(policy: &PointerPolicy<Hcvrp>, heldout: &[hcvrp::HcvrpInstance], priority: PriorityKind) -> f64 {
    let sum: f64 = heldout
        .iter()
        .map(|inst| {
            let opts = RolloutOptions { mode: DecodeMode::Greedy, priority, seed: 0 };
            rollout(&Hcvrp, inst, policy, &opts).unwrap().0.objective
        })
        .sum();
    sum / heldout.len() as f64
}

fn arm(cfg: &TrainConfig) -> PointerPolicy<Hcvrp> {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_training(cfg, dir.path(), false).unwrap();
    let loaded = maco_grad::load_checkpoint(&outcome.checkpoint).unwrap();
    PointerPolicy::from_params(Hcvrp, cfg.policy.clone(), loaded.params).unwrap()
}

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let ipe: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(512);
    let mut rng = ChaCha8Rng::seed_from_u64(778);
    let heldout: Vec<_> = (0..64)
        .map(|_| {
            let n = rng.gen_range(10..=20);
            let m = rng.gen_range(2..=3);
            hcvrp::generate(n, m, rng.gen())
        })
        .collect();

    for seed in [1u64, 2, 3] {
        let mut base = TrainConfig::desk(EnvKind::Hcvrp);
        base.epochs = epochs;
        base.instances_per_epoch = ipe;
        base.eval_every = epochs;
        base.seed = seed;

        let t0 = std::time::Instant::now();
        let comm = arm(&base);
        let mut no_comm_cfg = base.clone();
        no_comm_cfg.policy.communication = false;
        let no_comm = arm(&no_comm_cfg);
        let mut random_cfg = base.clone();
        random_cfg.priority = PriorityKind::Random;
        let random_arm = arm(&random_cfg);

        let comm_mean = eval_mean(&comm, &heldout, PriorityKind::Learned);
        let no_comm_mean = eval_mean(&no_comm, &heldout, PriorityKind::Learned);
        let learned_mean = comm_mean;
        let random_mean = eval_mean(&random_arm, &heldout, PriorityKind::Random);
        println!(
            "seed {seed}: comm {comm_mean:.4} vs no-comm {no_comm_mean:.4} ({}) | learned {learned_mean:.4} vs random-priority {random_mean:.4} ({}) [{:.0}s]",
            if comm_mean <= no_comm_mean { "ok" } else { "X" },
            if learned_mean <= random_mean { "ok" } else { "X" },
            t0.elapsed().as_secs_f64()
        );
    }
}
