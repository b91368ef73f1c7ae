use maco::env::{hcvrp, EnvKind, Hcvrp};
use maco::mdp::{rollout, DecodeMode, PriorityKind, RolloutOptions};
use maco::policy::PointerPolicy;
use maco::trainer::{run_training, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eval_mean(policy: &PointerPolicy<Hcvrp>, heldout: &[hcvrp::HcvrpInstance]) -> f64 {
    let sum: f64 = heldout
        .iter()
        .map(|inst| {
            let opts = RolloutOptions {
                mode: DecodeMode::Greedy,
                priority: PriorityKind::Learned,
                seed: 0,
            };
            rollout(&Hcvrp, inst, policy, &opts).unwrap().0.objective
        })
        .sum();
    sum / heldout.len() as f64
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let ipe: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(512);
    let mut rng = ChaCha8Rng::seed_from_u64(778);
    let heldout: Vec<_> = (0..64)
        .map(|_| hcvrp::generate(rng.gen_range(10..=20), rng.gen_range(2..=3), rng.gen()))
        .collect();

    let mut base = TrainConfig::desk(EnvKind::Hcvrp);
    base.instances_per_epoch = ipe;
    base.epochs = epochs;
    base.eval_every = epochs;
    base.seed = seed;

    for (label, cfg) in [
        ("comm   ", base.clone()),
        ("no-comm", {
            let mut c = base.clone();
            c.policy.communication = false;
            c
        }),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let t0 = std::time::Instant::now();
        let outcome = run_training(&cfg, dir.path(), false).unwrap();
        let loaded = maco_grad::load_checkpoint(&outcome.checkpoint).unwrap();
        let policy = PointerPolicy::from_params(Hcvrp, cfg.policy.clone(), loaded.params).unwrap();
        println!(
            "seed {seed} {label}: e{epochs}={:.4} [{:.0}s]",
            eval_mean(&policy, &heldout),
            t0.elapsed().as_secs_f64()
        );
    }
}
