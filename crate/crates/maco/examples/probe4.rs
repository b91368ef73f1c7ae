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

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let mut rng = ChaCha8Rng::seed_from_u64(778);
    let heldout: Vec<_> = (0..64)
        .map(|_| {
            let n = rng.gen_range(10..=20);
            let m = rng.gen_range(2..=3);
            hcvrp::generate(n, m, rng.gen())
        })
        .collect();

    let mut base = TrainConfig::desk(EnvKind::Hcvrp);
    base.instances_per_epoch = 512;
    base.eval_every = 25;
    base.seed = seed;

    let arms: Vec<(&str, TrainConfig, PriorityKind)> = vec![
        ("comm   ", base.clone(), PriorityKind::Learned),
        (
            "no-comm",
            {
                let mut c = base.clone();
                c.policy.communication = false;
                c
            },
            PriorityKind::Learned,
        ),
        (
            "rand-pr",
            {
                let mut c = base.clone();
                c.priority = PriorityKind::Random;
                c
            },
            PriorityKind::Random,
        ),
    ];

    for (label, mut cfg, eval_priority) in arms {
        let dir = tempfile::tempdir().unwrap();
        let mut line = format!("seed {seed} {label}:");
        for stop in [50usize, 75, 100] {
            cfg.epochs = stop;
            let outcome = run_training(&cfg, dir.path(), stop > 50).unwrap();
            let loaded = maco_grad::load_checkpoint(&outcome.checkpoint).unwrap();
            let policy =
                PointerPolicy::from_params(Hcvrp, cfg.policy.clone(), loaded.params).unwrap();
            line += &format!(" e{stop}={:.4}", eval_mean(&policy, &heldout, eval_priority));
        }
        println!("{line}");
    }
}
