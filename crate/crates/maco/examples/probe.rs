use maco::baselines::RandomPolicy;
use maco::env::{hcvrp, EnvKind, Hcvrp};
use maco::mdp::{rollout_batch, DecodeMode, PriorityKind};
use maco::policy::PointerPolicy;
use maco::trainer::{heldout_eval, run_training, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut cfg = TrainConfig::desk(EnvKind::Hcvrp);
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    cfg.epochs = epochs;
    cfg.eval_every = 2;

    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let heldout: Vec<_> = (0..64)
        .map(|_| {
            let n = rng.gen_range(10..=20);
            let m = rng.gen_range(2..=3);
            hcvrp::generate(n, m, rng.gen())
        })
        .collect();

    let untrained = PointerPolicy::new(Hcvrp, cfg.policy.clone(), cfg.seed);
    let untrained_mean = heldout_eval(&Hcvrp, &untrained, &heldout).unwrap();
    println!("untrained greedy mean: {untrained_mean:.4}");

    let outs = rollout_batch(
        &Hcvrp,
        &heldout,
        &RandomPolicy,
        DecodeMode::Sample,
        PriorityKind::Random,
        1,
        1234,
    );
    let random_mean: f64 =
        outs.iter().map(|r| r.as_ref().unwrap().0.objective).sum::<f64>() / heldout.len() as f64;
    println!("random policy mean:    {random_mean:.4}");

    let dir = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    let outcome = run_training(&cfg, dir.path(), false).unwrap();
    println!("trained {epochs} epochs in {:.1}s", t0.elapsed().as_secs_f64());
    let loaded = maco_grad::load_checkpoint(&outcome.checkpoint).unwrap();
    let trained = PointerPolicy::from_params(Hcvrp, cfg.policy.clone(), loaded.params).unwrap();
    let trained_mean = heldout_eval(&Hcvrp, &trained, &heldout).unwrap();
    println!("trained greedy mean:   {trained_mean:.4}");
    println!(
        "improvement vs untrained: {:.1}%  vs random: {:.1}%",
        100.0 * (untrained_mean - trained_mean) / untrained_mean,
        100.0 * (random_mean - trained_mean) / random_mean
    );
}
