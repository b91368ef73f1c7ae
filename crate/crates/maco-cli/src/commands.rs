//! Implementations behind the subcommands.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use maco::baselines::{GreedyDistancePolicy, RandomPolicy, SjfPolicy};
use maco::env::ffsp::FfspInstance;
use maco::env::hcvrp::HcvrpInstance;
use maco::env::omdcpdp::OmdcpdpInstance;
use maco::env::{ffsp, hcvrp, omdcpdp, EnvKind, Ffsp, Hcvrp, Omdcpdp};
use maco::io::{self, AnyInstance};
use maco::mdp::{
    rollout, DecodeMode, Environment, Policy, PriorityKind, RolloutOptions, SolutionTrace,
};
use maco::policy::{Featurize, PointerPolicy, PolicyConfig};
use maco::trainer::{run_training, TrainConfig};
use maco::{oracle, seed};
use maco_grad::load_checkpoint;

use crate::report::{build_table, read_report, write_report, ReportRow};
use crate::{CliError, EvalArgs, GenerateArgs, MethodArg, ModeArg, OracleArgs, TableArgs, TrainArgs, VerifyArgs};

fn load_instances(path: &Path) -> Result<Vec<AnyInstance>, CliError> {
    let instances = io::read_instances(path).map_err(|e| match e {
        io::IoError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::Usage(format!("{}: not found", path.display()))
        }
        other => other.into(),
    })?;
    if instances.is_empty() {
        return Err(CliError::Usage(format!("{}: no instances", path.display())));
    }
    Ok(instances)
}

fn uniform_kind(instances: &[AnyInstance], path: &Path) -> Result<EnvKind, CliError> {
    let kind = instances[0].kind();
    for (i, inst) in instances.iter().enumerate() {
        if inst.kind() != kind {
            return Err(CliError::Usage(format!(
                "{}: instance 0 is {kind} but instance {i} is {}",
                path.display(),
                inst.kind()
            )));
        }
    }
    Ok(kind)
}

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    if args.n == 0 || args.m == 0 || args.count == 0 {
        return Err(CliError::Usage("--n, --m, and --count must be positive".into()));
    }
    if args.env == EnvKind::Ffsp && args.stages == 0 {
        return Err(CliError::Usage("--stages must be positive".into()));
    }
    let instances: Vec<AnyInstance> = (0..args.count)
        .map(|i| {
            let s = seed::mix(args.seed, &[i as u64]);
            match args.env {
                EnvKind::Hcvrp => AnyInstance::Hcvrp(hcvrp::generate(args.n, args.m, s)),
                EnvKind::Omdcpdp => AnyInstance::Omdcpdp(omdcpdp::generate(args.n, args.m, s)),
                EnvKind::Ffsp => AnyInstance::Ffsp(ffsp::generate(
                    args.n,
                    args.stages,
                    &vec![args.m; args.stages],
                    s,
                )),
            }
        })
        .collect();
    let params = match args.env {
        EnvKind::Hcvrp => serde_json::json!({
            "n": args.n, "m": args.m,
            "coords": "U(0,1)^2", "demand": "U(1,10)",
            "capacity": "U(20,41)", "speed": "U(0.5,1)",
        }),
        EnvKind::Omdcpdp => serde_json::json!({
            "n": args.n, "m": args.m,
            "coords": "U(0,1)^2", "capacity": 3,
        }),
        EnvKind::Ffsp => serde_json::json!({
            "n": args.n, "m": args.m, "stages": args.stages,
            "proc_time": "U{2..10}",
        }),
    };
    let manifest = io::write_instances(&args.out, &instances, args.env, args.seed, params)?;
    println!(
        "wrote {} {} instances to {} (manifest {})",
        manifest.count,
        args.env,
        args.out.display(),
        io::manifest_path(&args.out).display()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    if args.print_default {
        let env = args
            .env
            .ok_or_else(|| CliError::Usage("--print-default needs --env".into()))?;
        let cfg = TrainConfig::desk(env);
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    let path = args.config.expect("clap enforces --config");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::Usage(format!("{}: {e}", path.display()))
    })?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let outcome = run_training(&cfg, &args.out, args.resume)?;
    println!(
        "trained through epoch {}; held-out mean objective {:.6}",
        outcome.last_epoch, outcome.heldout_mean
    );
    println!(
        "checkpoint {}; metrics {}; heldout {}",
        outcome.checkpoint.display(),
        outcome.metrics.display(),
        outcome.heldout.display()
    );
    Ok(())
}

struct PerInstance {
    n: usize,
    m: usize,
    objective: f64,
    steps: f64,
    conflict_rate: f64,
    seconds: f64,
}

struct EvalSpec {
    decode: DecodeMode,
    rollouts: usize,
    priority: PriorityKind,
    seed: u64,
}

/// Best-of-K rollouts per instance, each instance timed on its own. Every
/// reported trace must pass verification.
#[allow(clippy::type_complexity)]
fn eval_typed<E, P>(
    env: &E,
    instances: &[E::Instance],
    policy: &P,
    spec: &EvalSpec,
    sizes: impl Fn(&E::Instance) -> (usize, usize),
) -> Result<(Vec<PerInstance>, Vec<SolutionTrace>), CliError>
where
    E: Environment,
    P: Policy<E>,
{
    let mut per = Vec::with_capacity(instances.len());
    let mut traces = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let start = Instant::now();
        let mut best: Option<SolutionTrace> = None;
        for k in 0..spec.rollouts {
            let opts = RolloutOptions {
                mode: spec.decode,
                priority: spec.priority,
                seed: seed::mix(spec.seed, &[i as u64, k as u64]),
            };
            let (trace, _) = rollout(env, inst, policy, &opts)?;
            if best.as_ref().is_none_or(|b| trace.objective < b.objective) {
                best = Some(trace);
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        let trace = best.expect("at least one rollout");
        let report = env.verify(inst, &trace);
        if let Some(violation) = report.first_violation() {
            return Err(CliError::Verification(format!(
                "instance {i}: {}: {}",
                violation.constraint,
                violation.detail.as_deref().unwrap_or("")
            )));
        }
        let (n, m) = sizes(inst);
        per.push(PerInstance {
            n,
            m,
            objective: trace.objective,
            steps: trace.num_steps() as f64,
            conflict_rate: trace.conflict_rate(),
            seconds,
        });
        traces.push(trace);
    }
    Ok((per, traces))
}

fn group_rows(env: EnvKind, method: &str, mode: &str, per: &[PerInstance]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(usize, usize), Vec<&PerInstance>> = BTreeMap::new();
    for p in per {
        groups.entry((p.n, p.m)).or_default().push(p);
    }
    groups
        .into_iter()
        .map(|((n, m), members)| {
            let count = members.len() as f64;
            ReportRow {
                env: env.name().into(),
                n,
                m,
                method: method.into(),
                mode: mode.into(),
                instances: members.len(),
                mean_objective: members.iter().map(|p| p.objective).sum::<f64>() / count,
                mean_steps: members.iter().map(|p| p.steps).sum::<f64>() / count,
                conflict_rate: members.iter().map(|p| p.conflict_rate).sum::<f64>() / count,
                mean_time_s: Some(members.iter().map(|p| p.seconds).sum::<f64>() / count),
            }
        })
        .collect()
}

fn typed<T>(
    instances: Vec<AnyInstance>,
    pick: impl Fn(AnyInstance) -> Option<T>,
) -> Vec<T> {
    instances.into_iter().map(|any| pick(any).expect("kind checked")).collect()
}

fn load_policy<E: Featurize + Clone>(
    checkpoint: Option<&Path>,
    env: E,
    kind: EnvKind,
) -> Result<PointerPolicy<E>, CliError> {
    let path = checkpoint
        .ok_or_else(|| CliError::Usage("--method policy needs --checkpoint".into()))?;
    let loaded = load_checkpoint(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let saved = loaded.meta.get("env").and_then(|v| v.as_str()).unwrap_or("unknown");
    if saved != kind.name() {
        return Err(CliError::Usage(format!(
            "checkpoint was trained on {saved}, instances are {kind}"
        )));
    }
    let config: PolicyConfig = loaded
        .meta
        .pointer("/config/policy")
        .cloned()
        .ok_or_else(|| CliError::Usage("checkpoint lacks a policy configuration".into()))
        .and_then(|v| {
            serde_json::from_value(v)
                .map_err(|e| CliError::Usage(format!("checkpoint policy configuration: {e}")))
        })?;
    PointerPolicy::from_params(env, config, loaded.params)
        .map_err(|e| CliError::Usage(e.to_string()))
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    if args.mode == ModeArg::Sample && args.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let instances = load_instances(&args.instances)?;
    let kind = uniform_kind(&instances, &args.instances)?;
    let spec = EvalSpec {
        decode: match args.mode {
            ModeArg::Greedy => DecodeMode::Greedy,
            ModeArg::Sample => DecodeMode::Sample,
        },
        rollouts: match args.mode {
            ModeArg::Greedy => 1,
            ModeArg::Sample => args.samples,
        },
        priority: args.priority.into(),
        seed: args.seed,
    };
    let checkpoint = args.checkpoint.as_deref();
    let (per, traces) = match kind {
        EnvKind::Hcvrp => {
            let insts: Vec<HcvrpInstance> = typed(instances, |a| match a {
                AnyInstance::Hcvrp(i) => Some(i),
                _ => None,
            });
            let sizes = |i: &HcvrpInstance| (i.num_customers(), i.num_vehicles());
            match args.method {
                MethodArg::Policy => {
                    let p = load_policy(checkpoint, Hcvrp, kind)?;
                    eval_typed(&Hcvrp, &insts, &p, &spec, sizes)?
                }
                MethodArg::Random => eval_typed(&Hcvrp, &insts, &RandomPolicy, &spec, sizes)?,
                MethodArg::Greedy => {
                    eval_typed(&Hcvrp, &insts, &GreedyDistancePolicy(Hcvrp), &spec, sizes)?
                }
                MethodArg::Sjf => {
                    return Err(CliError::Usage("sjf only applies to ffsp".into()))
                }
            }
        }
        EnvKind::Omdcpdp => {
            let insts: Vec<OmdcpdpInstance> = typed(instances, |a| match a {
                AnyInstance::Omdcpdp(i) => Some(i),
                _ => None,
            });
            let sizes = |i: &OmdcpdpInstance| (i.num_pairs(), i.num_vehicles());
            match args.method {
                MethodArg::Policy => {
                    let p = load_policy(checkpoint, Omdcpdp, kind)?;
                    eval_typed(&Omdcpdp, &insts, &p, &spec, sizes)?
                }
                MethodArg::Random => eval_typed(&Omdcpdp, &insts, &RandomPolicy, &spec, sizes)?,
                MethodArg::Greedy => {
                    eval_typed(&Omdcpdp, &insts, &GreedyDistancePolicy(Omdcpdp), &spec, sizes)?
                }
                MethodArg::Sjf => {
                    return Err(CliError::Usage("sjf only applies to ffsp".into()))
                }
            }
        }
        EnvKind::Ffsp => {
            let insts: Vec<FfspInstance> = typed(instances, |a| match a {
                AnyInstance::Ffsp(i) => Some(i),
                _ => None,
            });
            let sizes = |i: &FfspInstance| (i.num_jobs(), i.total_machines());
            match args.method {
                MethodArg::Policy => {
                    let p = load_policy(checkpoint, Ffsp, kind)?;
                    eval_typed(&Ffsp, &insts, &p, &spec, sizes)?
                }
                MethodArg::Random => eval_typed(&Ffsp, &insts, &RandomPolicy, &spec, sizes)?,
                MethodArg::Greedy => {
                    eval_typed(&Ffsp, &insts, &GreedyDistancePolicy(Ffsp), &spec, sizes)?
                }
                MethodArg::Sjf => eval_typed(&Ffsp, &insts, &SjfPolicy, &spec, sizes)?,
            }
        }
    };
    let mode_label = match args.mode {
        ModeArg::Greedy => "greedy".to_string(),
        ModeArg::Sample => format!("sample:{}", args.samples),
    };
    let rows = group_rows(kind, args.method.name(), &mode_label, &per);
    write_report(&args.out, &rows)?;
    if let Some(dir) = &args.traces {
        std::fs::create_dir_all(dir)?;
        for (i, trace) in traces.iter().enumerate() {
            io::write_trace(&dir.join(format!("trace_{i:04}.json")), kind, trace)?;
        }
    }
    for row in &rows {
        println!(
            "{} n={} m={} {} {}: mean objective {:.6} over {} instances",
            row.env, row.n, row.m, row.method, row.mode, row.mean_objective, row.instances
        );
    }
    Ok(())
}

pub fn verify(args: VerifyArgs) -> Result<(), CliError> {
    let instances = load_instances(&args.instances)?;
    let inst = instances.get(args.index).ok_or_else(|| {
        CliError::Usage(format!(
            "--index {} out of range; {} holds {} instances",
            args.index,
            args.instances.display(),
            instances.len()
        ))
    })?;
    let (trace, trace_kind) = io::read_trace(&args.trace)?;
    if trace_kind != inst.kind() {
        return Err(CliError::Usage(format!(
            "trace is {trace_kind}, instance is {}",
            inst.kind()
        )));
    }
    let report = match inst {
        AnyInstance::Hcvrp(i) => Hcvrp.verify(i, &trace),
        AnyInstance::Omdcpdp(i) => Omdcpdp.verify(i, &trace),
        AnyInstance::Ffsp(i) => Ffsp.verify(i, &trace),
    };
    for check in &report.checks {
        match (&check.passed, &check.detail) {
            (true, _) => println!("pass {}", check.constraint),
            (false, Some(detail)) => println!("FAIL {}: {detail}", check.constraint),
            (false, None) => println!("FAIL {}", check.constraint),
        }
    }
    if let Some(objective) = report.recomputed_objective {
        println!("objective {objective:.6} (trace file says {:.6})", trace.objective);
    }
    match report.first_violation() {
        None => {
            println!("ok: {} constraints hold", report.checks.len());
            Ok(())
        }
        Some(violation) => Err(CliError::Verification(violation.constraint.to_string())),
    }
}

pub fn table(args: TableArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for path in &args.reports {
        rows.extend(read_report(path)?);
    }
    let (markdown, csv) = build_table(&rows);
    match &args.out {
        Some(path) => std::fs::write(path, &markdown)?,
        None => print!("{markdown}"),
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, &csv)?;
    }
    Ok(())
}

pub fn oracle(args: OracleArgs) -> Result<(), CliError> {
    let instances = load_instances(&args.instances)?;
    let kind = uniform_kind(&instances, &args.instances)?;
    let mut per = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let result = match &args.cache {
            Some(dir) => oracle::solve_cached(inst, dir),
            None => oracle::solve(inst),
        }
        .map_err(|e| CliError::Usage(format!("instance {i}: {e}")))?;
        let (n, m) = match inst {
            AnyInstance::Hcvrp(i) => (i.num_customers(), i.num_vehicles()),
            AnyInstance::Omdcpdp(i) => (i.num_pairs(), i.num_vehicles()),
            AnyInstance::Ffsp(i) => (i.num_jobs(), i.total_machines()),
        };
        per.push(PerInstance {
            n,
            m,
            objective: result.objective,
            steps: result.trace.num_steps() as f64,
            conflict_rate: result.trace.conflict_rate(),
            seconds: result.wall_time,
        });
    }
    let rows = group_rows(kind, "oracle", "exact", &per);
    write_report(&args.out, &rows)?;
    for row in &rows {
        println!(
            "{} n={} m={}: oracle mean objective {:.6} over {} instances",
            row.env, row.n, row.m, row.mean_objective, row.instances
        );
    }
    Ok(())
}
