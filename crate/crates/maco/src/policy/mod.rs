//! Learned construction policy: a shared encoder over agents and nodes, a
//! communication block over per-step agent queries, and a masked pointer
//! head producing one action distribution per agent.

pub mod features;
pub mod net;
mod replay;

pub use features::{EncoderKind, FeatureSpec, Featurize, MAX_STAGES};
pub use net::NormKind;
pub use replay::{record_rollout, replay_log_prob, ReplayStep};

use maco_grad::{AttentionWeights, GradAccum, GradError, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::{ActionMask, Policy, PolicyError, ProbGrid};
use net::{BlockWeights, PointerWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub norm: NormKind,
    pub beta: f64,
    /// Disables the decoder-side communication block when false; its
    /// parameters are still allocated so checkpoints stay interchangeable.
    pub communication: bool,
}

impl PolicyConfig {
    /// Full-scale routing setup.
    pub fn routing() -> Self {
        Self {
            dim: 128,
            layers: 3,
            heads: 8,
            mlp_width: 512,
            norm: NormKind::Rms,
            beta: 10.0,
            communication: true,
        }
    }

    /// Full-scale scheduling setup.
    pub fn scheduling() -> Self {
        Self {
            dim: 256,
            layers: 3,
            heads: 16,
            mlp_width: 512,
            norm: NormKind::Instance,
            beta: 10.0,
            communication: true,
        }
    }

    /// Small network for single-machine training runs.
    pub fn desk() -> Self {
        Self {
            dim: 32,
            layers: 1,
            heads: 2,
            mlp_width: 128,
            norm: NormKind::Rms,
            beta: 10.0,
            communication: true,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 || self.layers == 0 || self.mlp_width == 0 {
            return Err("dim, layers, and mlp_width must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(format!("heads ({}) must divide dim ({})", self.heads, self.dim));
        }
        if !(self.beta > 0.0) {
            return Err(format!("beta must be positive, got {}", self.beta));
        }
        Ok(())
    }
}

fn block_shapes(out: &mut Vec<(String, [usize; 2])>, prefix: &str, cfg: &PolicyConfig, biased: bool) {
    let d = cfg.dim;
    out.push((format!("{prefix}.norm1"), [1, d]));
    for name in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.attn.{name}"), [d, d]));
    }
    if biased {
        for h in 0..cfg.heads {
            out.push((format!("{prefix}.bias.{h}"), [1, 1]));
        }
    }
    out.push((format!("{prefix}.norm2"), [1, d]));
    out.push((format!("{prefix}.mlp.w1"), [d, cfg.mlp_width]));
    out.push((format!("{prefix}.mlp.w2"), [cfg.mlp_width, d]));
}

fn expected_shapes(spec: &FeatureSpec, cfg: &PolicyConfig) -> Vec<(String, [usize; 2])> {
    let d = cfg.dim;
    let mut out = vec![
        ("embed.agent".to_string(), [spec.agent_static, d]),
        ("embed.node".to_string(), [spec.node_static, d]),
    ];
    for l in 0..cfg.layers {
        match spec.encoder {
            EncoderKind::SelfAttention => block_shapes(&mut out, &format!("enc.{l}"), cfg, false),
            EncoderKind::CrossAttention => {
                block_shapes(&mut out, &format!("enc.{l}.agents"), cfg, true);
                block_shapes(&mut out, &format!("enc.{l}.nodes"), cfg, true);
            }
        }
    }
    block_shapes(&mut out, "comm", cfg, false);
    out.push(("ctx.w_delta".to_string(), [spec.agent_dyn, d]));
    out.push(("ctx.w_env".to_string(), [spec.env_dyn, d]));
    out.push(("ctx.w_q".to_string(), [3 * d, d]));
    for name in ["wq", "wk", "wv", "wo"] {
        out.push((format!("dec.attn.{name}"), [d, d]));
    }
    out.push(("dec.xi_k".to_string(), [spec.node_dyn, d]));
    out.push(("dec.xi_v".to_string(), [spec.node_dyn, d]));
    out.push(("ptr.w_l".to_string(), [d, d]));
    out.push(("ptr.xi_l".to_string(), [spec.node_dyn, d]));
    out
}

fn transpose(t: &Tensor) -> Tensor {
    let [r, c] = t.shape();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.at(i, j);
        }
    }
    Tensor::matrix(c, r, data).expect("same element count")
}

/// Encoder plus decoder weights with a fixed feature contract. Instances of
/// any size run through the same parameters.
#[derive(Clone)]
pub struct PointerPolicy<E: Featurize + Clone> {
    env: E,
    spec: FeatureSpec,
    config: PolicyConfig,
    params: ParamStore,
}

impl<E: Featurize + Clone> PointerPolicy<E> {
    /// Fresh parameters, gains at one and matrices uniform in the fan-in
    /// bound, in a fixed order so a seed pins every value. Storage is sorted
    /// by path: cross-tensor reductions then sum in the same order whether
    /// the parameters are fresh or reloaded from a (sorted) checkpoint.
    pub fn new(env: E, config: PolicyConfig, seed: u64) -> Self {
        config.validate().expect("invalid policy configuration");
        let spec = env.feature_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = expected_shapes(&spec, &config);
        shapes.sort_by(|a, b| a.0.cmp(&b.0));
        let mut params = ParamStore::new();
        for (path, [rows, cols]) in shapes {
            let value = if path.ends_with("norm1") || path.ends_with("norm2") {
                Tensor::matrix(rows, cols, vec![1.0; rows * cols]).expect("gain shape")
            } else {
                net::uniform_init(&mut rng, rows, cols)
            };
            params.insert(&path, value);
        }
        Self { env, spec, config, params }
    }

    /// Wrap restored parameters, checking the set of paths and shapes.
    pub fn from_params(env: E, config: PolicyConfig, params: ParamStore) -> Result<Self, PolicyError> {
        config.validate().map_err(PolicyError::Other)?;
        let spec = env.feature_spec();
        let expected = expected_shapes(&spec, &config);
        for (path, shape) in &expected {
            match params.get(path) {
                None => return Err(PolicyError::Other(format!("missing parameter {path}"))),
                Some(t) if t.shape() != *shape => {
                    return Err(PolicyError::Other(format!(
                        "parameter {path} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != expected.len() {
            return Err(PolicyError::Other(format!(
                "checkpoint holds {} parameters, this configuration uses {}",
                params.len(),
                expected.len()
            )));
        }
        let mut order: Vec<usize> = (0..params.len()).collect();
        order.sort_by(|&a, &b| params.path(a).cmp(params.path(b)));
        let mut canonical = ParamStore::new();
        for &i in &order {
            canonical.insert(params.path(i), params.value(i).clone());
        }
        Ok(Self { env, spec, config, params: canonical })
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Same parameters with the communication block switched on or off.
    pub fn with_communication(&self, enabled: bool) -> Self {
        let mut clone = self.clone();
        clone.config.communication = enabled;
        clone
    }

    fn var(&self, staged: &[Var], path: &str) -> Var {
        staged[self.params.index_of(path).expect("parameter paths fixed at construction")]
    }

    fn block(&self, staged: &[Var], prefix: &str, biased: bool) -> BlockWeights {
        BlockWeights {
            norm1: self.var(staged, &format!("{prefix}.norm1")),
            attn: AttentionWeights {
                wq: self.var(staged, &format!("{prefix}.attn.wq")),
                wk: self.var(staged, &format!("{prefix}.attn.wk")),
                wv: self.var(staged, &format!("{prefix}.attn.wv")),
                wo: self.var(staged, &format!("{prefix}.attn.wo")),
            },
            bias_scales: if biased {
                (0..self.config.heads)
                    .map(|h| self.var(staged, &format!("{prefix}.bias.{h}")))
                    .collect()
            } else {
                Vec::new()
            },
            norm2: self.var(staged, &format!("{prefix}.norm2")),
            mlp_w1: self.var(staged, &format!("{prefix}.mlp.w1")),
            mlp_w2: self.var(staged, &format!("{prefix}.mlp.w2")),
        }
    }

    fn pointer_weights(&self, staged: &[Var]) -> PointerWeights {
        PointerWeights {
            attn: AttentionWeights {
                wq: self.var(staged, "dec.attn.wq"),
                wk: self.var(staged, "dec.attn.wk"),
                wv: self.var(staged, "dec.attn.wv"),
                wo: self.var(staged, "dec.attn.wo"),
            },
            xi_k: self.var(staged, "dec.xi_k"),
            xi_v: self.var(staged, "dec.xi_v"),
            w_l: self.var(staged, "ptr.w_l"),
            xi_l: self.var(staged, "ptr.xi_l"),
        }
    }

    fn encode(&self, tape: &mut Tape, staged: &[Var], inst: &E::Instance) -> Result<(Var, Var), GradError> {
        let kind = self.config.norm;
        let heads = self.config.heads;
        let af = tape.leaf(&self.env.agent_features(inst))?;
        let nf = tape.leaf(&self.env.node_features(inst))?;
        let mut agents = tape.matmul(af, self.var(staged, "embed.agent"))?;
        let mut nodes = tape.matmul(nf, self.var(staged, "embed.node"))?;
        let m = tape.shape(agents)[0];
        let n = tape.shape(nodes)[0];

        match self.spec.encoder {
            EncoderKind::SelfAttention => {
                let mut x = tape.concat_rows(&[agents, nodes])?;
                for l in 0..self.config.layers {
                    let w = self.block(staged, &format!("enc.{l}"), false);
                    x = net::self_block(tape, x, &w, heads, kind)?;
                }
                agents = tape.slice_rows(x, 0, m)?;
                nodes = tape.slice_rows(x, m, n)?;
            }
            EncoderKind::CrossAttention => {
                let bias = self
                    .env
                    .cross_bias(inst)
                    .expect("cross-attention encoder requires a bias matrix");
                let bias_t = transpose(&bias);
                for l in 0..self.config.layers {
                    let wa = self.block(staged, &format!("enc.{l}.agents"), true);
                    let wn = self.block(staged, &format!("enc.{l}.nodes"), true);
                    // Both sides read the other's pre-update embedding.
                    let agents_normed = net::normalize(tape, agents, wa.norm1, kind)?;
                    let nodes_normed = net::normalize(tape, nodes, wn.norm1, kind)?;
                    let a2 = net::cross_attend(tape, agents, nodes_normed, &wa, heads, kind, Some(&bias))?;
                    let n2 = net::cross_attend(tape, nodes, agents_normed, &wn, heads, kind, Some(&bias_t))?;
                    agents = net::ffn_residual(tape, a2, wa.norm2, wa.mlp_w1, wa.mlp_w2, kind)?;
                    nodes = net::ffn_residual(tape, n2, wn.norm2, wn.mlp_w1, wn.mlp_w2, kind)?;
                }
            }
        }
        Ok((agents, nodes))
    }
}

/// Per-rollout working set: the tape, staged parameter leaves, encoder
/// outputs, and the running log-probability of chosen actions.
pub struct PointerCtx {
    tape: Tape,
    staged: Vec<Var>,
    h_agents: Var,
    h_nodes: Var,
    last_probs: Option<Var>,
    log_prob: Option<Var>,
}

impl PointerCtx {
    /// Sum of ln p over every noted choice so far.
    pub fn log_prob_value(&self) -> f64 {
        self.log_prob.map_or(0.0, |v| self.tape.values(v)[0])
    }

    /// Backpropagate `seed` through the accumulated log-probability into
    /// per-parameter buffers. A rollout with no noted choices contributes
    /// nothing.
    pub fn accumulate_grad(&self, seed: f64, accum: &mut GradAccum) -> Result<(), GradError> {
        if let Some(root) = self.log_prob {
            let grads = self.tape.backward_seeded(root, seed)?;
            accum.add_staged(&self.staged, &grads);
        }
        Ok(())
    }

    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }
}

impl<E: Featurize + Clone> Policy<E> for PointerPolicy<E> {
    type Ctx = PointerCtx;

    fn begin(&self, inst: &E::Instance) -> Result<PointerCtx, PolicyError> {
        let mut tape = Tape::new();
        let staged = self.params.stage(&mut tape)?;
        let (h_agents, h_nodes) = self.encode(&mut tape, &staged, inst)?;
        debug_assert_eq!(tape.shape(h_nodes)[0], self.env.num_actions(inst));
        Ok(PointerCtx { tape, staged, h_agents, h_nodes, last_probs: None, log_prob: None })
    }

    fn probabilities(
        &self,
        inst: &E::Instance,
        state: &E::State,
        mask: &ActionMask,
        ctx: &mut PointerCtx,
    ) -> Result<ProbGrid, PolicyError> {
        let tape = &mut ctx.tape;
        let delta = tape.leaf(&self.env.agent_dynamics(inst, state))?;
        let env_row = tape.leaf(&self.env.env_features(inst, state))?;
        let xi = tape.leaf(&self.env.node_dynamics(inst, state))?;

        let mut q = net::build_context(
            tape,
            ctx.h_agents,
            delta,
            env_row,
            self.var(&ctx.staged, "ctx.w_delta"),
            self.var(&ctx.staged, "ctx.w_env"),
            self.var(&ctx.staged, "ctx.w_q"),
        )?;
        if self.config.communication {
            let comm = self.block(&ctx.staged, "comm", false);
            q = net::self_block(tape, q, &comm, self.config.heads, self.config.norm)?;
        }
        let weights = self.pointer_weights(&ctx.staged);
        let (probs, _) = net::pointer(
            tape,
            q,
            ctx.h_nodes,
            xi,
            &weights,
            self.config.heads,
            self.config.beta,
            mask.bits(),
        )?;
        ctx.last_probs = Some(probs);
        Ok(ProbGrid::new(mask.agents(), mask.actions(), tape.values(probs).to_vec()))
    }

    fn note_chosen(&self, ctx: &mut PointerCtx, choices: &[Option<usize>]) -> Result<(), PolicyError> {
        let picks: Vec<(usize, usize)> = choices
            .iter()
            .enumerate()
            .filter_map(|(agent, choice)| choice.map(|action| (agent, action)))
            .collect();
        if picks.is_empty() {
            return Ok(());
        }
        let probs = ctx
            .last_probs
            .ok_or_else(|| PolicyError::Other("note_chosen called before probabilities".into()))?;
        let term = ctx.tape.gather_log_sum(probs, &picks)?;
        ctx.log_prob = Some(match ctx.log_prob {
            Some(total) => ctx.tape.add(total, term)?,
            None => term,
        });
        Ok(())
    }
}
