//! Implicit Q-learning: expectile value regression, clipped double-Q TD
//! learning, and advantage-weighted policy extraction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_returns, Dataset, NormStats, TransitionTable};
use crate::envs::Policy;
use crate::error::{check_dim, ClueError, Result};
use crate::numerics::{
    adam_step, read_mlps, write_mlps, Activation, AdamConfig, AdamState, Mlp, OutputActivation,
};
use crate::parallel::{map_chunks, map_range, sum_ordered};
use crate::rng::{normal, Rng};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Asymmetric squared loss `|τ − 1(u<0)| · u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

/// Derivative of [`expectile_loss`] with respect to `u`.
pub fn expectile_grad(u: f64, tau: f64) -> f64 {
    2.0 * expectile_weight(u, tau) * u
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    None,
    #[default]
    ReturnRange,
    /// `r - 1`, the usual treatment for sparse goal-reaching tasks: every step
    /// costs something, so ending the episode at the goal is never worse than
    /// lingering near it.
    Shift,
}

impl std::str::FromStr for ScaleMode {
    type Err = ClueError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ScaleMode::None),
            "return_range" => Ok(ScaleMode::ReturnRange),
            "shift" => Ok(ScaleMode::Shift),
            other => Err(ClueError::InvalidArgument(format!(
                "unknown reward scaling mode {other:?}"
            ))),
        }
    }
}

/// Affine reward transform `scale * r + offset` applied before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScaler {
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
    pub mode: ScaleMode,
}

impl RewardScaler {
    pub fn none() -> Self {
        Self {
            scale: 1.0,
            offset: 0.0,
            mode: ScaleMode::None,
        }
    }

    pub fn shift() -> Self {
        Self {
            scale: 1.0,
            offset: -1.0,
            mode: ScaleMode::Shift,
        }
    }

    pub fn apply(&self, r: f64) -> f64 {
        self.scale * r + self.offset
    }
}

/// `scale = 1000 / (max_return − min_return)` over the trajectories of `d`.
pub fn fit_reward_scaler(d: &Dataset) -> Result<RewardScaler> {
    let stats = compute_returns(d)?;
    let range = stats.max - stats.min;
    if !(range > 0.0) {
        return Err(ClueError::DegenerateRange(stats.max));
    }
    Ok(RewardScaler {
        scale: 1000.0 / range,
        offset: 0.0,
        mode: ScaleMode::ReturnRange,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IqlConfig {
    pub expectile: f64,
    pub awr_temperature: f64,
    pub discount: f64,
    pub polyak: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub weight_clip: f64,
    /// Policy dropout rate; 0 disables it.
    pub dropout: f64,
    pub steps: usize,
    /// Steps between curve rows (and evaluations, when an evaluator is given).
    pub eval_interval: usize,
    pub reward_scaling: ScaleMode,
    pub normalize_states: bool,
    /// When false, goal transitions bootstrap like any other step, as in maze
    /// data where the agent keeps moving after reaching the goal. Step-limit
    /// truncations are never terminal either way.
    pub use_terminals: bool,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            expectile: 0.7,
            awr_temperature: 3.0,
            discount: 0.99,
            polyak: 0.005,
            learning_rate: 3e-4,
            batch_size: 256,
            hidden: 256,
            hidden_layers: 2,
            weight_clip: 100.0,
            dropout: 0.0,
            steps: 1_000_000,
            eval_interval: 5000,
            reward_scaling: ScaleMode::ReturnRange,
            normalize_states: true,
            use_terminals: true,
        }
    }
}

impl IqlConfig {
    /// Small networks and short runs for the point mazes.
    pub fn desk() -> Self {
        Self {
            discount: 0.95,
            learning_rate: 1e-3,
            hidden: 64,
            steps: 3000,
            eval_interval: 1000,
            reward_scaling: ScaleMode::None,
            use_terminals: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ClueError::InvalidArgument(m.to_string()));
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return bad("expectile must lie in (0, 1)");
        }
        if !(self.awr_temperature > 0.0) {
            return bad("awr_temperature must be positive");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(self.polyak > 0.0 && self.polyak < 1.0) {
            return bad("polyak must lie in (0, 1)");
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0
            || self.hidden == 0
            || !(self.learning_rate > 0.0)
            || !(self.weight_clip > 0.0)
        {
            return bad("batch_size, hidden, learning_rate and weight_clip must be positive");
        }
        Ok(())
    }
}

/// A minibatch of raw (unnormalized) transitions. Rewards are used as given.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<Vec<f64>>,
    pub terminals: Vec<bool>,
}

impl Batch {
    pub fn from_indices(t: &TransitionTable, idx: &[usize]) -> Self {
        Self {
            states: idx.iter().map(|&i| t.states.row(i).to_vec()).collect(),
            actions: idx.iter().map(|&i| t.actions.row(i).to_vec()).collect(),
            rewards: idx.iter().map(|&i| t.rewards[i]).collect(),
            next_states: idx.iter().map(|&i| t.next_states.row(i).to_vec()).collect(),
            terminals: idx.iter().map(|&i| t.terminals[i]).collect(),
        }
    }

    /// Uniform sample with replacement.
    pub fn sample(t: &TransitionTable, size: usize, rng: &mut Rng) -> Self {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..t.len())).collect();
        Self::from_indices(t, &idx)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub v_loss: f64,
    pub q_loss: f64,
    pub pi_loss: f64,
}

impl LossReport {
    fn is_finite(&self) -> bool {
        self.v_loss.is_finite() && self.q_loss.is_finite() && self.pi_loss.is_finite()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AgentSidecar {
    config: IqlConfig,
    state_dim: usize,
    action_dim: usize,
    log_std: Vec<f64>,
    norm: NormStats,
    reward_scaler: RewardScaler,
}

/// Value, twin-Q, and Gaussian policy networks with their optimizers.
#[derive(Debug, Clone)]
pub struct IqlAgent {
    pub config: IqlConfig,
    state_dim: usize,
    action_dim: usize,
    policy: Mlp,
    log_std: Vec<f64>,
    value: Mlp,
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    opt_policy: AdamState,
    opt_log_std: AdamState,
    opt_value: AdamState,
    opt_q1: AdamState,
    opt_q2: AdamState,
    norm: NormStats,
    reward_scaler: RewardScaler,
}

fn mlp_sizes(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(std::iter::repeat_n(hidden, layers));
    sizes.push(output);
    sizes
}

impl IqlAgent {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        config: IqlConfig,
        norm: NormStats,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        check_dim("normalization stats", state_dim, norm.mean.len())?;
        let (h, l) = (config.hidden, config.hidden_layers);
        let policy = Mlp::new(
            &mlp_sizes(state_dim, h, l, action_dim),
            Activation::Relu,
            OutputActivation::Tanh,
            rng,
        )?;
        let value = Mlp::new(
            &mlp_sizes(state_dim, h, l, 1),
            Activation::Relu,
            OutputActivation::Identity,
            rng,
        )?;
        let q_sizes = mlp_sizes(state_dim + action_dim, h, l, 1);
        let q1 = Mlp::new(&q_sizes, Activation::Relu, OutputActivation::Identity, rng)?;
        let q2 = Mlp::new(&q_sizes, Activation::Relu, OutputActivation::Identity, rng)?;
        let adam = AdamConfig::with_lr(config.learning_rate);
        Ok(Self {
            state_dim,
            action_dim,
            log_std: vec![0.0; action_dim],
            opt_policy: AdamState::new(policy.num_params(), adam),
            opt_log_std: AdamState::new(action_dim, adam),
            opt_value: AdamState::new(value.num_params(), adam),
            opt_q1: AdamState::new(q1.num_params(), adam),
            opt_q2: AdamState::new(q2.num_params(), adam),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            value,
            q1,
            q2,
            config,
            norm,
            reward_scaler: RewardScaler::none(),
        })
    }

    /// Agent sized for `d`, normalizing states with its statistics if configured.
    pub fn for_dataset(d: &Dataset, config: IqlConfig, rng: &mut Rng) -> Result<Self> {
        let norm = if config.normalize_states {
            d.state_stats()
        } else {
            NormStats::identity(d.state_dim())
        };
        Self::new(d.state_dim(), d.action_dim(), config, norm, rng)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn policy_net(&self) -> &Mlp {
        &self.policy
    }

    pub fn policy_net_mut(&mut self) -> &mut Mlp {
        &mut self.policy
    }

    pub fn value_net(&self) -> &Mlp {
        &self.value
    }

    pub fn value_net_mut(&mut self) -> &mut Mlp {
        &mut self.value
    }

    pub fn q_nets(&self) -> (&Mlp, &Mlp) {
        (&self.q1, &self.q2)
    }

    pub fn q_nets_mut(&mut self) -> (&mut Mlp, &mut Mlp) {
        (&mut self.q1, &mut self.q2)
    }

    pub fn target_nets(&self) -> (&Mlp, &Mlp) {
        (&self.q1_target, &self.q2_target)
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        &mut self.log_std
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn reward_scaler(&self) -> RewardScaler {
        self.reward_scaler
    }

    fn q_input(&self, s_norm: &[f64], a: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.state_dim + self.action_dim);
        x.extend_from_slice(s_norm);
        x.extend_from_slice(a);
        x
    }

    fn check_batch(&self, b: &Batch) -> Result<()> {
        if b.is_empty() {
            return Err(ClueError::InvalidArgument("empty batch".into()));
        }
        let n = b.len();
        for len in [
            b.states.len(),
            b.actions.len(),
            b.next_states.len(),
            b.terminals.len(),
        ] {
            check_dim("batch columns", n, len)?;
        }
        for i in 0..n {
            check_dim("batch state", self.state_dim, b.states[i].len())?;
            check_dim("batch next state", self.state_dim, b.next_states[i].len())?;
            check_dim("batch action", self.action_dim, b.actions[i].len())?;
        }
        Ok(())
    }

    /// `min(Q̄₁, Q̄₂)(s, a)` from the target networks.
    pub fn target_q(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let x = self.q_input(&self.norm.normalize(s), a);
        Ok(self.q1_target.forward(&x)?[0].min(self.q2_target.forward(&x)?[0]))
    }

    pub fn state_value(&self, s: &[f64]) -> Result<f64> {
        Ok(self.value.forward(&self.norm.normalize(s))?[0])
    }

    fn batch_target_q(&self, b: &Batch) -> Result<Vec<f64>> {
        map_range(b.len(), |i| self.target_q(&b.states[i], &b.actions[i]))
            .into_iter()
            .collect()
    }

    /// Expectile regression of `V(s)` onto target `min Q`; returns loss and
    /// value-network gradient.
    pub fn value_objective(&self, b: &Batch) -> Result<(f64, Vec<f64>)> {
        self.check_batch(b)?;
        let qt = self.batch_target_q(b)?;
        self.value_objective_with(b, &qt)
    }

    fn value_objective_with(&self, b: &Batch, qt: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (n, np, tau) = (b.len(), self.value.num_params(), self.config.expectile);
        let parts = map_chunks(n, |range| -> Result<(Vec<f64>, f64)> {
            let mut g = vec![0.0; np];
            let mut loss = 0.0;
            for i in range {
                let trace = self
                    .value
                    .forward_trace(&self.norm.normalize(&b.states[i]), None)?;
                let u = qt[i] - trace.output[0];
                loss += expectile_loss(u, tau);
                self.value
                    .backward_trace(&trace, &[-expectile_grad(u, tau) / n as f64], &mut g);
            }
            Ok((g, loss))
        });
        reduce(parts, np, n)
    }

    /// TD targets `r + γ(1 − terminal)V(s')`.
    pub fn td_targets(&self, b: &Batch) -> Result<Vec<f64>> {
        let gamma = self.config.discount;
        map_range(b.len(), |i| {
            let v_next = if b.terminals[i] {
                0.0
            } else {
                self.state_value(&b.next_states[i])?
            };
            Ok(b.rewards[i] + gamma * v_next)
        })
        .into_iter()
        .collect()
    }

    /// `mean((Q₁ − y)²)` and `mean((Q₂ − y)²)` gradients; the returned loss is their sum.
    pub fn q_objective(&self, b: &Batch) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check_batch(b)?;
        let y = self.td_targets(b)?;
        let (l1, g1) = self.q_objective_single(&self.q1, b, &y)?;
        let (l2, g2) = self.q_objective_single(&self.q2, b, &y)?;
        Ok((l1 + l2, g1, g2))
    }

    fn q_objective_single(&self, q: &Mlp, b: &Batch, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (n, np) = (b.len(), q.num_params());
        let parts = map_chunks(n, |range| -> Result<(Vec<f64>, f64)> {
            let mut g = vec![0.0; np];
            let mut loss = 0.0;
            for i in range {
                let x = self.q_input(&self.norm.normalize(&b.states[i]), &b.actions[i]);
                let trace = q.forward_trace(&x, None)?;
                let d = trace.output[0] - y[i];
                loss += d * d;
                q.backward_trace(&trace, &[2.0 * d / n as f64], &mut g);
            }
            Ok((g, loss))
        });
        reduce(parts, np, n)
    }

    /// Clipped advantage weight `min(exp(β · adv), clip)`.
    pub fn awr_weight(&self, advantage: f64) -> f64 {
        (self.config.awr_temperature * advantage)
            .exp()
            .min(self.config.weight_clip)
    }

    /// Advantage-weighted log-likelihood loss `−mean(w · log π(a|s))`; returns
    /// loss, policy-network gradient, and log-std gradient.
    pub fn policy_objective(
        &self,
        b: &Batch,
        masks: Option<&[Vec<Vec<f64>>]>,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check_batch(b)?;
        let qt = self.batch_target_q(b)?;
        self.policy_objective_with(b, &qt, masks)
    }

    fn policy_objective_with(
        &self,
        b: &Batch,
        qt: &[f64],
        masks: Option<&[Vec<Vec<f64>>]>,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (n, np, ad) = (b.len(), self.policy.num_params(), self.action_dim);
        let std: Vec<f64> = self.log_std.iter().map(|l| l.exp()).collect();
        let log_norm: f64 = self.log_std.iter().sum::<f64>() + ad as f64 * HALF_LN_2PI;
        let parts = map_chunks(n, |range| -> Result<(Vec<f64>, f64)> {
            // Layout: policy grad, then log-std grad.
            let mut g = vec![0.0; np + ad];
            let mut loss = 0.0;
            for i in range {
                let s = self.norm.normalize(&b.states[i]);
                let w = self.awr_weight(qt[i] - self.value.forward(&s)?[0]);
                let trace = self.policy.forward_trace(&s, masks.map(|m| m[i].clone()))?;
                let mut logp = -log_norm;
                let mut d_mu = vec![0.0; ad];
                for j in 0..ad {
                    let z = (b.actions[i][j] - trace.output[j]) / std[j];
                    logp -= 0.5 * z * z;
                    d_mu[j] = -w * z / std[j] / n as f64;
                    g[np + j] += -w * (z * z - 1.0) / n as f64;
                }
                loss -= w * logp;
                self.policy.backward_trace(&trace, &d_mu, &mut g[..np]);
            }
            Ok((g, loss))
        });
        let (loss, mut g) = reduce(parts, np + ad, n)?;
        let g_log_std = g.split_off(np);
        Ok((loss, g, g_log_std))
    }

    /// One IQL update: value, then twin Q, then policy, then target averaging.
    pub fn train_step(&mut self, b: &Batch, rng: &mut Rng) -> Result<LossReport> {
        self.check_batch(b)?;
        let qt = self.batch_target_q(b)?;

        let (v_loss, gv) = self.value_objective_with(b, &qt)?;
        adam_step(self.value.params_mut(), &gv, &mut self.opt_value)?;

        let y = self.td_targets(b)?;
        let (l1, g1) = self.q_objective_single(&self.q1, b, &y)?;
        let (l2, g2) = self.q_objective_single(&self.q2, b, &y)?;
        adam_step(self.q1.params_mut(), &g1, &mut self.opt_q1)?;
        adam_step(self.q2.params_mut(), &g2, &mut self.opt_q2)?;

        let masks = (self.config.dropout > 0.0).then(|| {
            (0..b.len())
                .map(|_| self.policy.sample_dropout(self.config.dropout, rng))
                .collect::<Vec<_>>()
        });
        let (pi_loss, gp, gl) = self.policy_objective_with(b, &qt, masks.as_deref())?;
        adam_step(self.policy.params_mut(), &gp, &mut self.opt_policy)?;
        adam_step(&mut self.log_std, &gl, &mut self.opt_log_std)?;
        self.log_std
            .iter_mut()
            .for_each(|l| *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX));

        self.update_targets();
        let report = LossReport {
            v_loss,
            q_loss: l1 + l2,
            pi_loss,
        };
        if !report.is_finite() {
            return Err(ClueError::TrainingDiverged(format!(
                "non-finite IQL loss {report:?}"
            )));
        }
        Ok(report)
    }

    /// `target ← ρ · online + (1 − ρ) · target`.
    pub fn update_targets(&mut self) {
        let rho = self.config.polyak;
        polyak(self.q1_target.params_mut(), self.q1.params(), rho);
        polyak(self.q2_target.params_mut(), self.q2.params(), rho);
    }

    /// Squashed policy mean, or a clipped Gaussian sample around it.
    pub fn act(&self, s: &[f64], deterministic: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        check_dim("state", self.state_dim, s.len())?;
        let mut mu = self.policy.forward(&self.norm.normalize(s))?;
        if !deterministic {
            for (m, l) in mu.iter_mut().zip(&self.log_std) {
                *m = (*m + l.exp() * normal(rng)).clamp(-1.0, 1.0);
            }
        }
        Ok(mu)
    }

    pub fn save(&self, ckpt: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<()> {
        write_mlps(
            BufWriter::new(File::create(ckpt)?),
            &[
                &self.policy,
                &self.value,
                &self.q1,
                &self.q2,
                &self.q1_target,
                &self.q2_target,
            ],
        )?;
        let meta = AgentSidecar {
            config: self.config.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            log_std: self.log_std.clone(),
            norm: self.norm.clone(),
            reward_scaler: self.reward_scaler,
        };
        let mut w = BufWriter::new(File::create(sidecar)?);
        serde_json::to_writer_pretty(&mut w, &meta)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(ckpt: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<Self> {
        let meta: AgentSidecar = serde_json::from_reader(BufReader::new(File::open(sidecar)?))?;
        let relu_id = (Activation::Relu, OutputActivation::Identity);
        let mut nets = read_mlps(
            BufReader::new(File::open(ckpt)?),
            &[
                (Activation::Relu, OutputActivation::Tanh),
                relu_id,
                relu_id,
                relu_id,
                relu_id,
                relu_id,
            ],
        )?
        .into_iter();
        let mut next = || nets.next().expect("six networks");
        let (policy, value, q1, q2, q1_target, q2_target) =
            (next(), next(), next(), next(), next(), next());
        check_dim("policy input", meta.state_dim, policy.input_dim())?;
        check_dim("policy output", meta.action_dim, policy.output_dim())?;
        check_dim("log std", meta.action_dim, meta.log_std.len())?;
        check_dim("q input", meta.state_dim + meta.action_dim, q1.input_dim())?;
        let adam = AdamConfig::with_lr(meta.config.learning_rate);
        Ok(Self {
            opt_policy: AdamState::new(policy.num_params(), adam),
            opt_log_std: AdamState::new(meta.action_dim, adam),
            opt_value: AdamState::new(value.num_params(), adam),
            opt_q1: AdamState::new(q1.num_params(), adam),
            opt_q2: AdamState::new(q2.num_params(), adam),
            config: meta.config,
            state_dim: meta.state_dim,
            action_dim: meta.action_dim,
            policy,
            log_std: meta.log_std,
            value,
            q1,
            q2,
            q1_target,
            q2_target,
            norm: meta.norm,
            reward_scaler: meta.reward_scaler,
        })
    }
}

/// Deterministic (mean) action, as used for evaluation.
impl Policy for IqlAgent {
    fn act(&self, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        IqlAgent::act(self, state, true, rng).expect("state dimension checked by caller")
    }
}

pub fn polyak(target: &mut [f64], online: &[f64], rho: f64) {
    for (t, o) in target.iter_mut().zip(online) {
        *t = rho * o + (1.0 - rho) * *t;
    }
}

fn reduce(parts: Vec<Result<(Vec<f64>, f64)>>, len: usize, n: usize) -> Result<(f64, Vec<f64>)> {
    let mut grads = Vec::with_capacity(parts.len());
    let mut loss = 0.0;
    for p in parts {
        let (g, l) = p?;
        loss += l;
        grads.push(g);
    }
    Ok((loss / n as f64, sum_ordered(grads, len)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub v_loss: f64,
    pub q_loss: f64,
    pub pi_loss: f64,
    pub eval_return: Option<f64>,
    pub eval_success_rate: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainCurves {
    pub points: Vec<CurvePoint>,
    pub diverged: Option<String>,
}

impl TrainCurves {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "step,v_loss,q_loss,pi_loss,eval_return,eval_success_rate"
        )?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.step,
                p.v_loss,
                p.q_loss,
                p.pi_loss,
                opt(p.eval_return),
                opt(p.eval_success_rate)
            )?;
        }
        Ok(())
    }

    pub fn into_result(self) -> Result<Self> {
        match &self.diverged {
            Some(msg) => Err(ClueError::TrainingDiverged(msg.clone())),
            None => Ok(self),
        }
    }
}

/// Evaluation hook: returns `(mean return, success rate)` for a snapshot.
pub type Evaluator<'a> = &'a (dyn Fn(&IqlAgent) -> (f64, f64) + Sync);

/// Trains on `d` for `steps` updates. Rewards are rescaled according to
/// `agent.config.reward_scaling`; a degenerate return range falls back to no
/// scaling. Curve rows are averages over each `eval_interval` window.
/// Divergence stops training and is reported in the returned curves.
pub fn train(
    agent: &mut IqlAgent,
    d: &Dataset,
    steps: usize,
    rng: &mut Rng,
    evaluator: Option<Evaluator<'_>>,
) -> Result<TrainCurves> {
    check_dim("dataset state", agent.state_dim, d.state_dim())?;
    check_dim("dataset action", agent.action_dim, d.action_dim())?;
    if !d.is_labeled() {
        return Err(ClueError::MissingRewards);
    }
    agent.reward_scaler = match agent.config.reward_scaling {
        ScaleMode::None => RewardScaler::none(),
        ScaleMode::Shift => RewardScaler::shift(),
        ScaleMode::ReturnRange => fit_reward_scaler(d).unwrap_or_else(|e| {
            log::warn!("reward scaling disabled: {e}");
            RewardScaler::none()
        }),
    };
    let mut table = d.table();
    let scaler = agent.reward_scaler;
    table.rewards.iter_mut().for_each(|r| *r = scaler.apply(*r));
    if !agent.config.use_terminals {
        table.terminals.iter_mut().for_each(|t| *t = false);
    }

    let interval = agent.config.eval_interval.max(1);
    let mut curves = TrainCurves::default();
    let mut acc = LossReport::default();
    let mut count = 0usize;
    for step in 1..=steps {
        let batch = Batch::sample(&table, agent.config.batch_size, rng);
        match agent.train_step(&batch, rng) {
            Ok(r) => {
                acc.v_loss += r.v_loss;
                acc.q_loss += r.q_loss;
                acc.pi_loss += r.pi_loss;
                count += 1;
            }
            Err(ClueError::TrainingDiverged(msg)) => {
                curves.diverged = Some(format!("step {step}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        }
        if step % interval == 0 || step == steps {
            let (eval_return, eval_success_rate) = match evaluator {
                Some(f) => {
                    let (r, s) = f(agent);
                    (Some(r), Some(s))
                }
                None => (None, None),
            };
            let k = count.max(1) as f64;
            curves.points.push(CurvePoint {
                step,
                v_loss: acc.v_loss / k,
                q_loss: acc.q_loss / k,
                pi_loss: acc.pi_loss / k,
                eval_return,
                eval_success_rate,
            });
            log::debug!("iql step {step}: {:?}", curves.points.last());
            acc = LossReport::default();
            count = 0;
        }
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Trajectory, Transition};
    use crate::rng::seeded;

    fn tiny_config() -> IqlConfig {
        IqlConfig {
            hidden: 16,
            batch_size: 8,
            learning_rate: 1e-2,
            reward_scaling: ScaleMode::None,
            normalize_states: false,
            ..IqlConfig::default()
        }
    }

    fn tr(s: f64, a: f64, r: f64, s2: f64, terminal: bool) -> Transition {
        Transition {
            state: vec![s],
            action: vec![a],
            reward: Some(r),
            next_state: vec![s2],
            terminal,
        }
    }

    #[test]
    fn scale_modes_parse_and_shift() {
        for (s, m) in [
            ("none", ScaleMode::None),
            ("return_range", ScaleMode::ReturnRange),
            ("shift", ScaleMode::Shift),
        ] {
            assert_eq!(s.parse::<ScaleMode>().unwrap(), m);
        }
        assert!("return-range".parse::<ScaleMode>().is_err());
        let sh = RewardScaler::shift();
        assert_eq!(sh.apply(1.0), 0.0);
        assert_eq!(sh.apply(0.0), -1.0);
        assert_eq!(RewardScaler::none().apply(0.25), 0.25);
    }

    #[test]
    fn expectile_cases() {
        assert_eq!(expectile_loss(2.0, 0.5), 2.0);
        assert!((expectile_loss(-1.0, 0.9) - 0.1).abs() < 1e-15);
        assert_eq!(expectile_loss(1.0, 0.9), 0.9);
    }

    #[test]
    fn scaler_formula() {
        let d = Dataset::new(vec![
            Trajectory::new(vec![tr(0.0, 0.0, 0.0, 1.0, false)], None),
            Trajectory::new(vec![tr(0.0, 0.0, 10.0, 1.0, false)], None),
        ])
        .unwrap();
        assert_eq!(fit_reward_scaler(&d).unwrap().scale, 100.0);
        let d = Dataset::new(vec![
            Trajectory::new(vec![tr(0.0, 0.0, -5.0, 1.0, false)], None),
            Trajectory::new(vec![tr(0.0, 0.0, 5.0, 1.0, false)], None),
        ])
        .unwrap();
        assert_eq!(fit_reward_scaler(&d).unwrap().scale, 100.0);
        let d = Dataset::new(vec![Trajectory::new(
            vec![tr(0.0, 0.0, 1.0, 1.0, false)],
            None,
        )])
        .unwrap();
        assert!(matches!(
            fit_reward_scaler(&d),
            Err(ClueError::DegenerateRange(_))
        ));
    }

    #[test]
    fn zero_policy_acts_tanh_bias() {
        let mut agent =
            IqlAgent::new(2, 2, tiny_config(), NormStats::identity(2), &mut seeded(0)).unwrap();
        agent.policy.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let last = agent.policy.num_layers() - 1;
        agent.policy.bias_mut(last).copy_from_slice(&[0.5, -2.0]);
        let a = agent.act(&[3.0, 4.0], true, &mut seeded(1)).unwrap();
        assert_eq!(a, vec![0.5f64.tanh(), (-2.0f64).tanh()]);
        let b = agent.act(&[3.0, 4.0], true, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        let s = agent.act(&[3.0, 4.0], false, &mut seeded(2)).unwrap();
        assert!(s.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn awr_weight_is_one_without_advantage() {
        let agent =
            IqlAgent::new(1, 1, tiny_config(), NormStats::identity(1), &mut seeded(0)).unwrap();
        assert_eq!(agent.awr_weight(0.0), 1.0);
        assert_eq!(agent.awr_weight(1e3), 100.0);
    }

    #[test]
    fn polyak_exact() {
        let mut t = vec![1.0, 2.0];
        polyak(&mut t, &[3.0, -2.0], 0.25);
        assert_eq!(t, vec![0.25 * 3.0 + 0.75 * 1.0, 0.25 * -2.0 + 0.75 * 2.0]);
    }

    #[test]
    fn terminal_target_ignores_next_value() {
        let agent =
            IqlAgent::new(1, 1, tiny_config(), NormStats::identity(1), &mut seeded(0)).unwrap();
        let b = Batch {
            states: vec![vec![0.0], vec![0.0]],
            actions: vec![vec![0.0], vec![0.0]],
            rewards: vec![1.0, 1.0],
            next_states: vec![vec![5.0], vec![5.0]],
            terminals: vec![true, false],
        };
        let y = agent.td_targets(&b).unwrap();
        assert_eq!(y[0], 1.0);
        assert_eq!(y[1], 1.0 + 0.99 * agent.state_value(&[5.0]).unwrap());
    }

    #[test]
    fn q_fixed_point_without_discount() {
        let config = IqlConfig {
            discount: 1e-12,
            expectile: 0.5,
            ..tiny_config()
        };
        let trans = [(0.0, 0.5, 0.2), (1.0, -0.5, 0.7), (2.0, 0.0, -0.3)];
        let d = Dataset::new(
            trans
                .iter()
                .map(|&(s, a, r)| Trajectory::new(vec![tr(s, a, r, s + 0.5, true)], None))
                .collect(),
        )
        .unwrap();
        let mut rng = seeded(3);
        let mut agent = IqlAgent::for_dataset(&d, config, &mut rng).unwrap();
        let table = d.table();
        let all = Batch::from_indices(&table, &[0, 1, 2]);
        for _ in 0..3000 {
            agent.train_step(&all, &mut rng).unwrap();
        }
        for &(s, a, r) in &trans {
            let x = [s, a];
            let q = agent.q1.forward(&x).unwrap()[0];
            assert!((q - r).abs() < 1e-2, "Q({s},{a}) = {q}, want {r}");
        }
    }

    #[test]
    fn chain_policy_prefers_rewarding_action() {
        // From x = 0, action +1 reaches the goal (reward 1); action −1 stays.
        let mut trajs = Vec::new();
        for _ in 0..20 {
            trajs.push(Trajectory::new(
                vec![tr(0.0, 1.0, 1.0, 1.0, true)],
                Some(true),
            ));
            trajs.push(Trajectory::new(
                vec![tr(0.0, -1.0, 0.0, 0.0, false)],
                Some(false),
            ));
        }
        let d = Dataset::new(trajs).unwrap();
        let mut rng = seeded(5);
        let config = IqlConfig {
            discount: 0.5,
            awr_temperature: 10.0,
            ..tiny_config()
        };
        let mut agent = IqlAgent::for_dataset(&d, config, &mut rng).unwrap();
        train(&mut agent, &d, 1500, &mut rng, None)
            .unwrap()
            .into_result()
            .unwrap();
        assert!(agent.act(&[0.0], true, &mut rng).unwrap()[0] > 0.5);
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_round_trips() {
        let trajs: Vec<Trajectory> = (0..6)
            .map(|i| {
                Trajectory::new(
                    vec![tr(
                        i as f64,
                        0.1 * i as f64,
                        i as f64,
                        i as f64 + 1.0,
                        false,
                    )],
                    None,
                )
            })
            .collect();
        let d = Dataset::new(trajs).unwrap();
        let config = IqlConfig {
            reward_scaling: ScaleMode::ReturnRange,
            dropout: 0.2,
            ..tiny_config()
        };
        let run = || {
            let mut rng = seeded(9);
            let mut a = IqlAgent::for_dataset(&d, config.clone(), &mut rng).unwrap();
            let c = train(&mut a, &d, 50, &mut rng, None).unwrap();
            (a, c)
        };
        let (a1, c1) = run();
        let (a2, c2) = run();
        assert_eq!(c1.points, c2.points);
        assert_eq!(a1.policy, a2.policy);
        assert_eq!(a1.reward_scaler().scale, 200.0);

        let dir = tempfile::tempdir().unwrap();
        let (ck, sc) = (dir.path().join("a.ckpt"), dir.path().join("a.json"));
        a1.save(&ck, &sc).unwrap();
        let b = IqlAgent::load(&ck, &sc).unwrap();
        assert_eq!(b.policy, a1.policy);
        assert_eq!(b.q2_target, a1.q2_target);
        assert_eq!(b.log_std, a1.log_std);
        let mut csv = Vec::new();
        c1.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("step,v_loss,q_loss,pi_loss,eval_return,eval_success_rate\n"));
    }
}
