//! Offline deterministic actor-critic on replayed transitions: the critic
//! regresses toward soft-updated target-network TD values, the actor ascends
//! the critic's value of its own actions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::bg_env::Policy;
use crate::diffnum::{
    clip_global_norm, Activation, AdamState, Checkpoint, Mlp, ParamReg, Tape, Tensor,
};
use crate::error::{Error, Result};
use crate::replay::{ReplayBuffer, Transition};

/// Deterministic policy: feedforward net squashing to (0, 1) with a final
/// sigmoid.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    net: Mlp,
}

impl PolicyNet {
    pub fn new(state_width: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut dims = vec![state_width];
        dims.extend_from_slice(hidden);
        dims.push(1);
        PolicyNet { net: Mlp::new(&dims, Activation::Relu, Activation::Sigmoid, rng) }
    }

    pub fn state_width(&self) -> usize {
        self.net.in_dim()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        let dims = self.net.dims();
        dims[1..dims.len() - 1].to_vec()
    }

    /// Deterministic action in [0, 1].
    pub fn act(&self, state: &[f64]) -> Result<f64> {
        if state.len() != self.state_width() {
            return Err(Error::dimension(
                "PolicyNet::act",
                format!("state length {} vs expected {}", state.len(), self.state_width()),
            ));
        }
        Ok(self.net.eval(state)[0])
    }

    /// Tape forward for a batch matrix of states; returns the [n, 1] action
    /// column.
    pub fn forward(
        &self,
        tape: &mut Tape,
        reg: &mut ParamReg,
        name: &str,
        states: crate::diffnum::Var,
    ) -> Result<crate::diffnum::Var> {
        self.net.forward(tape, reg, name, states)
    }

    pub fn params_mut(&mut self, name: &str) -> Vec<(String, &mut Tensor)> {
        self.net.params_mut(name)
    }

    pub fn params(&self, name: &str) -> Vec<(String, &Tensor)> {
        self.net.params(name)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "policy");
        ck.set_meta("state_width", self.state_width());
        ck.set_meta(
            "hidden",
            self.hidden_dims().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
        );
        for (name, t) in self.params("actor") {
            ck.insert_tensor(&name, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.require_meta("kind")? != "policy" {
            return Err(Error::Contract("checkpoint is not a policy".into()));
        }
        let state_width: usize = ck
            .require_meta("state_width")?
            .parse()
            .map_err(|_| Error::Contract("bad state_width metadata".into()))?;
        let hidden = parse_dims(ck.require_meta("hidden")?)?;
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut net = PolicyNet::new(state_width, &hidden, &mut rng);
        ck.load_into(&mut net.params_mut("actor"))?;
        Ok(net)
    }
}

impl Policy for PolicyNet {
    fn action(&mut self, state: &[f64]) -> f64 {
        self.act(state).expect("state width checked by caller")
    }
}

/// Evaluation adapter so an immutable policy snapshot can drive sessions.
pub struct PolicyRef<'a>(pub &'a PolicyNet);

impl Policy for PolicyRef<'_> {
    fn action(&mut self, state: &[f64]) -> f64 {
        self.0.act(state).expect("state width checked by caller")
    }
}

/// Parses a comma-separated layer-size list ("400,300").
pub fn parse_dims(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim().parse::<usize>().map_err(|_| Error::Contract(format!("bad dims entry '{p}'")))
        })
        .collect()
}

/// Q-network over concatenated (state, action).
#[derive(Debug, Clone)]
pub struct CriticNet {
    net: Mlp,
}

impl CriticNet {
    pub fn new(state_width: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut dims = vec![state_width + 1];
        dims.extend_from_slice(hidden);
        dims.push(1);
        CriticNet { net: Mlp::new(&dims, Activation::Relu, Activation::Linear, rng) }
    }

    pub fn state_width(&self) -> usize {
        self.net.in_dim() - 1
    }

    pub fn q(&self, state: &[f64], action: f64) -> Result<f64> {
        if state.len() != self.state_width() {
            return Err(Error::dimension(
                "CriticNet::q",
                format!("state length {} vs expected {}", state.len(), self.state_width()),
            ));
        }
        let mut x = state.to_vec();
        x.push(action);
        Ok(self.net.eval(&x)[0])
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        reg: &mut ParamReg,
        name: &str,
        state_action: crate::diffnum::Var,
    ) -> Result<crate::diffnum::Var> {
        self.net.forward(tape, reg, name, state_action)
    }

    pub fn params_mut(&mut self, name: &str) -> Vec<(String, &mut Tensor)> {
        self.net.params_mut(name)
    }

    pub fn params(&self, name: &str) -> Vec<(String, &Tensor)> {
        self.net.params(name)
    }
}

/// Uniform-random behavior controller on [low, 1]: the exploration policy
/// that seeds the replay buffer.
pub struct UniformRandomPolicy {
    low: f64,
    rng: ChaCha12Rng,
}

impl UniformRandomPolicy {
    pub fn density(&self, action: f64) -> f64 {
        uniform_density(self.low, action)
    }

    pub fn low(&self) -> f64 {
        self.low
    }
}

/// Density of the uniform-[low, 1] behavior policy at `action`.
pub fn uniform_density(low: f64, action: f64) -> f64 {
    if (low..=1.0).contains(&action) {
        1.0 / (1.0 - low)
    } else {
        0.0
    }
}

/// Stateless-per-call stochastic policy drawing uniformly from [B, 1].
pub fn behavior_policy_uniform(b: f64, seed: u64) -> Result<UniformRandomPolicy> {
    if !(0.0..1.0).contains(&b) {
        return Err(Error::Domain(format!("behavior lower bound {b} outside [0, 1)")));
    }
    Ok(UniformRandomPolicy { low: b, rng: ChaCha12Rng::seed_from_u64(seed) })
}

impl Policy for UniformRandomPolicy {
    fn action(&mut self, _state: &[f64]) -> f64 {
        self.rng.gen_range(self.low..=1.0)
    }
}

/// Σ_k γ^k r_k, plus the undiscounted end-of-session reward when present.
pub fn discounted_return(rewards: &[f64], gamma: f64, r_end: Option<f64>) -> f64 {
    let mut acc = 0.0;
    let mut g = 1.0;
    for r in rewards {
        acc += g * r;
        g *= gamma;
    }
    acc + r_end.unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Target-network soft-update rate.
    pub tau: f64,
    pub grad_clip: f64,
    /// Reserved: behavior-regularization weight (defaults off).
    pub behavior_reg: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![400, 300],
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            gamma: 0.99,
            batch_size: 64,
            steps: 10_000,
            tau: 0.005,
            grad_clip: 10.0,
            behavior_reg: 0.0,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Domain(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Domain(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning-rate range labels: fresh training is expected in
    /// [1e-5, 1e-3], fine-tuning in [1e-7, 1e-5].
    pub fn lr_range_warnings(&self, fine_tune: bool) -> Vec<String> {
        let (lo, hi) = if fine_tune { (1e-7, 1e-5) } else { (1e-5, 1e-3) };
        let mut warnings = Vec::new();
        for (label, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if lr < lo || lr > hi {
                warnings.push(format!(
                    "{label} {lr:e} outside the expected {} range [{lo:e}, {hi:e}]",
                    if fine_tune { "fine-tune" } else { "from-scratch" }
                ));
            }
        }
        warnings
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub mean_batch_action: f64,
}

pub struct TrainResult {
    pub actor: PolicyNet,
    pub critic: CriticNet,
    pub log: Vec<TrainLogRow>,
}

/// Training state: live and target networks plus their optimizers.
pub struct ActorCriticTrainer {
    pub actor: PolicyNet,
    pub critic: CriticNet,
    pub actor_target: PolicyNet,
    pub critic_target: CriticNet,
    adam_actor: AdamState,
    adam_critic: AdamState,
    config: TrainConfig,
}

impl ActorCriticTrainer {
    pub fn new(state_width: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let actor = PolicyNet::new(state_width, &config.hidden, &mut rng);
        let critic = CriticNet::new(state_width, &config.hidden, &mut rng);
        Ok(ActorCriticTrainer {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            adam_actor: AdamState::new(config.actor_lr),
            adam_critic: AdamState::new(config.critic_lr),
            actor,
            critic,
            config,
        })
    }

    pub fn from_actor(actor: PolicyNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state_width = actor.state_width();
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(1));
        let critic = CriticNet::new(state_width, &config.hidden, &mut rng);
        Ok(ActorCriticTrainer {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            adam_actor: AdamState::new(config.actor_lr),
            adam_critic: AdamState::new(config.critic_lr),
            actor,
            critic,
            config,
        })
    }

    /// One TD regression step: y = r + γ·Q_target(s', a') with a' supplied by
    /// `next_action` (the target actor in the standard loop). Returns the
    /// batch MSE.
    pub fn critic_step(
        &mut self,
        batch: &[&Transition],
        next_action: impl Fn(&[f64]) -> f64,
    ) -> Result<f64> {
        let n = batch.len();
        let w = batch[0].state.len();
        let mut sa = Vec::with_capacity(n * (w + 1));
        let mut targets = Vec::with_capacity(n);
        for tr in batch {
            sa.extend_from_slice(&tr.state);
            sa.push(tr.action);
            let a_next = next_action(&tr.next_state);
            let q_next = self.critic_target.q(&tr.next_state, a_next)?;
            targets.push(tr.reward + self.config.gamma * q_next);
        }
        let mut tape = Tape::new();
        let mut reg = ParamReg::new();
        let x = tape.leaf(sa, vec![n, w + 1]);
        let q = self.critic.forward(&mut tape, &mut reg, "critic", x)?;
        let y = tape.leaf(targets, vec![n, 1]);
        let diff = tape.sub(q, y)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq);
        let loss_value = tape.value_scalar(loss);
        tape.backward(loss)?;
        let mut params = self.critic.params_mut("critic");
        reg.harvest(&tape, &mut params)?;
        clip_global_norm(&mut params, self.config.grad_clip);
        self.adam_critic.update(&mut params)?;
        Ok(loss_value)
    }

    /// One policy-gradient step ascending E_batch[Q(s, π(s))]. Returns the
    /// pre-update batch mean Q and mean action.
    pub fn actor_step(&mut self, batch: &[&Transition]) -> Result<(f64, f64)> {
        let n = batch.len();
        let w = batch[0].state.len();
        let mut states = Vec::with_capacity(n * w);
        for tr in batch {
            states.extend_from_slice(&tr.state);
        }
        let mut tape = Tape::new();
        let mut reg = ParamReg::new();
        let s = tape.leaf(states, vec![n, w]);
        let a = self.actor.forward(&mut tape, &mut reg, "actor", s)?;
        let sa = tape.concat(&[s, a])?;
        let q = self.critic.forward(&mut tape, &mut reg, "critic", sa)?;
        let mean_q = tape.mean(q);
        let objective = tape.value_scalar(mean_q);
        let mean_action = tape.value(a).iter().sum::<f64>() / n as f64;
        let loss = tape.scale(mean_q, -1.0);
        tape.backward(loss)?;
        // only the actor moves; the critic's gradients are left unharvested
        let mut params = self.actor.params_mut("actor");
        reg.harvest(&tape, &mut params)?;
        clip_global_norm(&mut params, self.config.grad_clip);
        self.adam_actor.update(&mut params)?;
        Ok((objective, mean_action))
    }

    /// θ' ← τ·θ + (1−τ)·θ' for both target networks.
    pub fn soft_update_targets(&mut self) {
        let tau = self.config.tau;
        blend(&mut self.actor_target.params_mut("t"), &self.actor.params("t"), tau);
        blend(&mut self.critic_target.params_mut("t"), &self.critic.params("t"), tau);
    }

    /// Full offline loop: alternating critic and actor updates with soft
    /// target tracking.
    pub fn train(&mut self, buffer: &ReplayBuffer) -> Result<Vec<TrainLogRow>> {
        if buffer.is_empty() {
            return Err(Error::Contract("train_offline on an empty buffer".into()));
        }
        let mut sample_rng = ChaCha12Rng::seed_from_u64(self.config.seed.wrapping_add(0x5eed));
        let mut log = Vec::new();
        for step in 0..self.config.steps {
            let batch = buffer.sample_transitions(self.config.batch_size, sample_rng.gen())?;
            let actor_target = self.actor_target.clone();
            let critic_loss =
                self.critic_step(&batch, |s| actor_target.act(s).expect("width"))?;
            let (actor_objective, mean_batch_action) = self.actor_step(&batch)?;
            self.soft_update_targets();
            if !critic_loss.is_finite() || !actor_objective.is_finite() {
                return Err(Error::Numeric {
                    step,
                    detail: format!(
                        "critic loss {critic_loss}, actor objective {actor_objective}"
                    ),
                });
            }
            if step % self.config.log_every.max(1) == 0 || step + 1 == self.config.steps {
                log.push(TrainLogRow { step, critic_loss, actor_objective, mean_batch_action });
            }
        }
        Ok(log)
    }
}

fn blend(target: &mut [(String, &mut Tensor)], source: &[(String, &Tensor)], tau: f64) {
    for ((_, t), (_, s)) in target.iter_mut().zip(source.iter()) {
        for (tv, sv) in t.values_mut().iter_mut().zip(s.values()) {
            *tv = tau * sv + (1.0 - tau) * *tv;
        }
    }
}

/// Trains actor and critic from scratch on the buffer.
pub fn train_offline(buffer: &ReplayBuffer, config: TrainConfig) -> Result<TrainResult> {
    let state_width = buffer
        .state_width()
        .ok_or_else(|| Error::Contract("train_offline on an empty buffer".into()))?;
    let mut trainer = ActorCriticTrainer::new(state_width, config)?;
    let log = trainer.train(buffer)?;
    Ok(TrainResult { actor: trainer.actor, critic: trainer.critic, log })
}

/// Continues training from an existing actor checkpoint.
pub fn finetune(buffer: &ReplayBuffer, actor: PolicyNet, config: TrainConfig) -> Result<TrainResult> {
    let mut trainer = ActorCriticTrainer::from_actor(actor, config)?;
    let log = trainer.train(buffer)?;
    Ok(TrainResult { actor: trainer.actor, critic: trainer.critic, log })
}
