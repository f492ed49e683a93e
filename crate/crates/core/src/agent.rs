//! DDPG over the joint input `[z; b]`: state latent plus behavior embedding.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::nn::{blend, flatten, Activation, Adam, AdamSettings, Checkpoint, Mlp, Parameters};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSettings {
    pub hidden: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Transitions collected with uniform random actions before learning starts.
    pub warmup: usize,
    pub noise_start: f64,
    pub noise_end: f64,
    /// Environment steps between updates.
    pub update_every: usize,
    /// Weight of the mean squared policy output added to the actor loss.
    pub action_l2: f64,
    /// Probability of replacing an exploratory action by a uniform one.
    pub random_eps: f64,
}

impl Default for AgentSettings {
    fn default() -> Self {
        AgentSettings {
            hidden: 64,
            gamma: 0.98,
            tau: 0.005,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            warmup: 1000,
            noise_start: 0.2,
            noise_end: 0.05,
            update_every: 1,
            action_l2: 0.0,
            random_eps: 0.0,
        }
    }
}

impl AgentSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1]".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config("tau must lie in (0, 1]".into()));
        }
        if self.hidden == 0 || self.batch_size == 0 || self.buffer_capacity == 0 || self.update_every == 0 {
            return Err(Error::Config("agent sizes must be positive".into()));
        }
        if self.noise_start < 0.0 || self.noise_end < 0.0 || !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::Config("noise scales must be non-negative and learning rates positive".into()));
        }
        if self.action_l2 < 0.0 || !(0.0..=1.0).contains(&self.random_eps) {
            return Err(Error::Config("action_l2 must be non-negative and random_eps in [0, 1]".into()));
        }
        Ok(())
    }

    /// Linear decay from `noise_start` to `noise_end` over training.
    pub fn noise_scale(&self, progress: f64) -> f64 {
        let t = progress.clamp(0.0, 1.0);
        self.noise_start + (self.noise_end - self.noise_start) * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub z: Vec<f64>,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub z_next: Vec<f64>,
    pub terminal: bool,
}

/// Ring store with FIFO eviction. Rows are kept flat:
/// `z | b | a | r | z_next | terminal`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    widths: (usize, usize, usize),
    data: Vec<f64>,
    len: usize,
    cursor: usize,
}

/// Column-stacked minibatch.
#[derive(Clone, Debug)]
pub struct Minibatch {
    /// `[z; b]` rows.
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    /// `[z_next; b]` rows.
    pub next_states: Array2<f64>,
    pub terminal: Vec<bool>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(items: &[Transition]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Precondition("empty minibatch".into()))?;
        let (zw, bw, aw) = (first.z.len(), first.b.len(), first.a.len());
        let n = items.len();
        let mut states = Array2::zeros((n, zw + bw));
        let mut next_states = Array2::zeros((n, zw + bw));
        let mut actions = Array2::zeros((n, aw));
        for (i, t) in items.iter().enumerate() {
            ensure_shape(t.z.len() == zw && t.b.len() == bw && t.a.len() == aw && t.z_next.len() == zw, || {
                "transition widths differ within a minibatch".into()
            })?;
            for (j, &v) in t.z.iter().chain(&t.b).enumerate() {
                states[[i, j]] = v;
            }
            for (j, &v) in t.z_next.iter().chain(&t.b).enumerate() {
                next_states[[i, j]] = v;
            }
            for (j, &v) in t.a.iter().enumerate() {
                actions[[i, j]] = v;
            }
        }
        Ok(Minibatch {
            states,
            actions,
            rewards: items.iter().map(|t| t.r).collect(),
            next_states,
            terminal: items.iter().map(|t| t.terminal).collect(),
        })
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize, z_width: usize, b_width: usize, a_width: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            widths: (z_width, b_width, a_width),
            data: Vec::new(),
            len: 0,
            cursor: 0,
        }
    }

    fn stride(&self) -> usize {
        let (z, b, a) = self.widths;
        2 * z + b + a + 2
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        let (zw, bw, aw) = self.widths;
        ensure_shape(t.z.len() == zw && t.b.len() == bw && t.a.len() == aw && t.z_next.len() == zw, || {
            format!("transition widths do not match buffer ({zw}, {bw}, {aw})")
        })?;
        let stride = self.stride();
        let row = t
            .z
            .iter()
            .chain(&t.b)
            .chain(&t.a)
            .copied()
            .chain([t.r])
            .chain(t.z_next.iter().copied())
            .chain([if t.terminal { 1.0 } else { 0.0 }]);
        if self.len < self.capacity {
            self.data.extend(row);
            self.len += 1;
        } else {
            let at = self.cursor * stride;
            for (slot, v) in self.data[at..at + stride].iter_mut().zip(row) {
                *slot = v;
            }
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    fn row(&self, slot: usize) -> &[f64] {
        let stride = self.stride();
        &self.data[slot * stride..(slot + 1) * stride]
    }

    fn unpack(&self, slot: usize) -> Transition {
        let (zw, bw, aw) = self.widths;
        let r = self.row(slot);
        let mut at = 0;
        let mut take = |n: usize| {
            let s = r[at..at + n].to_vec();
            at += n;
            s
        };
        let z = take(zw);
        let b = take(bw);
        let a = take(aw);
        let rew = take(1)[0];
        let z_next = take(zw);
        let terminal = take(1)[0] != 0.0;
        Transition {
            z,
            b,
            a,
            r: rew,
            z_next,
            terminal,
        }
    }

    /// Storage slot of the `i`-th oldest stored transition.
    fn slot(&self, i: usize) -> usize {
        if self.len < self.capacity {
            i
        } else {
            (self.cursor + i) % self.capacity
        }
    }

    /// The `i`-th oldest stored transition.
    pub fn get(&self, i: usize) -> Option<Transition> {
        (i < self.len).then(|| self.unpack(self.slot(i)))
    }

    pub fn iter(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len).map(|i| self.unpack(self.slot(i)))
    }

    /// Uniform indices with replacement, in `0..len`.
    pub fn sample_indices(&self, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::Precondition("sampling from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.len)).collect())
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Minibatch> {
        let idx = self.sample_indices(n, rng)?;
        let (zw, bw, aw) = self.widths;
        let mut states = Array2::zeros((n, zw + bw));
        let mut next_states = Array2::zeros((n, zw + bw));
        let mut actions = Array2::zeros((n, aw));
        let mut rewards = Vec::with_capacity(n);
        let mut terminal = Vec::with_capacity(n);
        for (i, &k) in idx.iter().enumerate() {
            let r = self.row(self.slot(k));
            let (z, rest) = r.split_at(zw);
            let (b, rest) = rest.split_at(bw);
            let (a, rest) = rest.split_at(aw);
            let (rew, rest) = rest.split_at(1);
            let (z_next, term) = rest.split_at(zw);
            let mut row = states.row_mut(i);
            for (dst, &v) in row.iter_mut().zip(z.iter().chain(b)) {
                *dst = v;
            }
            let mut row = next_states.row_mut(i);
            for (dst, &v) in row.iter_mut().zip(z_next.iter().chain(b)) {
                *dst = v;
            }
            for (dst, &v) in actions.row_mut(i).iter_mut().zip(a) {
                *dst = v;
            }
            rewards.push(rew[0]);
            terminal.push(term[0] != 0.0);
        }
        Ok(Minibatch {
            states,
            actions,
            rewards,
            next_states,
            terminal,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    gamma: f64,
    action_l2: f64,
    state_width: usize,
    action_width: usize,
}

impl ActorCritic {
    pub fn new(
        z_width: usize,
        b_width: usize,
        action_width: usize,
        settings: &AgentSettings,
        rng: &mut Rng,
    ) -> Result<Self> {
        settings.validate()?;
        let state_width = z_width + b_width;
        let actor = Mlp::new(&[state_width, settings.hidden, action_width], Activation::Relu, Activation::Tanh, rng);
        let critic = Mlp::new(
            &[state_width + action_width, settings.hidden, 1],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        Ok(ActorCritic {
            actor_opt: Adam::for_model(AdamSettings::with_lr(settings.actor_lr), &actor)?,
            critic_opt: Adam::for_model(AdamSettings::with_lr(settings.critic_lr), &critic)?,
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            gamma: settings.gamma,
            action_l2: settings.action_l2,
            state_width,
            action_width,
        })
    }

    pub fn state_width(&self) -> usize {
        self.state_width
    }

    pub fn action_width(&self) -> usize {
        self.action_width
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
    }

    fn joint(&self, z: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        ensure_shape(z.len() + b.len() == self.state_width, || {
            format!("[z; b] width {} vs {}", z.len() + b.len(), self.state_width)
        })?;
        Ok(z.iter().chain(b).copied().collect())
    }

    /// Deterministic policy output `pi([z; b])`.
    pub fn policy(&self, z: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        self.actor.forward(&self.joint(z, b)?)
    }

    /// `clamp(pi([z; b]) + noise_scale * N(0, 1), -1, 1)`.
    pub fn act(&self, z: &[f64], b: &[f64], noise_scale: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut a = self.policy(z, b)?;
        if noise_scale > 0.0 {
            for v in &mut a {
                let eps: f64 = StandardNormal.sample(rng);
                *v += noise_scale * eps;
            }
        }
        Ok(a.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    pub fn q_value(&self, z: &[f64], b: &[f64], a: &[f64]) -> Result<f64> {
        let mut x = self.joint(z, b)?;
        ensure_shape(a.len() == self.action_width, || "action width".into())?;
        x.extend_from_slice(a);
        Ok(self.critic.forward(&x)?[0])
    }

    fn check_batch(&self, batch: &Minibatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty minibatch".into()));
        }
        ensure_shape(
            batch.states.ncols() == self.state_width
                && batch.next_states.ncols() == self.state_width
                && batch.actions.ncols() == self.action_width,
            || "minibatch widths do not match the agent".into(),
        )
    }

    /// `y = r + gamma * (1 - terminal) * Q'([z'; b], pi'([z'; b]))`.
    pub fn td_targets(&self, batch: &Minibatch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let next_a = self.actor_target.forward_batch(batch.next_states.view())?;
        let q_next = self
            .critic_target
            .forward_batch(concatenate(Axis(1), &[batch.next_states.view(), next_a.view()]).unwrap().view())?;
        Ok(batch
            .rewards
            .iter()
            .zip(&batch.terminal)
            .enumerate()
            .map(|(i, (&r, &term))| if term { r } else { r + self.gamma * q_next[[i, 0]] })
            .collect())
    }

    /// Mean squared TD error and its gradient w.r.t. the online critic.
    pub fn critic_loss_and_grad(&self, batch: &Minibatch) -> Result<(f64, Mlp)> {
        let y = self.td_targets(batch)?;
        let n = batch.len() as f64;
        let input = concatenate(Axis(1), &[batch.states.view(), batch.actions.view()]).unwrap();
        let tape = self.critic.forward_taped(input)?;
        let q = tape.output();
        let mut loss = 0.0;
        let mut grad_out = Array2::zeros((batch.len(), 1));
        for (i, &yi) in y.iter().enumerate() {
            let d = q[[i, 0]] - yi;
            loss += d * d / n;
            grad_out[[i, 0]] = 2.0 * d / n;
        }
        let mut grads = self.critic.zeros_like();
        self.critic.backward(&tape, grad_out, Some(&mut grads), false)?;
        Ok((loss, grads))
    }

    pub fn critic_update(&mut self, batch: &Minibatch) -> Result<f64> {
        let (loss, grads) = self.critic_loss_and_grad(batch)?;
        self.critic_opt.update(&mut self.critic, &grads)?;
        Ok(loss)
    }

    /// Mean `Q([z; b], pi([z; b]))` under the online networks.
    pub fn mean_policy_q(&self, batch: &Minibatch) -> Result<f64> {
        self.check_batch(batch)?;
        let a = self.actor.forward_batch(batch.states.view())?;
        let q = self
            .critic
            .forward_batch(concatenate(Axis(1), &[batch.states.view(), a.view()]).unwrap().view())?;
        Ok(q.mean().unwrap_or(0.0))
    }

    /// Gradient of `-mean Q(s, pi(s))` w.r.t. the actor, backpropagated through
    /// the frozen critic in one pass.
    pub fn actor_loss_and_grad(&self, batch: &Minibatch) -> Result<(f64, Mlp)> {
        self.actor_objective(batch, 0.0)
    }

    /// `-mean Q + l2 * mean(pi^2)` and its gradient in the actor parameters.
    pub fn actor_objective(&self, batch: &Minibatch, l2: f64) -> Result<(f64, Mlp)> {
        self.check_batch(batch)?;
        let n = batch.len();
        let actor_tape = self.actor.forward_taped(batch.states.clone())?;
        let input = concatenate(Axis(1), &[batch.states.view(), actor_tape.output().view()]).unwrap();
        let critic_tape = self.critic.forward_taped(input)?;
        let pi = actor_tape.output();
        let scale = l2 / (n * self.action_width) as f64;
        let loss = -critic_tape.output().mean().unwrap() + scale * pi.iter().map(|a| a * a).sum::<f64>();
        let grad_q = Array2::from_elem((n, 1), -1.0 / n as f64);
        let d_input = self
            .critic
            .backward(&critic_tape, grad_q, None, true)?
            .expect("input gradient requested");
        let mut d_action = d_input.slice(s![.., self.state_width..]).to_owned();
        if l2 > 0.0 {
            d_action.zip_mut_with(pi, |d, a| *d += 2.0 * scale * a);
        }
        let mut grads = self.actor.zeros_like();
        self.actor.backward(&actor_tape, d_action, Some(&mut grads), false)?;
        Ok((loss, grads))
    }

    /// Same gradient as [`ActorCritic::actor_loss_and_grad`], assembled per
    /// sample as `-(1/n) sum_i J_theta pi(s_i)^T grad_a Q(s_i, a)|_{a = pi(s_i)}`
    /// with the policy Jacobian built one output at a time.
    pub fn actor_grad_chain_rule(&self, batch: &Minibatch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let n = batch.len() as f64;
        let mut total = vec![0.0; flatten(&self.actor).len()];
        for i in 0..batch.len() {
            let s_i = batch.states.slice(s![i..i + 1, ..]).to_owned();
            let a_i = self.actor.forward_batch(s_i.view())?;
            let input = concatenate(Axis(1), &[s_i.view(), a_i.view()]).unwrap();
            let critic_tape = self.critic.forward_taped(input)?;
            let d_input = self
                .critic
                .backward(&critic_tape, Array2::ones((1, 1)), None, true)?
                .expect("input gradient requested");
            let dq_da: Vec<f64> = d_input.slice(s![0, self.state_width..]).to_vec();
            let actor_tape = self.actor.forward_taped(s_i)?;
            for (k, &g) in dq_da.iter().enumerate() {
                let mut unit = Array2::zeros((1, self.action_width));
                unit[[0, k]] = 1.0;
                let mut column = self.actor.zeros_like();
                self.actor.backward(&actor_tape, unit, Some(&mut column), false)?;
                for (t, j) in total.iter_mut().zip(flatten(&column)) {
                    *t -= g * j / n;
                }
            }
        }
        Ok(total)
    }

    /// One Adam step on `-mean Q + action_l2 * mean(pi^2)`; returns the
    /// gradient norm.
    pub fn actor_update(&mut self, batch: &Minibatch) -> Result<f64> {
        let (_, grads) = self.actor_objective(batch, self.action_l2)?;
        let norm = flatten(&grads).iter().map(|g| g * g).sum::<f64>().sqrt();
        self.actor_opt.update(&mut self.actor, &grads)?;
        Ok(norm)
    }

    /// `target <- tau * online + (1 - tau) * target` for both networks.
    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Precondition(format!("soft update rate {tau} outside (0, 1]")));
        }
        blend(&mut self.actor_target, &self.actor, tau);
        blend(&mut self.critic_target, &self.critic, tau);
        Ok(())
    }

    pub fn store(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.store_params(&format!("{prefix}actor."), &self.actor);
        ckpt.store_params(&format!("{prefix}critic."), &self.critic);
        ckpt.store_params(&format!("{prefix}actor_target."), &self.actor_target);
        ckpt.store_params(&format!("{prefix}critic_target."), &self.critic_target);
        self.actor_opt.store(ckpt, &format!("{prefix}actor_opt."));
        self.critic_opt.store(ckpt, &format!("{prefix}critic_opt."));
    }

    pub fn load(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        ckpt.load_params(&format!("{prefix}actor."), &mut self.actor)?;
        ckpt.load_params(&format!("{prefix}critic."), &mut self.critic)?;
        ckpt.load_params(&format!("{prefix}actor_target."), &mut self.actor_target)?;
        ckpt.load_params(&format!("{prefix}critic_target."), &mut self.critic_target)?;
        self.actor_opt = Adam::load(ckpt, &format!("{prefix}actor_opt."))?;
        self.critic_opt = Adam::load(ckpt, &format!("{prefix}critic_opt."))?;
        Ok(())
    }
}

/// Sum of every parameter, a cheap fingerprint for purity checks.
pub fn parameter_fingerprint<P: Parameters>(p: &P) -> u64 {
    use std::hash::{DefaultHasher, Hasher};
    let mut h = DefaultHasher::new();
    for v in flatten(p) {
        h.write_u64(v.to_bits());
    }
    h.finish()
}
