//! Joint-policy rollouts, episodic replay and value-decomposition TD learning.
//!
//! A joint Q-value is the sum of the per-agent Q-values of every slot a learner
//! controls (VDN). Several learners may take part in the same update, e.g. a
//! teammate network and its complementary partner during self-play.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{
    backward_batch, clip_grad_norm, Activation, forward, forward_batch, infer_batch, optimizer_step, NetSpec, OptState,
    ParamStore,
};
use crate::env::{EnvInstance, STAY};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Greedy,
    EpsGreedy(f64),
    Softmax(f64),
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `softmax(q / temperature)`.
pub fn softmax(q: &[f64], temperature: f64) -> Vec<f64> {
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn select_action<R: Rng + ?Sized>(q: &[f64], mode: ActionMode, rng: &mut R) -> Result<usize> {
    if q.is_empty() {
        return Err(Error::InvalidArgument("empty q-value vector".into()));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("q-values"));
    }
    Ok(match mode {
        ActionMode::Greedy => argmax(q),
        ActionMode::EpsGreedy(eps) => {
            if rng.gen::<f64>() < eps {
                rng.gen_range(0..q.len())
            } else {
                argmax(q)
            }
        }
        ActionMode::Softmax(temp) => {
            if temp <= 0.0 {
                return Err(Error::InvalidArgument("softmax temperature must be > 0".into()));
            }
            let p = softmax(q, temp);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = p.len() - 1;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    })
}

/// Linear exploration schedule over the first `fraction` of a step budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsSchedule {
    pub start: f64,
    pub end: f64,
    pub fraction: f64,
}

impl Default for EpsSchedule {
    fn default() -> Self {
        EpsSchedule {
            start: 1.0,
            end: 0.05,
            fraction: 0.5,
        }
    }
}

impl EpsSchedule {
    pub fn value(&self, consumed: usize, budget: usize) -> f64 {
        let horizon = self.fraction * budget as f64;
        if horizon <= 0.0 {
            return self.end;
        }
        let frac = consumed as f64 / horizon;
        if frac >= 1.0 {
            return self.end;
        }
        self.start + (self.end - self.start) * frac
    }
}

/// Learning hyperparameters shared by every value-based learner in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub hidden_dims: Vec<usize>,
    pub head_hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub gamma: f64,
    pub batch_episodes: usize,
    pub buffer_capacity: usize,
    pub target_update_interval: u64,
    pub grad_clip: Option<f64>,
    pub frame_stack: usize,
    pub eps: EpsSchedule,
    /// Temperature of the softmax policy proxy over q-values.
    pub temperature: f64,
    /// Gradient steps per collection round.
    pub updates_per_round: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            hidden_dims: vec![64, 64],
            head_hidden_dims: vec![64],
            activation: Activation::Relu,
            lr: 5e-4,
            gamma: 0.99,
            batch_episodes: 32,
            buffer_capacity: 512,
            target_update_interval: 200,
            grad_clip: Some(10.0),
            frame_stack: 2,
            eps: EpsSchedule::default(),
            temperature: 1.0,
            updates_per_round: 1,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.batch_episodes == 0 || self.buffer_capacity == 0 || self.frame_stack == 0 {
            return bad("batch_episodes, buffer_capacity and frame_stack must be >= 1");
        }
        if self.updates_per_round == 0 {
            return bad("updates_per_round must be >= 1");
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be > 0");
        }
        if !(0.0..=1.0).contains(&self.eps.start) || !(0.0..=1.0).contains(&self.eps.end) {
            return bad("exploration rates must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn td(&self, reward_sign: f64) -> TdConfig {
        TdConfig {
            gamma: self.gamma,
            reward_sign,
            target_update_interval: self.target_update_interval,
            grad_clip: self.grad_clip,
        }
    }
}

/// An environment together with the learner settings used inside it.
#[derive(Clone, Debug)]
pub struct Arena {
    pub env: EnvInstance,
    pub learner: LearnerConfig,
}

impl Arena {
    pub fn new(env: EnvInstance, learner: LearnerConfig) -> Result<Self> {
        learner.validate()?;
        Ok(Arena { env, learner })
    }

    pub fn net_spec(&self) -> NetSpec {
        NetSpec {
            input_dim: self.learner.frame_stack * self.env.obs_dim(),
            hidden_dims: self.learner.hidden_dims.clone(),
            head_hidden_dims: self.learner.head_hidden_dims.clone(),
            output_dim: self.env.n_actions(),
            activation: self.learner.activation,
        }
    }

    pub fn new_qnet<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<QNet> {
        QNet::new(self.net_spec(), self.learner.lr, rng)
    }

    pub fn ego_slots(&self) -> Vec<usize> {
        (0..self.env.n_ego()).collect()
    }

    pub fn teammate_slots(&self) -> Vec<usize> {
        (self.env.n_ego()..self.env.n_agents()).collect()
    }

    pub fn rollout<R: Rng + ?Sized>(&self, policy: &JointPolicy<'_>, rng: &mut R) -> Result<Episode> {
        rollout(&self.env, policy, rng, self.learner.frame_stack)
    }

    pub fn evaluate<R: Rng + ?Sized>(&self, policy: &JointPolicy<'_>, n_episodes: usize, rng: &mut R) -> Result<(f64, f64)> {
        empirical_return(&self.env, policy, n_episodes, rng, self.learner.frame_stack)
    }

    pub fn pair<'a>(&self, ego: Actor<'a>, teammate: Actor<'a>) -> JointPolicy<'a> {
        JointPolicy::pair(self.env.n_agents(), self.env.n_ego(), ego, teammate)
    }
}

/// Borrowed view of a network's online parameters.
#[derive(Clone, Copy, Debug)]
pub struct NetRef<'a> {
    pub spec: &'a NetSpec,
    pub backbone: &'a ParamStore,
    pub head: &'a ParamStore,
}

impl NetRef<'_> {
    pub fn q_values(&self, input: &[f64]) -> Result<Vec<f64>> {
        forward(self.spec, self.backbone, self.head, input)
    }
}

/// A trainable Q-network with target copies and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNet {
    pub spec: NetSpec,
    pub backbone: ParamStore,
    pub head: ParamStore,
    pub target_backbone: ParamStore,
    pub target_head: ParamStore,
    pub opt_backbone: OptState,
    pub opt_head: OptState,
    pub updates: u64,
}

impl QNet {
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, lr: f64, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let backbone = spec.backbone_layout().init(rng);
        let head = spec.head_layout().init(rng);
        Ok(Self::from_params(spec, backbone, head, lr))
    }

    pub fn from_params(spec: NetSpec, backbone: ParamStore, head: ParamStore, lr: f64) -> Self {
        QNet {
            opt_backbone: OptState::new(backbone.len(), lr),
            opt_head: OptState::new(head.len(), lr),
            target_backbone: backbone.clone(),
            target_head: head.clone(),
            spec,
            backbone,
            head,
            updates: 0,
        }
    }

    pub fn view(&self) -> NetRef<'_> {
        NetRef {
            spec: &self.spec,
            backbone: &self.backbone,
            head: &self.head,
        }
    }

    pub fn sync_target(&mut self) {
        self.target_backbone = self.backbone.clone();
        self.target_head = self.head.clone();
    }

    pub fn zero_grads(&self) -> NetGrads {
        NetGrads {
            backbone: ParamStore::zeros(self.backbone.len()),
            head: ParamStore::zeros(self.head.len()),
        }
    }

    /// Clip, take one optimizer step on both stores, and hard-copy the target
    /// every `target_interval` calls.
    pub fn apply_gradients(&mut self, grads: &mut NetGrads, clip: Option<f64>, target_interval: u64) -> Result<()> {
        if let Some(c) = clip {
            clip_grad_norm(&mut [&mut grads.backbone, &mut grads.head], c);
        }
        optimizer_step(&mut self.backbone, &grads.backbone, &mut self.opt_backbone)?;
        optimizer_step(&mut self.head, &grads.head, &mut self.opt_head)?;
        self.updates += 1;
        if target_interval > 0 && self.updates.is_multiple_of(target_interval) {
            self.sync_target();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub backbone: ParamStore,
    pub head: ParamStore,
}

impl NetGrads {
    pub fn add_scaled(&mut self, other: &NetGrads, s: f64) -> Result<()> {
        self.backbone.add_scaled(&other.backbone, s)?;
        self.head.add_scaled(&other.head, s)
    }
}

/// What drives one agent slot during a rollout.
#[derive(Clone, Copy, Debug)]
pub enum Actor<'a> {
    Net { net: NetRef<'a>, mode: ActionMode },
    /// Open-loop action sequence; `stay` once exhausted.
    Scripted(&'a [usize]),
    Fixed(usize),
}

/// One actor per agent slot, ego slots first.
#[derive(Clone, Debug)]
pub struct JointPolicy<'a> {
    pub slots: Vec<Actor<'a>>,
}

impl<'a> JointPolicy<'a> {
    pub fn new(slots: Vec<Actor<'a>>) -> Self {
        JointPolicy { slots }
    }

    /// Ego slots `0..n_ego` driven by `ego`, the rest by `teammate`.
    pub fn pair(n_agents: usize, n_ego: usize, ego: Actor<'a>, teammate: Actor<'a>) -> Self {
        JointPolicy {
            slots: (0..n_agents).map(|i| if i < n_ego { ego } else { teammate }).collect(),
        }
    }

    fn greedy(&self) -> JointPolicy<'a> {
        JointPolicy {
            slots: self
                .slots
                .iter()
                .map(|a| match *a {
                    Actor::Net { net, .. } => Actor::Net {
                        net,
                        mode: ActionMode::Greedy,
                    },
                    other => other,
                })
                .collect(),
        }
    }
}

/// A full episode with frame-stacked per-agent inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    n_agents: usize,
    input_dim: usize,
    /// `(len + 1) x n_agents x input_dim`, row-major.
    inputs: Vec<f64>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub return_undiscounted: f64,
    pub seed: u64,
}

/// Borrowed `(obs, joint_action, reward, next_obs, done)` view.
#[derive(Clone, Copy, Debug)]
pub struct Transition<'a> {
    episode: &'a Episode,
    t: usize,
    pub reward: f64,
    pub done: bool,
}

impl<'a> Transition<'a> {
    pub fn obs(&self, agent: usize) -> &'a [f64] {
        self.episode.input(self.t, agent)
    }

    pub fn next_obs(&self, agent: usize) -> &'a [f64] {
        self.episode.input(self.t + 1, agent)
    }

    pub fn joint_action(&self) -> &'a [usize] {
        &self.episode.actions[self.t]
    }
}

impl Episode {
    /// Assemble an episode from per-step inputs (`len + 1` entries of
    /// per-agent vectors), joint actions, rewards and done flags.
    pub fn from_parts(
        inputs: Vec<Vec<Vec<f64>>>,
        actions: Vec<Vec<usize>>,
        rewards: Vec<f64>,
        dones: Vec<bool>,
        seed: u64,
    ) -> Result<Self> {
        let len = actions.len();
        if inputs.len() != len + 1 || rewards.len() != len || dones.len() != len {
            return Err(Error::InvalidArgument("inconsistent episode part lengths".into()));
        }
        let n_agents = inputs[0].len();
        let input_dim = inputs[0].first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity((len + 1) * n_agents * input_dim);
        for step in &inputs {
            if step.len() != n_agents || step.iter().any(|v| v.len() != input_dim) {
                return Err(Error::InvalidArgument("ragged episode inputs".into()));
            }
            step.iter().for_each(|v| flat.extend_from_slice(v));
        }
        if actions.iter().any(|a| a.len() != n_agents) {
            return Err(Error::InvalidArgument("ragged joint actions".into()));
        }
        Ok(Episode {
            n_agents,
            input_dim,
            inputs: flat,
            return_undiscounted: rewards.iter().sum(),
            actions,
            rewards,
            dones,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input(&self, t: usize, agent: usize) -> &[f64] {
        let off = (t * self.n_agents + agent) * self.input_dim;
        &self.inputs[off..off + self.input_dim]
    }

    pub fn transition(&self, t: usize) -> Transition<'_> {
        Transition {
            episode: self,
            t,
            reward: self.rewards[t],
            done: self.dones[t],
        }
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition<'_>> {
        (0..self.len()).map(move |t| self.transition(t))
    }
}

fn push_stacked(history: &VecDeque<Vec<Vec<f64>>>, k: usize, obs_dim: usize, n_agents: usize, out: &mut Vec<f64>) {
    for agent in 0..n_agents {
        let pad = k - history.len();
        out.extend(std::iter::repeat_n(0.0, pad * obs_dim));
        for frame in history {
            out.extend_from_slice(&frame[agent]);
        }
    }
}

/// Run one episode from reset to termination. All randomness of the episode
/// (spawns, exploration, prey moves) comes from a stream seeded by a value
/// drawn from `rng`, recorded as [`Episode::seed`].
pub fn rollout<R: Rng + ?Sized>(
    env: &EnvInstance,
    policy: &JointPolicy<'_>,
    rng: &mut R,
    frame_stack: usize,
) -> Result<Episode> {
    let seed = rng.next_u64();
    rollout_seeded(env, policy, seed, frame_stack)
}

pub fn rollout_seeded(env: &EnvInstance, policy: &JointPolicy<'_>, seed: u64, frame_stack: usize) -> Result<Episode> {
    let n = env.n_agents();
    if policy.slots.len() != n {
        return Err(Error::DimensionMismatch {
            context: "joint policy slots",
            expected: n,
            got: policy.slots.len(),
        });
    }
    let k = frame_stack.max(1);
    let obs_dim = env.obs_dim();
    let input_dim = k * obs_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, obs) = env.reset(&mut rng);
    let mut history: VecDeque<Vec<Vec<f64>>> = VecDeque::with_capacity(k);
    history.push_back(obs);
    let mut inputs = Vec::with_capacity((env.horizon() + 1) * n * input_dim);
    push_stacked(&history, k, obs_dim, n, &mut inputs);
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut dones = Vec::new();
    loop {
        let t = actions.len();
        let base = t * n * input_dim;
        let mut joint = Vec::with_capacity(n);
        for (slot, actor) in policy.slots.iter().enumerate() {
            let a = match *actor {
                Actor::Net { net, mode } => {
                    let x = &inputs[base + slot * input_dim..base + (slot + 1) * input_dim];
                    select_action(&net.q_values(x)?, mode, &mut rng)?
                }
                Actor::Scripted(plan) => plan.get(t).copied().unwrap_or(STAY),
                Actor::Fixed(a) => a,
            };
            joint.push(a);
        }
        let res = env.step(&mut state, &joint, &mut rng)?;
        if history.len() == k {
            history.pop_front();
        }
        history.push_back(res.next_obs);
        push_stacked(&history, k, obs_dim, n, &mut inputs);
        actions.push(joint);
        rewards.push(res.reward);
        dones.push(res.done);
        if res.done {
            break;
        }
    }
    Ok(Episode {
        n_agents: n,
        input_dim,
        inputs,
        return_undiscounted: rewards.iter().sum(),
        actions,
        rewards,
        dones,
        seed,
    })
}

/// Mean and (population) standard deviation of a sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Greedy evaluation: mean and std of undiscounted returns over `n_episodes`.
pub fn empirical_return<R: Rng + ?Sized>(
    env: &EnvInstance,
    policy: &JointPolicy<'_>,
    n_episodes: usize,
    rng: &mut R,
    frame_stack: usize,
) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be >= 1".into()));
    }
    let greedy = policy.greedy();
    let returns = (0..n_episodes)
        .map(|_| rollout(env, &greedy, rng, frame_stack).map(|e| e.return_undiscounted))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_std(&returns))
}

/// Bounded FIFO of episodes with uniform sampling.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            episodes: VecDeque::with_capacity(capacity.min(1024)),
        }
    }

    pub fn push(&mut self, ep: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Up to `batch` distinct episodes chosen uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Episode> {
        let k = batch.min(self.episodes.len());
        rand::seq::index::sample(rng, self.episodes.len(), k)
            .iter()
            .map(|i| &self.episodes[i])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdConfig {
    pub gamma: f64,
    /// Multiplies the environment reward; `-1` turns the learner into a
    /// return minimiser.
    pub reward_sign: f64,
    pub target_update_interval: u64,
    pub grad_clip: Option<f64>,
}

impl Default for TdConfig {
    fn default() -> Self {
        TdConfig {
            gamma: 0.99,
            reward_sign: 1.0,
            target_update_interval: 200,
            grad_clip: Some(10.0),
        }
    }
}

/// A learner's participation in a TD batch: the network and the agent slots
/// whose Q-values it contributes to the joint sum.
#[derive(Clone, Copy, Debug)]
pub struct TdMember<'a> {
    pub net: &'a QNet,
    pub slots: &'a [usize],
}

struct MemberBatch {
    online: Array2<f64>,
    next: Array2<f64>,
    actions: Vec<usize>,
}

fn gather(member: &TdMember<'_>, batch: &[&Episode]) -> MemberBatch {
    let d = member.net.spec.input_dim;
    let rows: usize = batch.iter().map(|e| e.len()).sum::<usize>() * member.slots.len();
    let mut online = Vec::with_capacity(rows * d);
    let mut next = Vec::with_capacity(rows * d);
    let mut actions = Vec::with_capacity(rows);
    for ep in batch {
        for tr in ep.transitions() {
            for &s in member.slots {
                online.extend_from_slice(tr.obs(s));
                next.extend_from_slice(tr.next_obs(s));
                actions.push(tr.joint_action()[s]);
            }
        }
    }
    MemberBatch {
        online: Array2::from_shape_vec((rows, d), online).expect("rows"),
        next: Array2::from_shape_vec((rows, d), next).expect("rows"),
        actions,
    }
}

fn check_members(members: &[TdMember<'_>], batch: &[&Episode]) -> Result<()> {
    if batch.is_empty() || batch.iter().all(|e| e.is_empty()) {
        return Err(Error::EmptyBatch);
    }
    for m in members {
        for ep in batch {
            if m.slots.iter().any(|&s| s >= ep.n_agents()) {
                return Err(Error::InvalidArgument("slot index beyond episode agents".into()));
            }
            if ep.input_dim() != m.net.spec.input_dim {
                return Err(Error::DimensionMismatch {
                    context: "episode input",
                    expected: m.net.spec.input_dim,
                    got: ep.input_dim(),
                });
            }
        }
    }
    Ok(())
}

/// Joint `sum_i Q_i(o_i, a_i)` per transition of the batch, in batch order.
pub fn joint_q_values(members: &[TdMember<'_>], batch: &[&Episode]) -> Result<Vec<f64>> {
    check_members(members, batch)?;
    let n: usize = batch.iter().map(|e| e.len()).sum();
    let mut joint = vec![0.0; n];
    for m in members {
        let mb = gather(m, batch);
        let q = infer_batch(&m.net.spec, &m.net.backbone, &m.net.head, mb.online.view())?;
        let k = m.slots.len();
        for (row, &a) in mb.actions.iter().enumerate() {
            joint[row / k] += q[[row, a]];
        }
    }
    Ok(joint)
}

/// Mean squared VDN TD error over all transitions in `batch`, with exact
/// gradients for every member (in member order).
pub fn td_loss_grads(members: &[TdMember<'_>], batch: &[&Episode], cfg: &TdConfig) -> Result<(f64, Vec<NetGrads>)> {
    check_members(members, batch)?;
    let n: usize = batch.iter().map(|e| e.len()).sum();
    let mut joint = vec![0.0; n];
    let mut target = vec![0.0; n];
    let mut caches = Vec::with_capacity(members.len());
    for m in members {
        let mb = gather(m, batch);
        let net = m.net;
        let (q, cache) = forward_batch(&net.spec, &net.backbone, &net.head, mb.online)?;
        let q_next = infer_batch(&net.spec, &net.target_backbone, &net.target_head, mb.next.view())?;
        let k = m.slots.len();
        for (row, &a) in mb.actions.iter().enumerate() {
            joint[row / k] += q[[row, a]];
            let best = q_next.row(row).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            target[row / k] += best;
        }
        caches.push((cache, mb.actions, q.ncols()));
    }
    let mut i = 0;
    let mut loss = 0.0;
    let mut delta = vec![0.0; n];
    for ep in batch {
        for tr in ep.transitions() {
            let boot = if tr.done { 0.0 } else { cfg.gamma * target[i] };
            let y = cfg.reward_sign * tr.reward + boot;
            let d = joint[i] - y;
            loss += d * d;
            delta[i] = 2.0 * d / n as f64;
            i += 1;
        }
    }
    loss /= n as f64;
    let mut grads = Vec::with_capacity(members.len());
    for (m, (cache, actions, n_out)) in members.iter().zip(caches) {
        let k = m.slots.len();
        let mut up = Array2::zeros((actions.len(), n_out));
        for (row, &a) in actions.iter().enumerate() {
            up[[row, a]] = delta[row / k];
        }
        let mut g = m.net.zero_grads();
        backward_batch(
            &m.net.spec,
            &m.net.backbone,
            &m.net.head,
            &cache,
            up,
            Some(&mut g.backbone),
            &mut g.head,
        )?;
        grads.push(g);
    }
    Ok((loss, grads))
}

/// One VDN TD step on all `nets`: loss, gradients, optimizer step and target
/// bookkeeping. `slots[i]` lists the agent slots controlled by `nets[i]`.
pub fn vdn_td_update(nets: &mut [&mut QNet], slots: &[Vec<usize>], batch: &[&Episode], cfg: &TdConfig) -> Result<f64> {
    if nets.len() != slots.len() {
        return Err(Error::InvalidArgument("one slot list per network".into()));
    }
    let (loss, grads) = {
        let members: Vec<TdMember<'_>> = nets
            .iter()
            .zip(slots)
            .map(|(n, s)| TdMember { net: n, slots: s })
            .collect();
        td_loss_grads(&members, batch, cfg)?
    };
    for (net, mut g) in nets.iter_mut().zip(grads) {
        net.apply_gradients(&mut g, cfg.grad_clip, cfg.target_update_interval)?;
    }
    Ok(loss)
}

/// Per-row greedy action of a batch of inputs.
pub fn greedy_actions(net: NetRef<'_>, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
    let q = infer_batch(net.spec, net.backbone, net.head, inputs)?;
    Ok(q.rows().into_iter().map(|r| argmax(r.as_slice().expect("contiguous"))).collect())
}
