//! DQN insider trained inside the learned surrogate and deployed in the
//! scripted environment.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::argmax;
use crate::env::{attacker_reward, AttackerObservation, Declaration, Personality, RewardConfig};
use crate::error::{Error, Result};
use crate::nn::layers::prefixed;
use crate::nn::{Activation, Adam, AdamConfig, Checkpoint, Component, Float, LinearSchedule, Mlp, Parameterized, Tensor, WeightDecayMode};
use crate::policies::{render_message, InsiderBackend, MessageTemplate};
use crate::rng::{stream_rng, SimRng};
use crate::world_model::{Surrogate, SurrogateQuery};

/// `4·n_benign + 2`: positions, one-hot personalities, own last declaration, t/T.
pub fn state_dim(n_benign: usize) -> usize {
    4 * n_benign + 2
}

pub fn encode_state(benign: &[i32], personalities: &[Personality], previous: i32, round: u32, max_position: i32, max_rounds: u32) -> Vec<f32> {
    let l = max_position as f32;
    let mut s = Vec::with_capacity(state_dim(benign.len()));
    s.extend(benign.iter().map(|&p| p as f32 / l));
    for p in personalities {
        let mut one_hot = [0.0f32; 3];
        if p.is_benign() {
            one_hot[p.id()] = 1.0;
        }
        s.extend(one_hot);
    }
    s.push(previous as f32 / l);
    s.push(round as f32 / max_rounds as f32);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub buffer_size: usize,
    pub learning_starts: u64,
    pub target_update_every: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub n_parallel_envs: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub exploration_fraction: f64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub divergence_threshold: f64,
    pub reward: RewardConfig,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            gamma: 0.99,
            learning_rate: 1e-5,
            weight_decay: 0.0,
            buffer_size: 100_000,
            learning_starts: 10_000,
            target_update_every: 1000,
            batch_size: 128,
            total_steps: 5_000_000,
            n_parallel_envs: 8,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            exploration_fraction: 0.5,
            eval_every: 10_000,
            eval_episodes: 50,
            divergence_threshold: 1e4,
            reward: RewardConfig::default(),
        }
    }
}

impl DqnConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            errors.push(format!("{prefix}.hidden must list positive layer sizes"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            errors.push(format!("{prefix}.gamma must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            errors.push(format!("{prefix}.learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            errors.push(format!("{prefix}.weight_decay must be nonnegative"));
        }
        for (name, v) in [
            ("buffer_size", self.buffer_size),
            ("batch_size", self.batch_size),
            ("n_parallel_envs", self.n_parallel_envs),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                errors.push(format!("{prefix}.{name} must be positive"));
            }
        }
        for (name, v) in [
            ("target_update_every", self.target_update_every),
            ("total_steps", self.total_steps),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                errors.push(format!("{prefix}.{name} must be positive"));
            }
        }
        if self.learning_starts >= self.total_steps {
            errors.push(format!("{prefix}.learning_starts must be below total_steps"));
        }
        if self.buffer_size < self.batch_size {
            errors.push(format!("{prefix}.buffer_size must be at least batch_size"));
        }
        if (self.learning_starts as usize) < self.batch_size {
            errors.push(format!("{prefix}.learning_starts must be at least batch_size"));
        }
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                errors.push(format!("{prefix}.{name} must lie in [0, 1]"));
            }
        }
        if !(self.exploration_fraction > 0.0 && self.exploration_fraction <= 1.0) {
            errors.push(format!("{prefix}.exploration_fraction must lie in (0, 1]"));
        }
        if !(self.divergence_threshold > 0.0) {
            errors.push(format!("{prefix}.divergence_threshold must be positive"));
        }
    }

    pub fn epsilon_schedule(&self) -> Result<LinearSchedule> {
        LinearSchedule::new(self.epsilon_start, self.epsilon_end, self.exploration_fraction, self.total_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QNetShape {
    pub n_benign: usize,
    pub max_position: i32,
    pub max_rounds: u32,
}

impl QNetShape {
    pub fn state_dim(&self) -> usize {
        state_dim(self.n_benign)
    }

    pub fn n_actions(&self) -> usize {
        self.max_position as usize + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNet<T: Float = f32> {
    pub shape: QNetShape,
    pub mlp: Mlp<T>,
}

impl<T: Float> QNet<T> {
    pub fn new<R: Rng + ?Sized>(shape: QNetShape, hidden: &[usize], rng: &mut R) -> Self {
        let mut dims = vec![shape.state_dim()];
        dims.extend_from_slice(hidden);
        dims.push(shape.n_actions());
        Self {
            shape,
            mlp: Mlp::new(&dims, Activation::Relu, Activation::Identity, 0.0, rng),
        }
    }

    /// `[batch, n_actions]` Q-values.
    pub fn q_values(&self, states: &[T], batch: usize) -> Result<Vec<T>> {
        self.mlp.infer(states, batch)
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.mlp.layers[..self.mlp.layers.len() - 1].iter().map(|l| l.out_dim()).collect()
    }
}

impl<T: Float> Parameterized<T> for QNet<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        prefixed("q", self.mlp.named_params()).collect()
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        prefixed("q", self.mlp.named_params_mut()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QNetHyper {
    shape: QNetShape,
    hidden: Vec<usize>,
    config: DqnConfig,
}

impl QNet<f32> {
    pub fn to_checkpoint(&self, config: &DqnConfig) -> Result<Checkpoint> {
        Checkpoint::capture(
            Component::Qnet,
            &QNetHyper {
                shape: self.shape,
                hidden: self.hidden(),
                config: config.clone(),
            },
            self,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, DqnConfig)> {
        let hyper: QNetHyper = ck.hyperparameters(Component::Qnet)?;
        let mut q = QNet::new(hyper.shape, &hyper.hidden, &mut stream_rng(0, 0));
        ck.restore_into(Component::Qnet, &mut q)?;
        Ok((q, hyper.config))
    }
}

/// Uniform with probability `epsilon`, otherwise the greedy action (ties go
/// to the lowest index).
pub fn act_epsilon_greedy<R: Rng + ?Sized>(q_values: &[f32], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q_values.len())
    } else {
        argmax(q_values)
    }
}

/// Fixed-capacity ring buffer of transitions; the oldest entry is overwritten
/// once full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    states: Vec<f32>,
    next_states: Vec<f32>,
    actions: Vec<usize>,
    rewards: Vec<f32>,
    dones: Vec<f32>,
    head: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Vec<f32>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f32>,
    pub next_states: Vec<f32>,
    pub dones: Vec<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            states: vec![0.0; capacity * dim],
            next_states: vec![0.0; capacity * dim],
            actions: vec![0; capacity],
            rewards: vec![0.0; capacity],
            dones: vec![0.0; capacity],
            head: 0,
            len: 0,
        }
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

    pub fn push(&mut self, state: &[f32], action: usize, reward: f64, next_state: &[f32], done: bool) {
        let (i, d) = (self.head, self.dim);
        self.states[i * d..(i + 1) * d].copy_from_slice(state);
        self.next_states[i * d..(i + 1) * d].copy_from_slice(next_state);
        self.actions[i] = action;
        self.rewards[i] = reward as f32;
        self.dones[i] = if done { 1.0 } else { 0.0 };
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// Slot indices of a uniform draw without replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch > self.len {
            return Err(Error::InvalidInput(format!("cannot sample {batch} from {} transitions", self.len)));
        }
        Ok(sample(rng, self.len, batch).into_vec())
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let d = self.dim;
        let mut b = Batch {
            states: Vec::with_capacity(idx.len() * d),
            actions: Vec::with_capacity(idx.len()),
            rewards: Vec::with_capacity(idx.len()),
            next_states: Vec::with_capacity(idx.len() * d),
            dones: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            b.states.extend_from_slice(&self.states[i * d..(i + 1) * d]);
            b.next_states.extend_from_slice(&self.next_states[i * d..(i + 1) * d]);
            b.actions.push(self.actions[i]);
            b.rewards.push(self.rewards[i]);
            b.dones.push(self.dones[i]);
        }
        b
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch> {
        Ok(self.gather(&self.sample_indices(batch, rng)?))
    }
}

/// `y = r + γ·(1 − done)·max_a' Q_target(s', a')`.
pub fn td_targets(target: &QNet<f32>, batch: &Batch, gamma: f64) -> Result<Vec<f32>> {
    let n = batch.len();
    let a = target.shape.n_actions();
    let next_q = target.q_values(&batch.next_states, n)?;
    Ok((0..n)
        .map(|i| {
            let best = next_q[i * a..(i + 1) * a].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            batch.rewards[i] + gamma as f32 * (1.0 - batch.dones[i]) * best
        })
        .collect())
}

/// One gradient step of `(Q(s,a) − y)²` on the online network. The target
/// network is only read.
pub fn td_update(q: &mut QNet<f32>, target: &QNet<f32>, batch: &Batch, gamma: f64, opt: &mut Adam<f32>, divergence_threshold: f64) -> Result<f64> {
    let n = batch.len();
    let a = q.shape.n_actions();
    let y = td_targets(target, batch, gamma)?;
    let (out, cache) = q.mlp.forward::<SimRng>(&batch.states, n, None)?;
    if let Some(v) = out.iter().find(|v| !v.is_finite() || v.abs() as f64 > divergence_threshold) {
        return Err(Error::Training(format!("Q-value {v} exceeds the divergence threshold {divergence_threshold}")));
    }
    let mut d_out = vec![0.0f32; n * a];
    let mut loss = 0.0f64;
    for i in 0..n {
        let e = out[i * a + batch.actions[i]] - y[i];
        loss += (e * e) as f64;
        d_out[i * a + batch.actions[i]] = 2.0 * e / n as f32;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::Training("non-finite TD loss".into()));
    }
    let mut grad = q.zeroed();
    q.mlp.backward(&cache, &d_out, &mut grad.mlp);
    opt.update(q, &grad)?;
    Ok(loss)
}

/// One rollout in the learned dynamics. Benign personalities are drawn
/// i.i.d. and start positions uniformly, as in the scripted environment.
#[derive(Debug, Clone)]
pub struct SurrogateEnv {
    pub benign: Vec<i32>,
    pub personalities: Vec<Personality>,
    pub previous: i32,
    pub round: u32,
    pub max_rounds: u32,
    pub max_position: i32,
    pub reward: RewardConfig,
    pub rng: SimRng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateStep {
    pub reward: f64,
    pub done: bool,
    pub consensus: bool,
}

impl SurrogateEnv {
    pub fn new(shape: QNetShape, reward: RewardConfig, rng: SimRng) -> Self {
        let mut env = Self {
            benign: vec![0; shape.n_benign],
            personalities: vec![Personality::Neutral; shape.n_benign],
            previous: 0,
            round: 0,
            max_rounds: shape.max_rounds,
            max_position: shape.max_position,
            reward,
            rng,
        };
        env.reset();
        env
    }

    pub fn reset(&mut self) {
        let l = self.max_position;
        loop {
            for p in &mut self.benign {
                *p = self.rng.gen_range(0..=l);
            }
            if self.benign.iter().any(|&p| p != self.benign[0]) {
                break;
            }
        }
        for p in &mut self.personalities {
            *p = Personality::BENIGN[self.rng.gen_range(0..3)];
        }
        self.previous = self.rng.gen_range(0..=l);
        self.round = 0;
    }

    pub fn state(&self) -> Vec<f32> {
        encode_state(&self.benign, &self.personalities, self.previous, self.round, self.max_position, self.max_rounds)
    }

    pub fn query(&self, action: i32) -> SurrogateQuery<'_> {
        SurrogateQuery {
            benign: &self.benign,
            personalities: &self.personalities,
            attacker_position: action,
        }
    }

    /// Applies a precomputed model prediction for `action`.
    pub fn apply(&mut self, surrogate: &Surrogate, action: i32, raw: &[f64]) -> SurrogateStep {
        self.benign = surrogate.finish(raw, Some(&mut self.rng));
        self.previous = action;
        self.round += 1;
        let lo = *self.benign.iter().min().unwrap();
        let hi = *self.benign.iter().max().unwrap();
        let delta = (hi - lo) as f64;
        let consensus = delta == 0.0;
        SurrogateStep {
            reward: attacker_reward(delta, consensus, &self.reward),
            done: consensus || self.round >= self.max_rounds,
            consensus,
        }
    }

    pub fn step(&mut self, surrogate: &Surrogate, action: i32) -> Result<SurrogateStep> {
        let raw = surrogate.predict_many(&[self.query(action)])?;
        Ok(self.apply(surrogate, action, &raw[0]))
    }
}

/// Batched action choice for several states.
fn choose_actions(q: &QNet<f32>, states: &[Vec<f32>], epsilon: f64, rngs: &mut [&mut SimRng]) -> Result<Vec<usize>> {
    let a = q.shape.n_actions();
    let flat: Vec<f32> = states.concat();
    let qv = q.q_values(&flat, states.len())?;
    Ok(rngs
        .iter_mut()
        .enumerate()
        .map(|(i, r)| act_epsilon_greedy(&qv[i * a..(i + 1) * a], epsilon, *r))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateEval {
    pub mean_return: f64,
    pub consensus_rate: f64,
    pub episodes: usize,
}

/// Runs `episodes` surrogate rollouts under `policy` (given as a function of
/// the Q-values and an rng) with start states drawn from `seed`.
pub fn evaluate_in_surrogate<F>(q: &QNet<f32>, surrogate: &Surrogate, reward: RewardConfig, episodes: usize, seed: u64, mut policy: F) -> Result<SurrogateEval>
where
    F: FnMut(&[f32], &mut SimRng) -> usize,
{
    let mut total = 0.0;
    let mut consensus = 0usize;
    for ep in 0..episodes {
        let mut env = SurrogateEnv::new(q.shape, reward, stream_rng(seed, ep as u64));
        let mut policy_rng = stream_rng(seed, 1_000_000 + ep as u64);
        loop {
            let qv = q.q_values(&env.state(), 1)?;
            let action = policy(&qv, &mut policy_rng) as i32;
            let s = env.step(surrogate, action)?;
            total += s.reward;
            if s.done {
                consensus += usize::from(s.consensus);
                break;
            }
        }
    }
    Ok(SurrogateEval {
        mean_return: total / episodes as f64,
        consensus_rate: consensus as f64 / episodes as f64,
        episodes,
    })
}

pub fn greedy(q_values: &[f32], _rng: &mut SimRng) -> usize {
    argmax(q_values)
}

pub fn uniform_random(q_values: &[f32], rng: &mut SimRng) -> usize {
    rng.gen_range(0..q_values.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub epsilon: f64,
    pub mean_return: f64,
    pub surrogate_cr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnReport {
    pub curve: Vec<CurvePoint>,
    pub best_step: u64,
    pub best_surrogate_cr: f64,
    pub best_mean_return: f64,
    pub updates: u64,
    pub target_syncs: u64,
    pub episodes: u64,
}

impl DqnReport {
    /// `step,epsilon,mean_return,surrogate_cr`
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,epsilon,mean_return,surrogate_cr\n");
        for p in &self.curve {
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", p.step, p.epsilon, p.mean_return, p.surrogate_cr));
        }
        s
    }
}

/// Seed stream reserved for periodic greedy evaluation, so every checkpoint
/// is scored on the same start states.
pub const EVAL_STREAM: u64 = 0xe7a1;

/// Vanilla DQN in the surrogate. Returns the parameters with the lowest
/// greedy surrogate consensus rate seen at an evaluation point (ties go to
/// the higher mean return).
pub fn train_attacker(surrogate: &Surrogate, n_benign: usize, max_rounds: u32, cfg: &DqnConfig, seed: u64) -> Result<(QNet<f32>, DqnReport)> {
    let mut errors = Vec::new();
    cfg.validate("dqn", &mut errors);
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let shape = QNetShape {
        n_benign,
        max_position: surrogate.max_position(),
        max_rounds,
    };
    let mut init_rng = stream_rng(seed, 0);
    let mut q = QNet::<f32>::new(shape, &cfg.hidden, &mut init_rng);
    let mut target = q.clone();
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            decay_mode: WeightDecayMode::Coupled,
            ..Default::default()
        },
        &q,
    );
    let eps = cfg.epsilon_schedule()?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_size, shape.state_dim());
    let mut sample_rng = stream_rng(seed, 1);
    let mut envs: Vec<SurrogateEnv> = (0..cfg.n_parallel_envs)
        .map(|i| SurrogateEnv::new(shape, cfg.reward, stream_rng(seed, 100 + i as u64)))
        .collect();
    let mut act_rngs: Vec<SimRng> = (0..cfg.n_parallel_envs).map(|i| stream_rng(seed, 200 + i as u64)).collect();

    let eval_seed = seed ^ EVAL_STREAM;
    let mut report = DqnReport {
        curve: Vec::new(),
        best_step: 0,
        best_surrogate_cr: f64::INFINITY,
        best_mean_return: f64::NEG_INFINITY,
        updates: 0,
        target_syncs: 0,
        episodes: 0,
    };
    let mut best = q.clone();
    let mut step = 0u64;
    let mut next_eval = cfg.eval_every;
    let record = |q: &QNet<f32>, step: u64, best: &mut QNet<f32>, report: &mut DqnReport| -> Result<()> {
        let e = evaluate_in_surrogate(q, surrogate, cfg.reward, cfg.eval_episodes, eval_seed, greedy)?;
        report.curve.push(CurvePoint {
            step,
            epsilon: eps.value(step),
            mean_return: e.mean_return,
            surrogate_cr: e.consensus_rate,
        });
        let better = e.consensus_rate < report.best_surrogate_cr
            || (e.consensus_rate == report.best_surrogate_cr && e.mean_return > report.best_mean_return);
        if better {
            *best = q.clone();
            report.best_step = step;
            report.best_surrogate_cr = e.consensus_rate;
            report.best_mean_return = e.mean_return;
        }
        Ok(())
    };

    while step < cfg.total_steps {
        let epsilon = eps.value(step);
        let states: Vec<Vec<f32>> = envs.iter().map(|e| e.state()).collect();
        let actions = {
            let mut rr: Vec<&mut SimRng> = act_rngs.iter_mut().collect();
            choose_actions(&q, &states, epsilon, &mut rr)?
        };
        let queries: Vec<SurrogateQuery<'_>> = envs.iter().zip(&actions).map(|(e, &a)| e.query(a as i32)).collect();
        let raw = surrogate.predict_many(&queries)?;
        for (k, env) in envs.iter_mut().enumerate() {
            let out = env.apply(surrogate, actions[k] as i32, &raw[k]);
            buffer.push(&states[k], actions[k], out.reward, &env.state(), out.done);
            if out.done {
                report.episodes += 1;
                env.reset();
            }
        }
        step += cfg.n_parallel_envs as u64;
        if step >= cfg.learning_starts && buffer.len() >= cfg.batch_size {
            let batch = buffer.sample(cfg.batch_size, &mut sample_rng)?;
            td_update(&mut q, &target, &batch, cfg.gamma, &mut opt, cfg.divergence_threshold)
                .map_err(|e| Error::Training(format!("step {step}: {e}")))?;
            report.updates += 1;
            if report.updates % cfg.target_update_every == 0 {
                target = q.clone();
                report.target_syncs += 1;
            }
        }
        if step >= next_eval {
            record(&q, step, &mut best, &mut report)?;
            next_eval += cfg.eval_every;
        }
    }
    if report.curve.last().map(|p| p.step) != Some(step) {
        record(&q, step, &mut best, &mut report)?;
    }
    Ok((best, report))
}

/// Where the deployed attacker's view of benign personalities comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum AttributeSource {
    /// Ground-truth types from the observation.
    True,
    /// Types inferred beforehand, one per benign neighbor in id order.
    Inferred(Vec<Personality>),
}

/// Greedy Q-policy acting in the scripted environment.
#[derive(Debug, Clone)]
pub struct DqnInsider {
    pub qnet: Arc<QNet<f32>>,
    pub source: AttributeSource,
    pub template: MessageTemplate,
    /// Every declared position, in order.
    pub actions: Vec<i32>,
}

impl DqnInsider {
    pub fn new(qnet: Arc<QNet<f32>>, source: AttributeSource, template: MessageTemplate) -> Self {
        Self {
            qnet,
            source,
            template,
            actions: Vec::new(),
        }
    }

    pub fn state(&self, obs: &AttackerObservation) -> Result<Vec<f32>> {
        let (mut benign, mut truth) = (Vec::new(), Vec::new());
        for (&p, &per) in obs.neighbor_positions.iter().zip(&obs.neighbor_personalities) {
            if per.is_benign() {
                benign.push(p);
                truth.push(per);
            }
        }
        let personalities = match &self.source {
            AttributeSource::True => truth,
            AttributeSource::Inferred(v) => v.clone(),
        };
        if benign.len() != self.qnet.shape.n_benign || personalities.len() != benign.len() {
            return Err(Error::Dimension(format!(
                "attacker trained for {} benign agents, observed {} positions and {} personalities",
                self.qnet.shape.n_benign,
                benign.len(),
                personalities.len()
            )));
        }
        Ok(encode_state(&benign, &personalities, obs.own_position, obs.round, obs.max_position, obs.max_rounds))
    }
}

impl InsiderBackend for DqnInsider {
    fn declare(&mut self, obs: &AttackerObservation, rng: &mut dyn rand::RngCore) -> Result<Declaration> {
        let qv = self.qnet.q_values(&self.state(obs)?, 1)?;
        let pos = (argmax(&qv) as i32).clamp(0, obs.max_position);
        self.actions.push(pos);
        Ok(Declaration {
            position: pos,
            message: render_message(&self.template, Personality::Malicious, pos, rng),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world_model::{WorldModel, WorldModelShape};
    use Personality::*;

    fn shape() -> QNetShape {
        QNetShape {
            n_benign: 3,
            max_position: 20,
            max_rounds: 10,
        }
    }

    fn zero_surrogate() -> Surrogate {
        let mut m: WorldModel<f32> = WorldModel::new(
            WorldModelShape {
                n_slots: 4,
                max_position: 20,
                embedding_dim: 4,
                hidden_dim: 4,
            },
            0.0,
            &mut stream_rng(0, 0),
        );
        for head in &mut m.heads {
            for (_, t) in head.layers.last_mut().unwrap().named_params_mut() {
                t.fill(0.0);
            }
        }
        Surrogate::new(m, 0.0)
    }

    /// Heads output a constant `c + k` for head k, so benign agents never agree.
    fn spread_surrogate() -> Surrogate {
        let mut s = zero_surrogate();
        for (k, head) in s.model.heads.iter_mut().enumerate() {
            head.layers.last_mut().unwrap().b.data_mut()[0] = 5.0 + k as f32;
        }
        s
    }

    #[test]
    fn state_layout() {
        let s = encode_state(&[0, 10, 20], &[Stubborn, Neutral, Suggestible], 5, 4, 20, 10);
        assert_eq!(s.len(), 14);
        assert_eq!(&s[..3], &[0.0, 0.5, 1.0]);
        assert_eq!(&s[3..12], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(&s[12..], &[0.25, 0.4]);
    }

    #[test]
    fn epsilon_one_is_uniform() {
        let mut rng = stream_rng(1, 0);
        let q = vec![0.0f32; 21];
        let mut counts = [0f64; 21];
        for _ in 0..10_000 {
            counts[act_epsilon_greedy(&q, 1.0, &mut rng)] += 1.0;
        }
        let e = 10_000.0 / 21.0;
        let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
        // 99.9th percentile of chi-square with 20 dof.
        assert!(chi2 < 45.3, "{chi2}");
    }

    #[test]
    fn greedy_choice_is_deterministic_and_affine_invariant() {
        let q: QNet<f32> = QNet::new(shape(), &[16], &mut stream_rng(2, 0));
        let s = encode_state(&[3, 8, 15], &[Neutral, Neutral, Stubborn], 2, 1, 20, 10);
        let qv = q.q_values(&s, 1).unwrap();
        let a = act_epsilon_greedy(&qv, 0.0, &mut stream_rng(3, 0));
        assert_eq!(a, act_epsilon_greedy(&qv, 0.0, &mut stream_rng(4, 0)));
        let shifted: Vec<f32> = qv.iter().map(|v| v + 7.5).collect();
        let scaled: Vec<f32> = qv.iter().map(|v| 3.0 * v - 2.0).collect();
        assert_eq!(argmax(&shifted), a);
        assert_eq!(argmax(&scaled), a);
    }

    #[test]
    fn epsilon_reaches_floor_at_half_budget() {
        let cfg = DqnConfig {
            total_steps: 200_000,
            ..Default::default()
        };
        let s = cfg.epsilon_schedule().unwrap();
        assert_eq!(s.value(0), 1.0);
        assert_eq!(s.value(100_000), 0.05);
        assert_eq!(s.value(150_000), 0.05);
    }

    #[test]
    fn buffer_is_a_ring() {
        let mut b = ReplayBuffer::new(5, 1);
        for i in 0..12 {
            b.push(&[i as f32], i, 0.0, &[0.0], false);
            assert!(b.len() <= 5);
        }
        let all = b.gather(&b.sample_indices(5, &mut stream_rng(0, 0)).unwrap());
        let mut got = all.actions.clone();
        got.sort_unstable();
        assert_eq!(got, vec![7, 8, 9, 10, 11]);
        assert!(b.sample_indices(6, &mut stream_rng(0, 0)).is_err());
    }

    #[test]
    fn replay_sampling_is_uniform_without_replacement() {
        let mut b = ReplayBuffer::new(50, 1);
        for i in 0..50 {
            b.push(&[0.0], i, 0.0, &[0.0], false);
        }
        let mut rng = stream_rng(5, 0);
        let mut counts = [0f64; 50];
        for _ in 0..2000 {
            let mut idx = b.sample_indices(10, &mut rng).unwrap();
            idx.iter().for_each(|&i| counts[i] += 1.0);
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), 10);
        }
        let e = 2000.0 * 10.0 / 50.0;
        let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
        // 99.9th percentile of chi-square with 49 dof.
        assert!(chi2 < 85.4, "{chi2}");
    }

    fn batch_of(n: usize, reward: f32, done: f32) -> Batch {
        Batch {
            states: vec![0.1; n * 14],
            actions: vec![3; n],
            rewards: vec![reward; n],
            next_states: vec![0.2; n * 14],
            dones: vec![done; n],
        }
    }

    #[test]
    fn terminal_and_myopic_targets() {
        let t: QNet<f32> = QNet::new(shape(), &[8], &mut stream_rng(6, 0));
        assert!(td_targets(&t, &batch_of(4, -10.0, 1.0), 0.99).unwrap().iter().all(|&y| y == -10.0));
        assert!(td_targets(&t, &batch_of(4, 1.0, 0.0), 0.0).unwrap().iter().all(|&y| y == 1.0));
    }

    #[test]
    fn repeated_transition_converges_to_its_target() {
        let mut q: QNet<f32> = QNet::new(shape(), &[32, 32], &mut stream_rng(7, 0));
        let target = q.clone();
        let batch = batch_of(8, 1.0, 1.0);
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            &q,
        );
        for _ in 0..5000 {
            td_update(&mut q, &target, &batch, 0.99, &mut opt, 1e4).unwrap();
        }
        let qv = q.q_values(&batch.states[..14], 1).unwrap();
        assert!((qv[3] - 1.0).abs() < 1e-2, "{}", qv[3]);
    }

    #[test]
    fn divergence_aborts() {
        let mut q: QNet<f32> = QNet::new(shape(), &[8], &mut stream_rng(8, 0));
        q.mlp.layers.last_mut().unwrap().b.data_mut().fill(2e4);
        let target = q.clone();
        let mut opt = Adam::new(AdamConfig::default(), &q);
        assert!(td_update(&mut q, &target, &batch_of(2, 0.0, 0.0), 0.9, &mut opt, 1e4).is_err());
    }

    #[test]
    fn surrogate_episode_rules() {
        let zero = zero_surrogate();
        let mut env = SurrogateEnv::new(shape(), RewardConfig::default(), stream_rng(9, 0));
        let s = env.step(&zero, 4).unwrap();
        assert!(s.consensus && s.done);
        assert_eq!(s.reward, -10.0);

        let spread = spread_surrogate();
        let mut env = SurrogateEnv::new(shape(), RewardConfig::default(), stream_rng(10, 0));
        for t in 0..10 {
            let s = env.step(&spread, 20).unwrap();
            assert_eq!(s.reward, 1.0);
            assert_eq!(s.done, t == 9);
        }
    }

    fn tiny_cfg() -> DqnConfig {
        DqnConfig {
            hidden: vec![16],
            learning_rate: 1e-3,
            buffer_size: 500,
            learning_starts: 200,
            target_update_every: 20,
            batch_size: 32,
            total_steps: 1600,
            eval_every: 400,
            eval_episodes: 5,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_reproducible_and_syncs_target() {
        let s = spread_surrogate();
        let (q1, r1) = train_attacker(&s, 3, 10, &tiny_cfg(), 11).unwrap();
        let (q2, r2) = train_attacker(&s, 3, 10, &tiny_cfg(), 11).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(q1, q2);
        assert_eq!(r1.updates, (1600 - 200) / 8 + 1);
        assert_eq!(r1.target_syncs, r1.updates / 20);
        assert_eq!(r1.curve.len(), 4);
    }

    #[test]
    fn invalid_config_lists_violations() {
        let cfg = DqnConfig {
            learning_starts: 10,
            total_steps: 5,
            batch_size: 64,
            ..Default::default()
        };
        match train_attacker(&zero_surrogate(), 3, 10, &cfg, 0) {
            Err(Error::Config(v)) => assert!(v.len() >= 2, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let q: QNet<f32> = QNet::new(shape(), &[8, 8], &mut stream_rng(12, 0));
        let (back, _) = QNet::from_checkpoint(&q.to_checkpoint(&DqnConfig::default()).unwrap()).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn deployed_insider_stays_in_range_and_uses_inferred_types() {
        let q = Arc::new(QNet::<f32>::new(shape(), &[16], &mut stream_rng(13, 0)));
        let obs = AttackerObservation {
            own_position: 3,
            neighbor_ids: vec![0, 1, 2],
            neighbor_positions: vec![1, 9, 17],
            neighbor_personalities: vec![Stubborn, Stubborn, Stubborn],
            round: 2,
            max_rounds: 10,
            max_position: 20,
        };
        let truth = DqnInsider::new(q.clone(), AttributeSource::True, Default::default());
        let same = DqnInsider::new(q.clone(), AttributeSource::Inferred(vec![Stubborn; 3]), Default::default());
        let other = DqnInsider::new(q.clone(), AttributeSource::Inferred(vec![Neutral, Suggestible, Neutral]), Default::default());
        assert_eq!(truth.state(&obs).unwrap(), same.state(&obs).unwrap());
        assert_ne!(truth.state(&obs).unwrap(), other.state(&obs).unwrap());
        let mut ins = truth;
        let d = ins.declare(&obs, &mut stream_rng(14, 0)).unwrap();
        assert!((0..=20).contains(&d.position));
        assert_eq!(ins.actions, vec![d.position]);
    }
}
