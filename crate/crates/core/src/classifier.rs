//! Personality classifier over one agent's episode history.
//!
//! Three encoders feed a shared head:
//! - positions and bucketed deltas, embedded and run through a small GRU;
//! - nine handcrafted trajectory statistics through a dense layer;
//! - messages as hashed bags of tokens, sum-pooled and run through a second GRU.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{Personality, Trajectory};
use crate::error::{Error, Result};
use crate::nn::gru::GruStepCache;
use crate::nn::layers::{prefixed, MlpCache};
use crate::nn::{
    softmax, weighted_cross_entropy, Activation, Adam, AdamConfig, Checkpoint, Component, Embedding, Float, GruCell, LinearSchedule, Mlp, Parameterized,
    Tensor, WeightDecayMode,
};
use crate::rng::{stream_rng, SimRng};

pub const N_CLASSES: usize = 3;
pub const N_SUMMARY: usize = 9;
pub const DELTA_BUCKETS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryFeatures {
    pub initial: f64,
    pub last: f64,
    pub net_displacement: f64,
    pub total_movement: f64,
    pub mean_movement: f64,
    pub max_movement: f64,
    pub unique_positions: f64,
    pub direction_changes: f64,
    pub length: f64,
}

impl SummaryFeatures {
    pub fn to_array(&self) -> [f64; N_SUMMARY] {
        [
            self.initial,
            self.last,
            self.net_displacement,
            self.total_movement,
            self.mean_movement,
            self.max_movement,
            self.unique_positions,
            self.direction_changes,
            self.length,
        ]
    }

    /// Scales every entry to roughly unit range for the network.
    pub fn normalized(&self, max_position: i32, max_rounds: u32) -> [f64; N_SUMMARY] {
        let l = max_position.max(1) as f64;
        let horizon = (max_rounds + 1) as f64;
        let len = self.length.max(1.0);
        [
            self.initial / l,
            self.last / l,
            self.net_displacement / l,
            self.total_movement / (l * horizon),
            self.mean_movement / l,
            self.max_movement / l,
            self.unique_positions / len,
            self.direction_changes / len,
            self.length / horizon,
        ]
    }
}

pub fn summary_features(positions: &[i32]) -> Result<SummaryFeatures> {
    let (&first, &last) = match (positions.first(), positions.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::InvalidInput("summary features of an empty sequence".into())),
    };
    let deltas: Vec<i32> = positions.windows(2).map(|w| w[1] - w[0]).collect();
    let total: i32 = deltas.iter().map(|d| d.abs()).sum();
    let max = deltas.iter().map(|d| d.abs()).max().unwrap_or(0);
    let mut seen = positions.to_vec();
    seen.sort_unstable();
    seen.dedup();
    let signs: Vec<i32> = deltas.iter().map(|d| d.signum()).filter(|&s| s != 0).collect();
    let changes = signs.windows(2).filter(|w| w[0] * w[1] < 0).count();
    Ok(SummaryFeatures {
        initial: first as f64,
        last: last as f64,
        net_displacement: (last - first) as f64,
        total_movement: total as f64,
        mean_movement: if deltas.is_empty() { 0.0 } else { total as f64 / deltas.len() as f64 },
        max_movement: max as f64,
        unique_positions: seen.len() as f64,
        direction_changes: changes as f64,
        length: positions.len() as f64,
    })
}

/// Buckets `{≤−3, −2, −1, 0, 1, 2, ≥3}` as ids `0..7`.
pub fn delta_bucket(delta: i32) -> usize {
    (delta.clamp(-3, 3) + 3) as usize
}

/// Stable hash of a token into `buckets` slots (first 8 bytes of SHA-256).
pub fn token_bucket(token: &str, buckets: usize) -> usize {
    let digest = Sha256::digest(token.as_bytes());
    let word = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
    (word % buckets as u64) as usize
}

pub fn class_index(p: Personality) -> Result<usize> {
    if p.is_benign() {
        Ok(p.id())
    } else {
        Err(Error::InvalidInput(format!("{p} is not a classifier label")))
    }
}

pub fn class_of(index: usize) -> Personality {
    Personality::BENIGN[index]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub position_embedding_dim: usize,
    pub trajectory_hidden: usize,
    pub summary_hidden: usize,
    pub token_buckets: usize,
    pub token_embedding_dim: usize,
    pub message_hidden: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub val_split: f64,
    pub early_stop_patience: usize,
    pub max_messages: usize,
    pub max_tokens_per_message: usize,
    /// Only the first `rounds_limit` transitions of the history are used; 0 means all.
    pub rounds_limit: usize,
    pub decay_mode: WeightDecayMode,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            position_embedding_dim: 16,
            trajectory_hidden: 32,
            summary_hidden: 32,
            token_buckets: 1024,
            token_embedding_dim: 64,
            message_hidden: 128,
            head_hidden: 128,
            dropout: 0.2,
            epochs: 20,
            batch_size: 16,
            weight_decay: 1e-5,
            lr_start: 2e-4,
            lr_end: 5e-5,
            val_split: 0.1,
            early_stop_patience: 15,
            max_messages: 10,
            max_tokens_per_message: 48,
            rounds_limit: 0,
            decay_mode: WeightDecayMode::Coupled,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        for (name, v) in [
            ("position_embedding_dim", self.position_embedding_dim),
            ("trajectory_hidden", self.trajectory_hidden),
            ("summary_hidden", self.summary_hidden),
            ("token_buckets", self.token_buckets),
            ("token_embedding_dim", self.token_embedding_dim),
            ("message_hidden", self.message_hidden),
            ("head_hidden", self.head_hidden),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("early_stop_patience", self.early_stop_patience),
            ("max_messages", self.max_messages),
            ("max_tokens_per_message", self.max_tokens_per_message),
        ] {
            if v == 0 {
                errors.push(format!("{prefix}.{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errors.push(format!("{prefix}.dropout must lie in [0, 1)"));
        }
        if !(self.val_split > 0.0 && self.val_split < 1.0) {
            errors.push(format!("{prefix}.val_split must lie in (0, 1)"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            errors.push(format!("{prefix}.lr_start and lr_end must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            errors.push(format!("{prefix}.weight_decay must be nonnegative"));
        }
    }
}

/// One agent's observable history, already truncated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub positions: Vec<i32>,
    pub messages: Vec<Vec<String>>,
}

impl AgentHistory {
    pub fn truncated(mut self, cfg: &ClassifierConfig) -> Self {
        if cfg.rounds_limit > 0 {
            self.positions.truncate(cfg.rounds_limit + 1);
            self.messages.truncate(cfg.rounds_limit + 1);
        }
        self.messages.truncate(cfg.max_messages);
        for m in &mut self.messages {
            m.truncate(cfg.max_tokens_per_message);
        }
        self
    }

    pub fn from_trajectory(traj: &Trajectory, agent: usize, cfg: &ClassifierConfig) -> Result<Self> {
        let positions = traj
            .positions_of(agent)
            .ok_or_else(|| Error::InvalidInput(format!("agent {agent} is not in episode {}", traj.episode_id)))?;
        let messages = traj.messages_of(agent).unwrap_or_default();
        Ok(Self { positions, messages }.truncated(cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledHistory {
    pub history: AgentHistory,
    pub label: Personality,
}

/// Every benign agent of every episode, labelled with its scripted type.
pub fn labeled_histories(trajectories: &[Trajectory], cfg: &ClassifierConfig) -> Result<Vec<LabeledHistory>> {
    let mut out = Vec::new();
    for traj in trajectories {
        let Some(first) = traj.rounds.first() else { continue };
        for a in first.agents.iter().filter(|a| a.personality.is_benign()) {
            out.push(LabeledHistory {
                history: AgentHistory::from_trajectory(traj, a.id, cfg)?,
                label: a.personality,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierShape {
    pub max_position: i32,
    pub max_rounds: u32,
    pub position_embedding_dim: usize,
    pub trajectory_hidden: usize,
    pub summary_hidden: usize,
    pub token_buckets: usize,
    pub token_embedding_dim: usize,
    pub message_hidden: usize,
    pub head_hidden: usize,
}

impl ClassifierShape {
    pub fn from_config(cfg: &ClassifierConfig, max_position: i32, max_rounds: u32) -> Self {
        Self {
            max_position,
            max_rounds,
            position_embedding_dim: cfg.position_embedding_dim,
            trajectory_hidden: cfg.trajectory_hidden,
            summary_hidden: cfg.summary_hidden,
            token_buckets: cfg.token_buckets,
            token_embedding_dim: cfg.token_embedding_dim,
            message_hidden: cfg.message_hidden,
            head_hidden: cfg.head_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T: Float = f32> {
    pub shape: ClassifierShape,
    pub position_embedding: Embedding<T>,
    pub delta_embedding: Embedding<T>,
    pub trajectory_gru: GruCell<T>,
    pub summary: Mlp<T>,
    pub token_embedding: Embedding<T>,
    pub message_gru: GruCell<T>,
    pub head: Mlp<T>,
}

struct Cache<T> {
    pos_ids: Vec<usize>,
    delta_ids: Vec<usize>,
    traj_steps: Vec<GruStepCache<T>>,
    summary: MlpCache<T>,
    msg_tokens: Vec<Vec<usize>>,
    msg_steps: Vec<GruStepCache<T>>,
    head: MlpCache<T>,
}

impl<T: Float> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(shape: ClassifierShape, dropout: f64, rng: &mut R) -> Self {
        let s = shape;
        let pe = s.position_embedding_dim;
        let concat = s.trajectory_hidden + s.summary_hidden + s.message_hidden;
        Self {
            shape,
            position_embedding: Embedding::new(s.max_position as usize + 1, pe, rng),
            delta_embedding: Embedding::new(DELTA_BUCKETS, pe, rng),
            trajectory_gru: GruCell::new(2 * pe, s.trajectory_hidden, rng),
            summary: Mlp::new(&[N_SUMMARY, s.summary_hidden], Activation::Relu, Activation::Relu, 0.0, rng),
            token_embedding: Embedding::new(s.token_buckets, s.token_embedding_dim, rng),
            message_gru: GruCell::new(s.token_embedding_dim, s.message_hidden, rng),
            head: Mlp::new(&[concat, s.head_hidden, N_CLASSES], Activation::Relu, Activation::Identity, dropout, rng),
        }
    }

    fn forward(&self, h: &AgentHistory, rng: Option<&mut SimRng>) -> Result<(Vec<T>, Cache<T>)> {
        if h.positions.is_empty() {
            return Err(Error::InvalidInput("agent history has no positions".into()));
        }
        let l = self.shape.max_position;
        if let Some(p) = h.positions.iter().find(|&&p| p < 0 || p > l) {
            return Err(Error::InvalidInput(format!("position {p} outside [0, {l}]")));
        }
        let pe = self.shape.position_embedding_dim;
        let pos_ids: Vec<usize> = h.positions.iter().map(|&p| p as usize).collect();
        let delta_ids: Vec<usize> = (0..h.positions.len())
            .map(|t| delta_bucket(if t == 0 { 0 } else { h.positions[t] - h.positions[t - 1] }))
            .collect();
        let pos_emb = self.position_embedding.forward(&pos_ids)?;
        let delta_emb = self.delta_embedding.forward(&delta_ids)?;
        let steps: Vec<Vec<T>> = (0..pos_ids.len())
            .map(|t| [&pos_emb[t * pe..(t + 1) * pe], &delta_emb[t * pe..(t + 1) * pe]].concat())
            .collect();
        let (h_traj, traj_steps) = self.trajectory_gru.run(&steps, 1)?;

        let feats = summary_features(&h.positions)?.normalized(l, self.shape.max_rounds);
        let feats: Vec<T> = feats.iter().map(|&x| T::of_f64(x)).collect();
        let (h_sum, summary) = self.summary.forward::<SimRng>(&feats, 1, None)?;

        let d = self.shape.token_embedding_dim;
        let msg_tokens: Vec<Vec<usize>> = h
            .messages
            .iter()
            .map(|m| m.iter().map(|t| token_bucket(t, self.shape.token_buckets)).collect())
            .collect();
        let pooled: Vec<Vec<T>> = msg_tokens
            .iter()
            .map(|ids| {
                let mut v = vec![T::zero(); d];
                for &id in ids {
                    let row = &self.token_embedding.table.data()[id * d..(id + 1) * d];
                    v.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                v
            })
            .collect();
        let (h_msg, msg_steps) = self.message_gru.run(&pooled, 1)?;

        let concat = [h_traj, h_sum, h_msg].concat();
        let (logits, head) = self.head.forward(&concat, 1, rng)?;
        Ok((
            logits,
            Cache {
                pos_ids,
                delta_ids,
                traj_steps,
                summary,
                msg_tokens,
                msg_steps,
                head,
            },
        ))
    }

    fn backward(&self, cache: &Cache<T>, d_logits: &[T], grad: &mut Self) {
        let (th, sh) = (self.shape.trajectory_hidden, self.shape.summary_hidden);
        let d_concat = self.head.backward(&cache.head, d_logits, &mut grad.head);
        let (d_traj, rest) = d_concat.split_at(th);
        let (d_sum, d_msg) = rest.split_at(sh);

        let d_steps = self.trajectory_gru.run_backward(&cache.traj_steps, d_traj, &mut grad.trajectory_gru);
        let pe = self.shape.position_embedding_dim;
        let mut d_pos = Vec::with_capacity(d_steps.len() * pe);
        let mut d_delta = Vec::with_capacity(d_steps.len() * pe);
        for dx in &d_steps {
            d_pos.extend_from_slice(&dx[..pe]);
            d_delta.extend_from_slice(&dx[pe..]);
        }
        self.position_embedding.backward(&cache.pos_ids, &d_pos, &mut grad.position_embedding);
        self.delta_embedding.backward(&cache.delta_ids, &d_delta, &mut grad.delta_embedding);

        self.summary.backward(&cache.summary, d_sum, &mut grad.summary);

        let d_pooled = self.message_gru.run_backward(&cache.msg_steps, d_msg, &mut grad.message_gru);
        for (ids, dp) in cache.msg_tokens.iter().zip(&d_pooled) {
            let rep: Vec<T> = ids.iter().flat_map(|_| dp.iter().copied()).collect();
            self.token_embedding.backward(ids, &rep, &mut grad.token_embedding);
        }
    }

    pub fn logits(&self, h: &AgentHistory) -> Result<Vec<T>> {
        Ok(self.forward(h, None)?.0)
    }

    pub fn probabilities(&self, h: &AgentHistory) -> Result<Vec<T>> {
        Ok(softmax(&self.logits(h)?))
    }

    pub fn predict(&self, h: &AgentHistory) -> Result<Personality> {
        Ok(class_of(argmax(&self.logits(h)?)))
    }

    /// Mean weighted cross-entropy over `batch` and its gradient.
    pub fn loss_and_grad(&self, batch: &[&LabeledHistory], class_weights: &[T], mut rng: Option<&mut SimRng>) -> Result<(T, Self)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty classifier batch".into()));
        }
        let scale = T::of_f64(1.0 / batch.len() as f64);
        let mut grad = self.zeroed();
        let mut total = T::zero();
        for ex in batch {
            let (logits, cache) = self.forward(&ex.history, rng.as_deref_mut())?;
            let (loss, mut d) = weighted_cross_entropy(&logits, class_index(ex.label)?, class_weights)?;
            total += loss;
            d.iter_mut().for_each(|g| *g *= scale);
            self.backward(&cache, &d, &mut grad);
        }
        Ok((total * scale, grad))
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

macro_rules! params_list {
    ($self:ident, $method:ident) => {{
        let mut v = Vec::new();
        v.extend(prefixed("position_embedding", $self.position_embedding.$method()));
        v.extend(prefixed("delta_embedding", $self.delta_embedding.$method()));
        v.extend(prefixed("trajectory_gru", $self.trajectory_gru.$method()));
        v.extend(prefixed("summary", $self.summary.$method()));
        v.extend(prefixed("token_embedding", $self.token_embedding.$method()));
        v.extend(prefixed("message_gru", $self.message_gru.$method()));
        v.extend(prefixed("head", $self.head.$method()));
        v
    }};
}

impl<T: Float> Parameterized<T> for Classifier<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        params_list!(self, named_params)
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        params_list!(self, named_params_mut)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifierHyper {
    shape: ClassifierShape,
    config: ClassifierConfig,
}

impl Classifier<f32> {
    pub fn to_checkpoint(&self, config: &ClassifierConfig) -> Result<Checkpoint> {
        Checkpoint::capture(
            Component::Classifier,
            &ClassifierHyper {
                shape: self.shape,
                config: config.clone(),
            },
            self,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ClassifierConfig)> {
        let hyper: ClassifierHyper = ck.hyperparameters(Component::Classifier)?;
        let mut model = Classifier::new(hyper.shape, hyper.config.dropout, &mut stream_rng(0, 0));
        ck.restore_into(Component::Classifier, &mut model)?;
        Ok((model, hyper.config))
    }
}

/// `α_c = N / (3 · N_c)`. Every class needs at least `min_per_class` examples.
pub fn class_weights(labels: &[Personality], min_per_class: usize) -> Result<[f64; N_CLASSES]> {
    let mut counts = [0usize; N_CLASSES];
    for &l in labels {
        counts[class_index(l)?] += 1;
    }
    if let Some(c) = (0..N_CLASSES).find(|&c| counts[c] < min_per_class.max(1)) {
        return Err(Error::InvalidInput(format!(
            "class {} has {} examples, need at least {}",
            class_of(c),
            counts[c],
            min_per_class.max(1)
        )));
    }
    let n = labels.len() as f64;
    Ok(counts.map(|nc| n / (N_CLASSES as f64 * nc as f64)))
}

/// Per-class shuffled split; each class contributes `round(n_c · val_split)`
/// (at least one) examples to validation.
pub fn stratified_split(data: &[LabeledHistory], val_split: f64, seed: u64) -> (Vec<&LabeledHistory>, Vec<&LabeledHistory>) {
    let mut rng = stream_rng(seed, 0xc1a5);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..N_CLASSES {
        let mut members: Vec<&LabeledHistory> = data.iter().filter(|x| x.label.id() == c).collect();
        members.shuffle(&mut rng);
        let k = ((members.len() as f64 * val_split).round() as usize).clamp(1, members.len().saturating_sub(1).max(1));
        val.extend(members.drain(..k));
        train.extend(members);
    }
    (train, val)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClfEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub curve: Vec<ClfEpoch>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    pub class_weights: [f64; N_CLASSES],
    pub stopped_early: bool,
    pub n_train: usize,
    pub n_val: usize,
}

fn validation(model: &Classifier<f32>, val: &[&LabeledHistory], w: &[f32]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0usize;
    for ex in val {
        let logits = model.logits(&ex.history)?;
        let c = class_index(ex.label)?;
        loss += weighted_cross_entropy(&logits, c, w)?.0 as f64;
        hits += usize::from(argmax(&logits) == c);
    }
    let n = val.len().max(1) as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Weighted cross-entropy training with a stratified validation split.
/// Keeps the epoch with the best validation accuracy (ties go to the lower
/// validation loss) and stops once `early_stop_patience` epochs pass without
/// a new best.
pub fn train(data: &[LabeledHistory], shape: ClassifierShape, cfg: &ClassifierConfig, seed: u64) -> Result<(Classifier<f32>, ClassifierReport)> {
    let labels: Vec<Personality> = data.iter().map(|x| x.label).collect();
    let alpha = class_weights(&labels, 3)?;
    let w: Vec<f32> = alpha.iter().map(|&a| a as f32).collect();
    let (train_set, val_set) = stratified_split(data, cfg.val_split, seed);
    let mut rng = stream_rng(seed, 1);
    let mut model = Classifier::<f32>::new(shape, cfg.dropout, &mut rng);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(cfg.lr_start, cfg.lr_end, 1.0, (cfg.epochs * steps_per_epoch) as u64)?;
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.lr_start,
            weight_decay: cfg.weight_decay,
            decay_mode: cfg.decay_mode,
            ..Default::default()
        },
        &model,
    );
    let mut order = train_set.clone();
    let mut best: Option<(Classifier<f32>, f64, f64, usize)> = None;
    let mut curve = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grad) = model.loss_and_grad(batch, &w, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite classifier loss at epoch {epoch}, batch {bi}")));
            }
            sum += loss as f64 * batch.len() as f64;
            opt.set_learning_rate(schedule.value(opt.steps()));
            opt.update(&mut model, &grad)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {bi}: {e}")))?;
        }
        let (val_loss, val_accuracy) = validation(&model, &val_set, &w)?;
        curve.push(ClfEpoch {
            epoch,
            train_loss: sum / order.len() as f64,
            val_loss,
            val_accuracy,
        });
        let improved = match &best {
            None => true,
            Some((_, acc, loss, _)) => val_accuracy > *acc || (val_accuracy == *acc && val_loss < *loss),
        };
        if improved {
            best = Some((model.clone(), val_accuracy, val_loss, epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_model, best_val_accuracy, best_val_loss, best_epoch) = best.expect("at least one epoch");
    Ok((
        best_model,
        ClassifierReport {
            curve,
            best_epoch,
            best_val_accuracy,
            best_val_loss,
            class_weights: alpha,
            stopped_early,
            n_train: train_set.len(),
            n_val: val_set.len(),
        },
    ))
}

/// Argmax personality of `agent` given the whole recorded episode (or the
/// configured prefix of it).
pub fn infer_episode_attributes(model: &Classifier<f32>, traj: &Trajectory, agent: usize, cfg: &ClassifierConfig) -> Result<Personality> {
    model.predict(&AgentHistory::from_trajectory(traj, agent, cfg)?)
}

/// Predicted personalities of every benign agent, in agent-id order.
pub fn infer_composition(model: &Classifier<f32>, traj: &Trajectory, cfg: &ClassifierConfig) -> Result<Vec<Personality>> {
    let first = traj
        .rounds
        .first()
        .ok_or_else(|| Error::InvalidInput("episode has no rounds".into()))?;
    first
        .agents
        .iter()
        .filter(|a| a.personality.is_benign())
        .map(|a| infer_episode_attributes(model, traj, a.id, cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfEvaluation {
    pub accuracy: f64,
    pub n: usize,
    pub per_class: Vec<(Personality, ClassMetrics)>,
    /// `confusion[true][predicted]`
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
}

impl ClfEvaluation {
    pub fn from_pairs(pairs: &[(Personality, Personality)]) -> Result<Self> {
        let mut confusion = [[0usize; N_CLASSES]; N_CLASSES];
        for &(t, p) in pairs {
            confusion[class_index(t)?][class_index(p)?] += 1;
        }
        let n = pairs.len();
        let hits: usize = (0..N_CLASSES).map(|c| confusion[c][c]).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class = (0..N_CLASSES)
            .map(|c| {
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = (0..N_CLASSES).map(|t| confusion[t][c]).sum();
                (
                    class_of(c),
                    ClassMetrics {
                        precision: ratio(confusion[c][c], predicted),
                        recall: ratio(confusion[c][c], support),
                        n: support,
                    },
                )
            })
            .collect();
        Ok(Self {
            accuracy: ratio(hits, n),
            n,
            per_class,
            confusion,
        })
    }

    /// `class,precision,recall,n`; the `overall` row carries micro averages,
    /// which both equal accuracy for single-label data.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,n\n");
        for (p, m) in &self.per_class {
            s.push_str(&format!("{},{:.6},{:.6},{}\n", p.name(), m.precision, m.recall, m.n));
        }
        s.push_str(&format!("overall,{:.6},{:.6},{}\n", self.accuracy, self.accuracy, self.n));
        s
    }
}

pub fn evaluate(model: &Classifier<f32>, held_out: &[LabeledHistory]) -> Result<ClfEvaluation> {
    if held_out.is_empty() {
        return Err(Error::InvalidInput("empty held-out set".into()));
    }
    let pairs = held_out
        .iter()
        .map(|ex| Ok((ex.label, model.predict(&ex.history)?)))
        .collect::<Result<Vec<_>>>()?;
    ClfEvaluation::from_pairs(&pairs)
}
