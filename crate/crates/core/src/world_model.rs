//! Latent-agent world model: predicts one benign agent's next position from
//! the ordered position vector, every agent's personality, and the insider's
//! declaration.
//!
//! Positions go through a two-layer MLP, personality ids through an embedding
//! table plus a second MLP; the concatenation feeds one regression head per
//! benign personality. The target agent always occupies slot 0; the remaining
//! slots are sorted by `(personality id, position)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{Personality, Trajectory};
use crate::error::{Error, Result};
use crate::nn::layers::{dropout_backward, dropout_forward, prefixed, slot_embed_dense_backward, slot_embed_dense_forward, SlotEmbedCache};
use crate::nn::{mse, Activation, Adam, AdamConfig, Checkpoint, Component, Dense, Embedding, Float, LinearSchedule, Mlp, Parameterized, Tensor, WeightDecayMode};
use crate::policies::round_position;
use crate::rng::{stream_rng, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub episode_id: u64,
    pub round: u32,
    pub target: usize,
    /// Target first, then the other agents in canonical order.
    pub positions: Vec<i32>,
    pub personalities: Vec<Personality>,
    pub attacker_position: i32,
    pub label: i32,
}

impl Transition {
    pub fn target_personality(&self) -> Personality {
        self.personalities[0]
    }

    pub fn current_position(&self) -> i32 {
        self.positions[0]
    }
}

/// Orders agents as (target, rest sorted by personality id then position).
pub fn canonical_order(target: usize, positions: &[i32], personalities: &[Personality]) -> (Vec<i32>, Vec<Personality>) {
    let mut rest: Vec<(Personality, i32)> = (0..positions.len())
        .filter(|&j| j != target)
        .map(|j| (personalities[j], positions[j]))
        .collect();
    rest.sort_by_key(|&(p, x)| (p.id(), x));
    let mut pos = vec![positions[target]];
    let mut per = vec![personalities[target]];
    for (p, x) in rest {
        pos.push(x);
        per.push(p);
    }
    (pos, per)
}

/// One sample per benign agent per consecutive round pair.
pub fn build_dataset(trajectories: &[Trajectory]) -> Vec<Transition> {
    let mut out = Vec::new();
    for traj in trajectories {
        for pair in traj.rounds.windows(2) {
            let (now, next) = (&pair[0], &pair[1]);
            let positions: Vec<i32> = now.agents.iter().map(|a| a.position).collect();
            let personalities: Vec<Personality> = now.agents.iter().map(|a| a.personality).collect();
            let attacker_position = now.attacker().map(|a| a.position).unwrap_or(-1);
            for (i, agent) in now.agents.iter().enumerate() {
                if !agent.personality.is_benign() {
                    continue;
                }
                let (pos, per) = canonical_order(i, &positions, &personalities);
                out.push(Transition {
                    episode_id: traj.episode_id,
                    round: now.t,
                    target: agent.id,
                    positions: pos,
                    personalities: per,
                    attacker_position,
                    label: next.agents[i].position,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldModelConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub val_split: f64,
    pub suggestible_weight: f64,
    pub other_weight: f64,
    pub decay_mode: WeightDecayMode,
    /// Std of Gaussian noise added to surrogate predictions (0 = deterministic).
    pub surrogate_noise_std: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            hidden_dim: 128,
            dropout: 0.1,
            epochs: 50,
            batch_size: 64,
            weight_decay: 1e-5,
            lr_start: 1e-3,
            lr_end: 1e-4,
            val_split: 0.1,
            suggestible_weight: 3.0,
            other_weight: 1.0,
            decay_mode: WeightDecayMode::Coupled,
            surrogate_noise_std: 0.0,
        }
    }
}

impl WorldModelConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
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
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_end", self.lr_end),
            ("suggestible_weight", self.suggestible_weight),
            ("other_weight", self.other_weight),
        ] {
            if !(v > 0.0) {
                errors.push(format!("{prefix}.{name} must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            errors.push(format!("{prefix}.weight_decay must be nonnegative"));
        }
        if !(self.surrogate_noise_std >= 0.0) {
            errors.push(format!("{prefix}.surrogate_noise_std must be nonnegative"));
        }
    }

    pub fn sample_weight(&self, p: Personality) -> f64 {
        if p == Personality::Suggestible {
            self.suggestible_weight
        } else {
            self.other_weight
        }
    }
}

/// Architecture hyperparameters stored alongside checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldModelShape {
    pub n_slots: usize,
    pub max_position: i32,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel<T: Float = f32> {
    pub shape: WorldModelShape,
    pub dropout: f64,
    pub position_encoder: Mlp<T>,
    pub type_embedding: Embedding<T>,
    /// Flattened slot embeddings to the first hidden layer.
    pub type_projection: Dense<T>,
    pub type_encoder: Mlp<T>,
    /// Stubborn, Suggestible, Neutral.
    pub heads: Vec<Mlp<T>>,
}

struct ForwardCache<T> {
    pos: crate::nn::layers::MlpCache<T>,
    proj: SlotEmbedCache<T>,
    proj_mask: Option<Vec<T>>,
    typ: crate::nn::layers::MlpCache<T>,

    heads: Vec<(Vec<usize>, crate::nn::layers::MlpCache<T>)>,
}

impl<T: Float> WorldModel<T> {
    pub fn new<R: Rng + ?Sized>(shape: WorldModelShape, dropout: f64, rng: &mut R) -> Self {
        let (s, e, h) = (shape.n_slots, shape.embedding_dim, shape.hidden_dim);
        let relu = Activation::Relu;
        Self {
            shape,
            dropout,
            position_encoder: Mlp::new(&[s, h, h], relu, relu, dropout, rng),
            type_embedding: Embedding::new(Personality::ALL.len(), e, rng),
            type_projection: Dense::new(s * e, h, relu, rng),
            type_encoder: Mlp::new(&[h, h], relu, relu, dropout, rng),
            heads: (0..3)
                .map(|_| Mlp::new(&[2 * h, h, 1], relu, Activation::Identity, dropout, rng))
                .collect(),
        }
    }

    fn check(&self, t: &Transition) -> Result<()> {
        if t.positions.len() != self.shape.n_slots || t.personalities.len() != self.shape.n_slots {
            return Err(Error::Dimension(format!(
                "transition has {} slots, model expects {}",
                t.positions.len(),
                self.shape.n_slots
            )));
        }
        if !t.target_personality().is_benign() {
            return Err(Error::InvalidInput("no prediction head for a malicious target".into()));
        }
        Ok(())
    }

    fn inputs(&self, batch: &[&Transition]) -> Result<(Vec<T>, Vec<usize>)> {
        let l = self.shape.max_position as f64;
        let mut pos = Vec::with_capacity(batch.len() * self.shape.n_slots);
        let mut ids = Vec::with_capacity(batch.len() * self.shape.n_slots);
        for t in batch {
            self.check(t)?;
            pos.extend(t.positions.iter().map(|&p| T::of_f64(p as f64 / l)));
            ids.extend(t.personalities.iter().map(|p| p.id()));
        }
        Ok((pos, ids))
    }

    fn forward_impl(&self, batch: &[&Transition], mut rng: Option<&mut SimRng>) -> Result<(Vec<T>, ForwardCache<T>)> {
        let b = batch.len();
        let h = self.shape.hidden_dim;
        let (pos_in, ids) = self.inputs(batch)?;
        let (pos_feat, pos_cache) = self.position_encoder.forward(&pos_in, b, rng.as_deref_mut())?;
        let (mut proj, proj_cache) = slot_embed_dense_forward(&self.type_embedding, &self.type_projection, &ids, self.shape.n_slots)?;
        let proj_mask = match rng.as_deref_mut() {
            Some(r) if self.dropout > 0.0 => Some(dropout_forward(&mut proj, self.dropout, r)),
            _ => None,
        };
        let (typ_feat, typ_cache) = self.type_encoder.forward(&proj, b, rng.as_deref_mut())?;
        let mut out = vec![T::zero(); b];
        let mut heads = Vec::new();
        for (k, head) in self.heads.iter().enumerate() {
            let rows: Vec<usize> = (0..b).filter(|&i| batch[i].target_personality().id() == k).collect();
            if rows.is_empty() {
                continue;
            }
            let mut feat = Vec::with_capacity(rows.len() * 2 * h);
            for &i in &rows {
                feat.extend_from_slice(&pos_feat[i * h..(i + 1) * h]);
                feat.extend_from_slice(&typ_feat[i * h..(i + 1) * h]);
            }
            let (y, cache) = head.forward(&feat, rows.len(), rng.as_deref_mut())?;
            for (j, &i) in rows.iter().enumerate() {
                out[i] = y[j];
            }
            heads.push((rows, cache));
        }
        Ok((
            out,
            ForwardCache {
                pos: pos_cache,
                proj: proj_cache,
                proj_mask,
                typ: typ_cache,

                heads,
            },
        ))
    }

    /// Raw (unclamped) next-position predictions, inference mode.
    pub fn predict_batch(&self, batch: &[&Transition]) -> Result<Vec<T>> {
        Ok(self.forward_impl(batch, None)?.0)
    }

    pub fn predict(&self, t: &Transition) -> Result<T> {
        Ok(self.predict_batch(&[t])?[0])
    }

    /// Weighted MSE over `batch` and its gradient. Dropout is active when
    /// `rng` is given.
    pub fn loss_and_grad(&self, batch: &[&Transition], weights: &[T], rng: Option<&mut SimRng>) -> Result<(T, Self)> {
        let b = batch.len();
        let h = self.shape.hidden_dim;
        let (pred, cache) = self.forward_impl(batch, rng)?;
        let labels: Vec<T> = batch.iter().map(|t| T::of_f64(t.label as f64)).collect();
        let (loss, d_pred) = mse(&pred, &labels, weights)?;
        let mut grad = self.zeroed();
        let mut d_pos = vec![T::zero(); b * h];
        let mut d_typ = vec![T::zero(); b * h];
        for (rows, hc) in &cache.heads {
            let head_id = batch[rows[0]].target_personality().id();
            let d_y: Vec<T> = rows.iter().map(|&i| d_pred[i]).collect();
            let d_feat = self.heads[head_id].backward(hc, &d_y, &mut grad.heads[head_id]);
            for (j, &i) in rows.iter().enumerate() {
                d_pos[i * h..(i + 1) * h].copy_from_slice(&d_feat[j * 2 * h..j * 2 * h + h]);
                d_typ[i * h..(i + 1) * h].copy_from_slice(&d_feat[j * 2 * h + h..(j + 1) * 2 * h]);
            }
        }
        self.position_encoder.backward(&cache.pos, &d_pos, &mut grad.position_encoder);
        let mut d_proj = self.type_encoder.backward(&cache.typ, &d_typ, &mut grad.type_encoder);
        if let Some(mask) = &cache.proj_mask {
            dropout_backward(&mut d_proj, mask);
        }
        slot_embed_dense_backward(
            &self.type_embedding,
            &self.type_projection,
            &cache.proj,
            &d_proj,
            &mut grad.type_embedding,
            &mut grad.type_projection,
        );
        Ok((loss, grad))
    }
}

impl<T: Float> Parameterized<T> for WorldModel<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<(String, &Tensor<T>)> = prefixed("position_encoder", self.position_encoder.named_params()).collect();
        v.extend(prefixed("type_embedding", self.type_embedding.named_params()));
        v.extend(prefixed("type_projection", self.type_projection.named_params()));
        v.extend(prefixed("type_encoder", self.type_encoder.named_params()));
        for (k, head) in self.heads.iter().enumerate() {
            let p = format!("head_{}", Personality::BENIGN[k].name());
            v.extend(prefixed(&p, head.named_params()).collect::<Vec<_>>());
        }
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v: Vec<(String, &mut Tensor<T>)> = prefixed("position_encoder", self.position_encoder.named_params_mut()).collect();
        v.extend(prefixed("type_embedding", self.type_embedding.named_params_mut()));
        v.extend(prefixed("type_projection", self.type_projection.named_params_mut()));
        v.extend(prefixed("type_encoder", self.type_encoder.named_params_mut()));
        for (k, head) in self.heads.iter_mut().enumerate() {
            let p = format!("head_{}", Personality::BENIGN[k].name());
            v.extend(prefixed(&p, head.named_params_mut()).collect::<Vec<_>>());
        }
        v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorldModelHyper {
    shape: WorldModelShape,
    config: WorldModelConfig,
}

impl WorldModel<f32> {
    pub fn to_checkpoint(&self, config: &WorldModelConfig) -> Result<Checkpoint> {
        Checkpoint::capture(
            Component::WorldModel,
            &WorldModelHyper {
                shape: self.shape,
                config: config.clone(),
            },
            self,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, WorldModelConfig)> {
        let hyper: WorldModelHyper = ck.hyperparameters(Component::WorldModel)?;
        let mut model = WorldModel::new(hyper.shape, hyper.config.dropout, &mut stream_rng(0, 0));
        ck.restore_into(Component::WorldModel, &mut model)?;
        Ok((model, hyper.config))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub n_train: usize,
    pub n_val: usize,
}

fn weighted_loss(model: &WorldModel<f32>, set: &[&Transition], cfg: &WorldModelConfig) -> Result<f64> {
    let mut total = 0.0;
    for chunk in set.chunks(512) {
        let pred = model.predict_batch(chunk)?;
        for (p, t) in pred.iter().zip(chunk) {
            let e = *p as f64 - t.label as f64;
            total += cfg.sample_weight(t.target_personality()) * e * e;
        }
    }
    Ok(total / set.len().max(1) as f64)
}

/// Shuffled split: the first `1 − val_split` share trains, the rest validates.
pub fn split_dataset<'a>(data: &'a [Transition], val_split: f64, seed: u64) -> (Vec<&'a Transition>, Vec<&'a Transition>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut stream_rng(seed, 0x5917));
    let n_val = ((data.len() as f64 * val_split).round() as usize).clamp(1, data.len().saturating_sub(1).max(1));
    let (train, val) = idx.split_at(data.len() - n_val);
    (train.iter().map(|&i| &data[i]).collect(), val.iter().map(|&i| &data[i]).collect())
}

/// Weighted-MSE regression with Adam and a linear learning-rate decay;
/// returns the parameters with the lowest validation loss.
pub fn train(data: &[Transition], shape: WorldModelShape, cfg: &WorldModelConfig, seed: u64) -> Result<(WorldModel<f32>, TrainReport)> {
    if data.len() < 10 * cfg.batch_size {
        return Err(Error::InvalidInput(format!(
            "world model needs at least {} transitions, got {}",
            10 * cfg.batch_size,
            data.len()
        )));
    }
    let (train_set, val_set) = split_dataset(data, cfg.val_split, seed);
    let mut rng = stream_rng(seed, 1);
    let mut model = WorldModel::<f32>::new(shape, cfg.dropout, &mut rng);
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
    let mut best = (model.clone(), f64::INFINITY, 0usize);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let weights: Vec<f32> = batch.iter().map(|t| cfg.sample_weight(t.target_personality()) as f32).collect();
            let (loss, grad) = model.loss_and_grad(batch, &weights, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite world-model loss at epoch {epoch}, batch {bi}")));
            }
            sum += loss as f64 * batch.len() as f64;
            opt.set_learning_rate(schedule.value(opt.steps()));
            opt.update(&mut model, &grad)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {bi}: {e}")))?;
        }
        let train_loss = sum / order.len() as f64;
        let val_loss = weighted_loss(&model, &val_set, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        if val_loss < best.1 {
            best = (model.clone(), val_loss, epoch);
        }
        curve.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
    }
    let report = TrainReport {
        curve,
        best_epoch: best.2,
        best_val_loss: best.1,
        n_train: train_set.len(),
        n_val: val_set.len(),
    };
    Ok((best.0, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmEvaluation {
    pub overall: Metrics,
    /// Stubborn, Suggestible, Neutral (entries with n = 0 are kept).
    pub per_personality: Vec<(Personality, Metrics)>,
}

impl WmEvaluation {
    /// `personality,mae,accuracy,n`, one row per benign type plus `overall`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("personality,mae,accuracy,n\n");
        for (p, m) in &self.per_personality {
            s.push_str(&format!("{},{:.6},{:.6},{}\n", p.name(), m.mae, m.accuracy, m.n));
        }
        let m = self.overall;
        s.push_str(&format!("overall,{:.6},{:.6},{}\n", m.mae, m.accuracy, m.n));
        s
    }
}

/// MAE and rounded-prediction accuracy of any predictor over `set`.
pub fn score_predictions<'a, I>(pairs: I) -> WmEvaluation
where
    I: IntoIterator<Item = (Personality, f64, i32)>,
{
    let mut acc = [(0.0, 0usize, 0usize); 3];
    for (p, pred, label) in pairs {
        let k = p.id();
        acc[k].0 += (pred - label as f64).abs();
        acc[k].1 += usize::from(round_position(pred) == label);
        acc[k].2 += 1;
    }
    let metrics = |(abs, hit, n): (f64, usize, usize)| Metrics {
        mae: if n > 0 { abs / n as f64 } else { 0.0 },
        accuracy: if n > 0 { hit as f64 / n as f64 } else { 0.0 },
        n,
    };
    let total = acc.iter().fold((0.0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    WmEvaluation {
        overall: metrics(total),
        per_personality: Personality::BENIGN.iter().map(|&p| (p, metrics(acc[p.id()]))).collect(),
    }
}

pub fn evaluate(model: &WorldModel<f32>, held_out: &[&Transition]) -> Result<WmEvaluation> {
    if held_out.is_empty() {
        return Err(Error::InvalidInput("empty held-out set".into()));
    }
    let mut pairs = Vec::with_capacity(held_out.len());
    for chunk in held_out.chunks(512) {
        let pred = model.predict_batch(chunk)?;
        pairs.extend(chunk.iter().zip(pred).map(|(t, p)| (t.target_personality(), p as f64, t.label)));
    }
    Ok(score_predictions(pairs))
}

/// Trivial predictor that keeps every agent where it is.
pub fn persistence_baseline(held_out: &[&Transition]) -> WmEvaluation {
    score_predictions(held_out.iter().map(|t| (t.target_personality(), t.current_position() as f64, t.label)))
}

/// Predicts the mean training label for everyone.
pub fn global_mean_baseline(train: &[&Transition], held_out: &[&Transition]) -> WmEvaluation {
    let mean = train.iter().map(|t| t.label as f64).sum::<f64>() / train.len().max(1) as f64;
    score_predictions(held_out.iter().map(|t| (t.target_personality(), mean, t.label)))
}

/// `predictor,personality,mae,accuracy,n` for several predictors side by side.
pub fn comparison_csv(rows: &[(&str, &WmEvaluation)]) -> String {
    let mut s = String::from("predictor,personality,mae,accuracy,n\n");
    for (name, ev) in rows {
        for line in ev.to_csv().lines().skip(1) {
            s.push_str(name);
            s.push(',');
            s.push_str(line);
            s.push('\n');
        }
    }
    s
}

/// Read-only surrogate transition built on a trained model.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub model: WorldModel<f32>,
    pub noise_std: f64,
}

impl Surrogate {
    pub fn new(model: WorldModel<f32>, noise_std: f64) -> Self {
        Self { model, noise_std }
    }

    pub fn max_position(&self) -> i32 {
        self.model.shape.max_position
    }

    /// Next benign positions given current benign positions/personalities and
    /// the insider's declaration. Deterministic when `noise_std` is 0.
    pub fn step(&self, benign: &[i32], personalities: &[Personality], attacker_position: i32, rng: Option<&mut SimRng>) -> Result<Vec<i32>> {
        let raw = self.predict_many(&[SurrogateQuery {
            benign,
            personalities,
            attacker_position,
        }])?;
        Ok(self.finish(&raw[0], rng))
    }

    /// Unrounded predictions for several states in one batched forward pass.
    pub fn predict_many(&self, queries: &[SurrogateQuery<'_>]) -> Result<Vec<Vec<f64>>> {
        let mut samples = Vec::new();
        for q in queries {
            let mut all_pos = q.benign.to_vec();
            all_pos.push(q.attacker_position);
            let mut all_per = q.personalities.to_vec();
            all_per.push(Personality::Malicious);
            for i in 0..q.benign.len() {
                let (positions, personalities) = canonical_order(i, &all_pos, &all_per);
                samples.push(Transition {
                    episode_id: 0,
                    round: 0,
                    target: i,
                    positions,
                    personalities,
                    attacker_position: q.attacker_position,
                    label: 0,
                });
            }
        }
        let refs: Vec<&Transition> = samples.iter().collect();
        let pred = self.model.predict_batch(&refs)?;
        if pred.iter().any(|p| !p.is_finite()) {
            return Err(Error::Training("world model produced a non-finite prediction".into()));
        }
        let mut it = pred.into_iter().map(|p| p as f64);
        Ok(queries.iter().map(|q| it.by_ref().take(q.benign.len()).collect()).collect())
    }

    /// Adds optional noise, rounds and clamps raw predictions to positions.
    pub fn finish(&self, raw: &[f64], mut rng: Option<&mut SimRng>) -> Vec<i32> {
        let l = self.max_position();
        raw.iter()
            .map(|&p| {
                let mut v = p;
                if self.noise_std > 0.0 {
                    if let Some(r) = rng.as_deref_mut() {
                        v += self.noise_std * r.sample::<f64, _>(StandardNormal);
                    }
                }
                round_position(v).clamp(0, l)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SurrogateQuery<'a> {
    pub benign: &'a [i32],
    pub personalities: &'a [Personality],
    pub attacker_position: i32,
}
