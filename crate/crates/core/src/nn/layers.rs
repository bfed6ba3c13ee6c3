//! Dense, embedding and dropout layers with hand-written backward passes.
//!
//! Activations travel between layers as flat row-major `Vec<T>` buffers of
//! shape `[batch, dim]`; parameters live in [`Tensor`]s so they can be
//! checkpointed and optimized uniformly through [`Parameterized`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative in terms of the pre-activation `z` and output `y`.
    /// ReLU'(0) is taken as 0.
    #[inline]
    pub fn derivative<T: Float>(self, z: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

/// Anything that owns an ordered list of named parameter tensors.
///
/// The order returned here is the serialization order of checkpoints and the
/// slot order of optimizer state, so implementations must keep it fixed.
pub trait Parameterized<T: Float> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    /// Same structure with every parameter zeroed; used as a gradient accumulator.
    fn zeroed(&self) -> Self
    where
        Self: Sized + Clone,
    {
        let mut g = self.clone();
        for (_, t) in g.named_params_mut() {
            t.fill(T::zero());
        }
        g
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.all_finite())
    }
}

pub(crate) fn prefixed<'a, X: 'a>(prefix: &'a str, v: Vec<(String, X)>) -> impl Iterator<Item = (String, X)> + 'a {
    v.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

/// Copies parameter values between two models of identical structure,
/// converting the scalar type (used to build 64-bit gradient-check twins).
pub fn copy_params<T: Float, U: Float>(
    src: &impl Parameterized<T>,
    dst: &mut impl Parameterized<U>,
) -> Result<()> {
    let src = src.named_params();
    let mut dst = dst.named_params_mut();
    if src.len() != dst.len() {
        return Err(Error::Dimension(format!(
            "parameter count mismatch: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    for ((sn, s), (dn, d)) in src.iter().zip(dst.iter_mut()) {
        if sn != dn || s.shape() != d.shape() {
            return Err(Error::Dimension(format!(
                "parameter {sn} {:?} does not match {dn} {:?}",
                s.shape(),
                d.shape()
            )));
        }
        **d = s.cast();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T: Float = f32> {
    /// `[in, out]`
    pub w: Tensor<T>,
    /// `[out]`
    pub b: Tensor<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct DenseCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    out: Vec<T>,
    batch: usize,
}

impl<T: Float> Dense<T> {
    /// PyTorch-style uniform init, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: Tensor::uniform(&[in_dim, out_dim], bound, rng),
            b: Tensor::uniform(&[out_dim], bound, rng),
            activation,
        }
    }

    pub fn from_parts(w: Tensor<T>, b: Tensor<T>, activation: Activation) -> Result<Self> {
        if w.shape().len() != 2 || b.shape() != [w.shape()[1]] {
            return Err(Error::Dimension(format!(
                "dense weight {:?} incompatible with bias {:?}",
                w.shape(),
                b.shape()
            )));
        }
        Ok(Self { w, b, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    fn check(&self, input: &[T], batch: usize) -> Result<()> {
        if input.len() != batch * self.in_dim() {
            return Err(Error::Dimension(format!(
                "dense input [{batch}, {}] does not match weight {:?}",
                input.len() / batch.max(1),
                self.w.shape()
            )));
        }
        Ok(())
    }

    fn affine(&self, input: &[T], batch: usize) -> Vec<T> {
        let (k, n) = (self.in_dim(), self.out_dim());
        let mut pre = vec![T::zero(); batch * n];
        matmul(input, self.w.data(), batch, k, n, &mut pre);
        let b = self.b.data();
        for row in pre.chunks_exact_mut(n) {
            for (z, &bj) in row.iter_mut().zip(b) {
                *z += bj;
            }
        }
        pre
    }

    pub fn infer(&self, input: &[T], batch: usize) -> Result<Vec<T>> {
        self.check(input, batch)?;
        let mut y = self.affine(input, batch);
        let act = self.activation;
        y.iter_mut().for_each(|v| *v = act.apply(*v));
        Ok(y)
    }

    pub fn forward(&self, input: &[T], batch: usize) -> Result<(Vec<T>, DenseCache<T>)> {
        self.check(input, batch)?;
        let pre = self.affine(input, batch);
        let act = self.activation;
        let out: Vec<T> = pre.iter().map(|&z| act.apply(z)).collect();
        Ok((
            out.clone(),
            DenseCache {
                input: input.to_vec(),
                pre,
                out,
                batch,
            },
        ))
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dinput`.
    pub fn backward(&self, cache: &DenseCache<T>, d_out: &[T], grad: &mut Dense<T>) -> Vec<T> {
        let (k, n, m) = (self.in_dim(), self.out_dim(), cache.batch);
        debug_assert_eq!(d_out.len(), m * n);
        let act = self.activation;
        let dz: Vec<T> = d_out
            .iter()
            .zip(cache.pre.iter().zip(&cache.out))
            .map(|(&g, (&z, &y))| g * act.derivative(z, y))
            .collect();
        matmul_at_b_acc(&cache.input, &dz, m, k, n, grad.w.data_mut());
        let gb = grad.b.data_mut();
        for row in dz.chunks_exact(n) {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![T::zero(); m * k];
        matmul_a_bt(&dz, self.w.data(), m, n, k, &mut dx);
        dx
    }
}

impl<T: Float> Parameterized<T> for Dense<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

/// Tensor-level entry point: `activation(input · W + b)` for `input` of shape `[.., in]`.
pub fn dense_forward<T: Float>(w: &Tensor<T>, b: &Tensor<T>, input: &Tensor<T>, activation: Activation) -> Result<Tensor<T>> {
    let last = *input.shape().last().unwrap_or(&0);
    if w.shape().len() != 2 || last != w.shape()[0] || b.shape() != [w.shape()[1]] {
        return Err(Error::Dimension(format!(
            "input {:?} incompatible with weight {:?} / bias {:?}",
            input.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let batch = input.len() / last;
    let layer = Dense::from_parts(w.clone(), b.clone(), activation)?;
    let out = layer.infer(input.data(), batch)?;
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = w.shape()[1];
    Tensor::new(shape, out)
}

/// A stack of dense layers applied in sequence, with optional dropout after
/// every hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T: Float = f32> {
    pub layers: Vec<Dense<T>>,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    layers: Vec<DenseCache<T>>,
    masks: Vec<Option<Vec<T>>>,
}

impl<T: Float> Mlp<T> {
    /// `dims = [in, h1, .., out]`; hidden layers use `hidden`, the last `last`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, last: Activation, dropout: f64, rng: &mut R) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| Dense::new(dims[i], dims[i + 1], if i + 1 == n { last } else { hidden }, rng))
            .collect();
        Self { layers, dropout }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn infer(&self, input: &[T], batch: usize) -> Result<Vec<T>> {
        let mut x = input.to_vec();
        for l in &self.layers {
            x = l.infer(&x, batch)?;
        }
        Ok(x)
    }

    /// Training-mode forward; dropout is applied after hidden layers when an rng is given.
    pub fn forward<R: Rng + ?Sized>(&self, input: &[T], batch: usize, mut rng: Option<&mut R>) -> Result<(Vec<T>, MlpCache<T>)> {
        let mut x = input.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let (y, c) = l.forward(&x, batch)?;
            caches.push(c);
            x = y;
            let mask = match rng.as_deref_mut() {
                Some(r) if i + 1 < n && self.dropout > 0.0 => Some(dropout_forward(&mut x, self.dropout, r)),
                _ => None,
            };
            masks.push(mask);
        }
        Ok((x, MlpCache { layers: caches, masks }))
    }

    pub fn backward(&self, cache: &MlpCache<T>, d_out: &[T], grad: &mut Mlp<T>) -> Vec<T> {
        let mut d = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if let Some(mask) = &cache.masks[i] {
                dropout_backward(&mut d, mask);
            }
            d = self.layers[i].backward(&cache.layers[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl<T: Float> Parameterized<T> for Mlp<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&i.to_string(), l.named_params()).collect::<Vec<_>>())
            .collect()
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                let p = i.to_string();
                prefixed(&p, l.named_params_mut()).collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Lookup table mapping integer ids to dense rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding<T: Float = f32> {
    /// `[vocab, dim]`
    pub table: Tensor<T>,
}

impl<T: Float> Embedding<T> {
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        // Roughly unit-variance rows without pulling in a normal sampler.
        Self {
            table: Tensor::uniform(&[vocab, dim], 3f64.sqrt(), rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, id: usize) -> Result<&[T]> {
        if id >= self.vocab() {
            return Err(Error::Dimension(format!(
                "embedding id {id} out of range for vocabulary {}",
                self.vocab()
            )));
        }
        let d = self.dim();
        Ok(&self.table.data()[id * d..(id + 1) * d])
    }

    /// `[ids.len(), dim]`
    pub fn forward(&self, ids: &[usize]) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(ids.len() * self.dim());
        for &id in ids {
            out.extend_from_slice(self.row(id)?);
        }
        Ok(out)
    }

    pub fn backward(&self, ids: &[usize], d_out: &[T], grad: &mut Embedding<T>) {
        let d = self.dim();
        let g = grad.table.data_mut();
        for (k, &id) in ids.iter().enumerate() {
            for j in 0..d {
                g[id * d + j] += d_out[k * d + j];
            }
        }
    }
}

impl<T: Float> Parameterized<T> for Embedding<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("table".into(), &self.table)]
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("table".into(), &mut self.table)]
    }
}

/// `dense(flatten(embedding(ids)))` where every row of `ids` holds `slots`
/// categorical ids. Computed through a per-(slot, id) projection table,
/// which is exact and far cheaper than the flattened matmul when the
/// vocabulary is small.
#[derive(Debug, Clone)]
pub struct SlotEmbedCache<T> {
    ids: Vec<usize>,
    pre: Vec<T>,
    out: Vec<T>,
    batch: usize,
    slots: usize,
}

fn slot_table<T: Float>(emb: &Embedding<T>, dense: &Dense<T>, slots: usize) -> Result<Vec<T>> {
    let (v, e, h) = (emb.vocab(), emb.dim(), dense.out_dim());
    if dense.in_dim() != slots * e {
        return Err(Error::Dimension(format!(
            "{slots} slots of width {e} do not match dense weight {:?}",
            dense.w.shape()
        )));
    }
    let mut table = vec![T::zero(); slots * v * h];
    for s in 0..slots {
        let w_s = &dense.w.data()[s * e * h..(s + 1) * e * h];
        matmul(emb.table.data(), w_s, v, e, h, &mut table[s * v * h..(s + 1) * v * h]);
    }
    Ok(table)
}

pub fn slot_embed_dense_forward<T: Float>(emb: &Embedding<T>, dense: &Dense<T>, ids: &[usize], slots: usize) -> Result<(Vec<T>, SlotEmbedCache<T>)> {
    let (v, h) = (emb.vocab(), dense.out_dim());
    if slots == 0 || ids.len() % slots != 0 {
        return Err(Error::Dimension(format!("{} ids do not split into rows of {slots}", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::Dimension(format!("embedding id {bad} out of range for vocabulary {v}")));
    }
    let table = slot_table(emb, dense, slots)?;
    let batch = ids.len() / slots;
    let mut pre = Vec::with_capacity(batch * h);
    for row in ids.chunks_exact(slots) {
        let start = pre.len();
        pre.extend_from_slice(dense.b.data());
        for (s, &id) in row.iter().enumerate() {
            let t = &table[(s * v + id) * h..(s * v + id + 1) * h];
            pre[start..].iter_mut().zip(t).for_each(|(z, &x)| *z += x);
        }
    }
    let act = dense.activation;
    let out: Vec<T> = pre.iter().map(|&z| act.apply(z)).collect();
    Ok((
        out.clone(),
        SlotEmbedCache {
            ids: ids.to_vec(),
            pre,
            out,
            batch,
            slots,
        },
    ))
}

pub fn slot_embed_dense_backward<T: Float>(emb: &Embedding<T>, dense: &Dense<T>, cache: &SlotEmbedCache<T>, d_out: &[T], grad_emb: &mut Embedding<T>, grad_dense: &mut Dense<T>) {
    let (v, e, h, slots) = (emb.vocab(), emb.dim(), dense.out_dim(), cache.slots);
    let act = dense.activation;
    // Sum dz over rows that share a (slot, id) pair.
    let mut pooled = vec![T::zero(); slots * v * h];
    let gb = grad_dense.b.data_mut();
    for r in 0..cache.batch {
        let dz: Vec<T> = (0..h)
            .map(|j| {
                let k = r * h + j;
                d_out[k] * act.derivative(cache.pre[k], cache.out[k])
            })
            .collect();
        gb.iter_mut().zip(&dz).for_each(|(g, &d)| *g += d);
        for s in 0..slots {
            let id = cache.ids[r * slots + s];
            let p = &mut pooled[(s * v + id) * h..(s * v + id + 1) * h];
            p.iter_mut().zip(&dz).for_each(|(a, &d)| *a += d);
        }
    }
    let mut d_table = vec![T::zero(); v * e];
    for s in 0..slots {
        let p_s = &pooled[s * v * h..(s + 1) * v * h];
        let w_s = &dense.w.data()[s * e * h..(s + 1) * e * h];
        matmul_at_b_acc(emb.table.data(), p_s, v, e, h, &mut grad_dense.w.data_mut()[s * e * h..(s + 1) * e * h]);
        matmul_a_bt(p_s, w_s, v, h, e, &mut d_table);
        grad_emb.table.data_mut().iter_mut().zip(&d_table).for_each(|(g, &d)| *g += d);
    }
}

/// Inverted dropout: zeroes entries with probability `rate` and scales the
/// survivors by `1/(1-rate)`. Returns the mask for the backward pass.
pub fn dropout_forward<T: Float, R: Rng + ?Sized>(x: &mut [T], rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::of_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = x
        .iter()
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

pub fn dropout_backward<T: Float>(d: &mut [T], mask: &[T]) {
    for (g, &m) in d.iter_mut().zip(mask) {
        *g *= m;
    }
}
