//! Gated recurrent unit cell (reset / update / candidate gates, PyTorch layout).
//!
//! ```text
//! r  = σ(x·W_ir + b_ir + h·W_hr + b_hr)
//! z  = σ(x·W_iz + b_iz + h·W_hz + b_hz)
//! n  = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```
//!
//! Gate columns are packed `[r | z | n]` in `w_ih: [in, 3h]` and `w_hh: [h, 3h]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Parameterized;
use super::tensor::{matmul, matmul_a_bt, matmul_at_b_acc, Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell<T: Float = f32> {
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub b_ih: Tensor<T>,
    pub b_hh: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct GruStepCache<T> {
    x: Vec<T>,
    h: Vec<T>,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    gh_n: Vec<T>,
    batch: usize,
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Float> GruCell<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Tensor::uniform(&[in_dim, 3 * hidden], bound, rng),
            w_hh: Tensor::uniform(&[hidden, 3 * hidden], bound, rng),
            b_ih: Tensor::uniform(&[3 * hidden], bound, rng),
            b_hh: Tensor::uniform(&[3 * hidden], bound, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_ih.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    fn gates(&self, x: &[T], h: &[T], batch: usize) -> Result<(Vec<T>, Vec<T>)> {
        let (i, hd) = (self.in_dim(), self.hidden());
        if x.len() != batch * i {
            return Err(Error::Dimension(format!(
                "gru input length {} does not match [{batch}, {i}]",
                x.len()
            )));
        }
        if h.len() != batch * hd {
            return Err(Error::Dimension(format!(
                "gru hidden length {} does not match [{batch}, {hd}]",
                h.len()
            )));
        }
        let mut gi = vec![T::zero(); batch * 3 * hd];
        let mut gh = vec![T::zero(); batch * 3 * hd];
        matmul(x, self.w_ih.data(), batch, i, 3 * hd, &mut gi);
        matmul(h, self.w_hh.data(), batch, hd, 3 * hd, &mut gh);
        for (row_i, row_h) in gi.chunks_exact_mut(3 * hd).zip(gh.chunks_exact_mut(3 * hd)) {
            for j in 0..3 * hd {
                row_i[j] += self.b_ih.data()[j];
                row_h[j] += self.b_hh.data()[j];
            }
        }
        Ok((gi, gh))
    }

    pub fn step(&self, h: &[T], x: &[T], batch: usize) -> Result<(Vec<T>, GruStepCache<T>)> {
        let hd = self.hidden();
        let (gi, gh) = self.gates(x, h, batch)?;
        let mut r = vec![T::zero(); batch * hd];
        let mut z = vec![T::zero(); batch * hd];
        let mut n = vec![T::zero(); batch * hd];
        let mut gh_n = vec![T::zero(); batch * hd];
        let mut out = vec![T::zero(); batch * hd];
        for b in 0..batch {
            let gi = &gi[b * 3 * hd..(b + 1) * 3 * hd];
            let gh = &gh[b * 3 * hd..(b + 1) * 3 * hd];
            for j in 0..hd {
                let k = b * hd + j;
                r[k] = sigmoid(gi[j] + gh[j]);
                z[k] = sigmoid(gi[hd + j] + gh[hd + j]);
                gh_n[k] = gh[2 * hd + j];
                n[k] = (gi[2 * hd + j] + r[k] * gh_n[k]).tanh();
                out[k] = (T::one() - z[k]) * n[k] + z[k] * h[k];
            }
        }
        Ok((
            out,
            GruStepCache {
                x: x.to_vec(),
                h: h.to_vec(),
                r,
                z,
                n,
                gh_n,
                batch,
            },
        ))
    }

    /// Accumulates parameter gradients; returns `(dL/dx, dL/dh_prev)`.
    pub fn step_backward(&self, cache: &GruStepCache<T>, d_out: &[T], grad: &mut GruCell<T>) -> (Vec<T>, Vec<T>) {
        let (i, hd, m) = (self.in_dim(), self.hidden(), cache.batch);
        let mut dgi = vec![T::zero(); m * 3 * hd];
        let mut dgh = vec![T::zero(); m * 3 * hd];
        let mut dh = vec![T::zero(); m * hd];
        for b in 0..m {
            for j in 0..hd {
                let k = b * hd + j;
                let (r, z, n) = (cache.r[k], cache.z[k], cache.n[k]);
                let g = d_out[k];
                let dz = g * (cache.h[k] - n);
                let dn = g * (T::one() - z);
                dh[k] = g * z;
                let dpre_n = dn * (T::one() - n * n);
                let dr = dpre_n * cache.gh_n[k];
                let dpre_r = dr * r * (T::one() - r);
                let dpre_z = dz * z * (T::one() - z);
                let base = b * 3 * hd;
                dgi[base + j] = dpre_r;
                dgi[base + hd + j] = dpre_z;
                dgi[base + 2 * hd + j] = dpre_n;
                dgh[base + j] = dpre_r;
                dgh[base + hd + j] = dpre_z;
                dgh[base + 2 * hd + j] = dpre_n * r;
            }
        }
        matmul_at_b_acc(&cache.x, &dgi, m, i, 3 * hd, grad.w_ih.data_mut());
        matmul_at_b_acc(&cache.h, &dgh, m, hd, 3 * hd, grad.w_hh.data_mut());
        for b in 0..m {
            for j in 0..3 * hd {
                grad.b_ih.data_mut()[j] += dgi[b * 3 * hd + j];
                grad.b_hh.data_mut()[j] += dgh[b * 3 * hd + j];
            }
        }
        let mut dx = vec![T::zero(); m * i];
        matmul_a_bt(&dgi, self.w_ih.data(), m, 3 * hd, i, &mut dx);
        let mut dh_prev = vec![T::zero(); m * hd];
        matmul_a_bt(&dgh, self.w_hh.data(), m, 3 * hd, hd, &mut dh_prev);
        for (a, b) in dh_prev.iter_mut().zip(dh) {
            *a += b;
        }
        (dx, dh_prev)
    }

    /// Runs the cell over `steps` (each `[batch, in]`) from a zero state.
    pub fn run(&self, steps: &[Vec<T>], batch: usize) -> Result<(Vec<T>, Vec<GruStepCache<T>>)> {
        let mut h = vec![T::zero(); batch * self.hidden()];
        let mut caches = Vec::with_capacity(steps.len());
        for x in steps {
            let (nh, c) = self.step(&h, x, batch)?;
            caches.push(c);
            h = nh;
        }
        Ok((h, caches))
    }

    /// Backpropagation through time from the final hidden state.
    /// Returns per-step input gradients.
    pub fn run_backward(&self, caches: &[GruStepCache<T>], d_final: &[T], grad: &mut GruCell<T>) -> Vec<Vec<T>> {
        let mut dh = d_final.to_vec();
        let mut dxs = vec![Vec::new(); caches.len()];
        for (t, c) in caches.iter().enumerate().rev() {
            let (dx, dh_prev) = self.step_backward(c, &dh, grad);
            dxs[t] = dx;
            dh = dh_prev;
        }
        dxs
    }
}

impl<T: Float> Parameterized<T> for GruCell<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("w_ih".into(), &self.w_ih),
            ("w_hh".into(), &self.w_hh),
            ("b_ih".into(), &self.b_ih),
            ("b_hh".into(), &self.b_hh),
        ]
    }
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("w_ih".into(), &mut self.w_ih),
            ("w_hh".into(), &mut self.w_hh),
            ("b_ih".into(), &mut self.b_ih),
            ("b_hh".into(), &mut self.b_hh),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar re-derivation of the gate equations, element by element.
    fn oracle_step(c: &GruCell<f64>, h: &[f64], x: &[f64]) -> Vec<f64> {
        let (i, hd) = (c.in_dim(), c.hidden());
        let w_ih = |a: usize, col: usize| c.w_ih.data()[a * 3 * hd + col];
        let w_hh = |a: usize, col: usize| c.w_hh.data()[a * 3 * hd + col];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        (0..hd)
            .map(|j| {
                let lin_x = |gate: usize| (0..i).map(|a| x[a] * w_ih(a, gate * hd + j)).sum::<f64>() + c.b_ih.data()[gate * hd + j];
                let lin_h = |gate: usize| (0..hd).map(|a| h[a] * w_hh(a, gate * hd + j)).sum::<f64>() + c.b_hh.data()[gate * hd + j];
                let r = sig(lin_x(0) + lin_h(0));
                let z = sig(lin_x(1) + lin_h(1));
                let n = (lin_x(2) + r * lin_h(2)).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }

    #[test]
    fn zero_parameters_keep_zero_state() {
        let mut c: GruCell<f64> = GruCell::new(3, 4, &mut ChaCha8Rng::seed_from_u64(1));
        for (_, t) in c.named_params_mut() {
            t.fill(0.0);
        }
        let (h, _) = c.step(&[0.0; 4], &[5.0, -2.0, 9.0], 1).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_update_gate_copies_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c: GruCell<f64> = GruCell::new(3, 4, &mut rng);
        for j in 4..8 {
            c.b_ih.data_mut()[j] = 20.0;
            c.b_hh.data_mut()[j] = 20.0;
        }
        let h = [0.3, -0.7, 0.1, 0.9];
        let (h2, _) = c.step(&h, &[0.5, 0.5, -0.5], 1).unwrap();
        for (a, b) in h.iter().zip(&h2) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_scalar_oracle_and_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c: GruCell<f64> = GruCell::new(5, 6, &mut rng);
            let h: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (got, _) = c.step(&h, &x, 1).unwrap();
            let want = oracle_step(&c, &h, &x);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
                assert!(a.abs() < 1.0);
            }
        }
    }

    #[test]
    fn hidden_dimension_mismatch_is_an_error() {
        let c: GruCell<f32> = GruCell::new(2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(c.step(&[0.0; 2], &[0.0; 2], 1).is_err());
        assert!(c.step(&[0.0; 3], &[0.0; 3], 1).is_err());
    }
}
