use rand::seq::index::sample;
use rand::Rng;

use super::layers::Parameterized;

/// Compares analytic gradients to central finite differences on up to
/// `max_coords` sampled coordinates (all of them when the model is small).
///
/// `loss` evaluates the scalar objective; `analytic` returns the gradient in a
/// model-shaped accumulator. Returns the worst
/// `|g_fd − g_an| / max(1, |g_fd|, |g_an|)`.
pub fn grad_check<M, L, A, R>(model: &M, loss: L, analytic: A, step: f64, max_coords: usize, rng: &mut R) -> f64
where
    M: Parameterized<f64> + Clone,
    L: Fn(&M) -> f64,
    A: Fn(&M) -> M,
    R: Rng + ?Sized,
{
    let grads = analytic(model);
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        sample(rng, total, max_coords).into_vec()
    };
    let locate = |mut flat: usize| {
        for (k, &s) in sizes.iter().enumerate() {
            if flat < s {
                return (k, flat);
            }
            flat -= s;
        }
        unreachable!()
    };
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for flat in picks {
        let (k, i) = locate(flat);
        let orig = probe.named_params()[k].1.data()[i];
        probe.named_params_mut()[k].1.data_mut()[i] = orig + step;
        let up = loss(&probe);
        probe.named_params_mut()[k].1.data_mut()[i] = orig - step;
        let down = loss(&probe);
        probe.named_params_mut()[k].1.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let an = grads.named_params()[k].1.data()[i];
        let rel = (fd - an).abs() / 1f64.max(fd.abs()).max(an.abs());
        worst = worst.max(rel);
    }
    worst
}
