use super::GradientStore;
use crate::cloud::Model;
use crate::real::Real;

/// Losses of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub render_loss: f64,
    pub l1_loss: f64,
    pub total: f64,
    pub psnr: f64,
}

impl LossReport {
    pub fn new(render_loss: f64, l1_loss: f64, alpha: f64) -> Self {
        Self {
            render_loss,
            l1_loss,
            total: total_loss(render_loss, l1_loss, alpha),
            psnr: batch_psnr(render_loss),
        }
    }
}

/// Mean over rays of the squared L2 colour error.
pub fn render_loss<T: Real>(pred: &[[T; 3]], truth: &[[T; 3]]) -> f64 {
    assert_eq!(
        pred.len(),
        truth.len(),
        "prediction and truth batches differ in size"
    );
    if pred.is_empty() {
        return 0.0;
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            (0..3)
                .map(|c| (p[c].as_f64() - t[c].as_f64()).powi(2))
                .sum::<f64>()
        })
        .sum();
    sum / pred.len() as f64
}

/// Adds `scale · sign(p)` for every `p` in `params` to `grad`, with `sign(0) = 0`.
pub fn add_l1_subgradient<T: Real>(params: &[T], scale: T, grad: &mut [T]) {
    for (g, &p) in grad.iter_mut().zip(params) {
        if p > T::zero() {
            *g += scale;
        } else if p < T::zero() {
            *g -= scale;
        }
    }
}

/// Accumulates the gradient of `alpha · l1_density_loss(model)` into the
/// density entries of `grads`.
pub fn accumulate_l1_gradient<T: Real>(model: &Model<T>, alpha: f64, grads: &mut GradientStore<T>) {
    let scale = T::lit(alpha / model.density_entry_count().max(1) as f64);
    for (s, cloud) in model.scales.iter().enumerate() {
        let n = cloud.shape().density_len();
        for (i, t) in cloud.tensors().iter().enumerate() {
            add_l1_subgradient(&t.factors()[..n], scale, &mut grads.tensor_mut(s, i)[..n]);
        }
    }
}

/// Mean absolute value of every density factor entry across all tensors and scales.
pub fn l1_density_loss<T: Real>(model: &Model<T>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for cloud in &model.scales {
        for t in cloud.tensors() {
            let d = t.density_factors();
            sum += d.iter().map(|v| v.as_f64().abs()).sum::<f64>();
            count += d.len();
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn total_loss(render_loss: f64, l1_loss: f64, alpha: f64) -> f64 {
    render_loss + alpha * l1_loss
}

/// PSNR of a batch from its per-ray summed squared error (three channels).
pub fn batch_psnr(render_loss: f64) -> f64 {
    let mse = render_loss / 3.0;
    if mse < 1e-10 {
        100.0
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_loss_examples() {
        let t = vec![[0.2, 0.3, 0.4]; 5];
        assert_eq!(render_loss(&t, &t), 0.0);
        let p: Vec<[f64; 3]> = t.iter().map(|c| [c[0] + 0.1, c[1], c[2]]).collect();
        assert!((render_loss(&p, &t) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn render_loss_matches_direct_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p: Vec<[f32; 3]> = (0..97)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let t: Vec<[f32; 3]> = (0..97)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let mut acc = 0.0f64;
        for i in 0..97 {
            for c in 0..3 {
                let d = p[i][c] as f64 - t[i][c] as f64;
                acc += d * d;
            }
        }
        assert!((render_loss(&p, &t) - acc / 97.0).abs() <= 1e-7);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.3, 5.0, 0.0), 0.3);
        assert_eq!(total_loss(0.3, 0.0, 1e-5), 0.3);
        assert!((total_loss(0.01, 2.0, 1e-5) - 0.01002).abs() < 1e-15);
    }
}
