use crate::cloud::Model;
use crate::decode::ColorMlp;
use crate::error::Result;
use crate::factor_grid::upsample_buffer;
use crate::real::Real;

/// Adam hyper-parameters shared by both parameter groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over a flat buffer. `t` is the 1-based step.
#[inline]
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    hp: AdamParams,
    t: u64,
) {
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let c1 = T::lit(1.0 / (1.0 - hp.beta1.powf(t as f64)));
    let c2 = T::lit(1.0 / (1.0 - hp.beta2.powf(t as f64)));
    let (lr, eps) = (T::lit(lr), T::lit(hp.eps));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        *p -= lr * (*m * c1) / ((*v * c2).sqrt() + eps);
    }
}

/// First and second moments for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Number of updates applied so far.
    pub step: u64,
    pub tensors_m: Vec<Vec<Vec<T>>>,
    pub tensors_v: Vec<Vec<Vec<T>>>,
    pub appearance_m: Vec<Vec<T>>,
    pub appearance_v: Vec<Vec<T>>,
    pub mlp_m: ColorMlp<T>,
    pub mlp_v: ColorMlp<T>,
}

impl<T: Real> AdamState<T> {
    pub fn for_model(model: &Model<T>) -> Self {
        let tensors: Vec<Vec<Vec<T>>> = model
            .scales
            .iter()
            .map(|c| {
                c.tensors()
                    .iter()
                    .map(|t| vec![T::zero(); t.param_count()])
                    .collect()
            })
            .collect();
        let appearance: Vec<Vec<T>> = model
            .decoder
            .appearance
            .iter()
            .map(|b| vec![T::zero(); b.entries().len()])
            .collect();
        Self {
            step: 0,
            tensors_m: tensors.clone(),
            tensors_v: tensors,
            appearance_m: appearance.clone(),
            appearance_v: appearance,
            mlp_m: model.decoder.mlp.zeros_like(),
            mlp_v: model.decoder.mlp.zeros_like(),
        }
    }

    /// True when every moment buffer has its parameter's shape.
    pub fn matches(&self, model: &Model<T>) -> bool {
        let tensors_ok = |b: &Vec<Vec<Vec<T>>>| {
            b.len() == model.scales.len()
                && b.iter().zip(&model.scales).all(|(g, c)| {
                    g.len() == c.len()
                        && g.iter()
                            .zip(c.tensors())
                            .all(|(x, t)| x.len() == t.param_count())
                })
        };
        let app_ok = |b: &Vec<Vec<T>>| {
            b.len() == model.decoder.appearance.len()
                && b.iter()
                    .zip(&model.decoder.appearance)
                    .all(|(g, m)| g.len() == m.entries().len())
        };
        let mlp_ok = |m: &ColorMlp<T>| {
            m.buffers()
                .zip(model.decoder.mlp.buffers())
                .all(|(a, b)| a.len() == b.len())
        };
        tensors_ok(&self.tensors_m)
            && tensors_ok(&self.tensors_v)
            && app_ok(&self.appearance_m)
            && app_ok(&self.appearance_v)
            && mlp_ok(&self.mlp_m)
            && mlp_ok(&self.mlp_v)
    }

    /// Linearly resamples the tensor moments of `scale` alongside its factors.
    /// `model` must still hold the pre-upsample shapes.
    pub fn upsample_scale(
        &mut self,
        model: &Model<T>,
        scale: usize,
        new_res: [usize; 3],
    ) -> Result<()> {
        let shape = model.scales[scale].shape();
        for buf in self.tensors_m[scale]
            .iter_mut()
            .chain(self.tensors_v[scale].iter_mut())
        {
            *buf = upsample_buffer(buf, shape, new_res)?;
        }
        Ok(())
    }
}
