use crate::cloud::Model;
use crate::decode::ColorMlp;
use crate::real::Real;

/// Gradient buffers mirroring every trainable parameter. Tensor buffers
/// track which tensors were written so zeroing and reduction only visit those.
#[derive(Clone, Debug)]
pub struct GradientStore<T> {
    tensors: Vec<Vec<Vec<T>>>,
    touched: Vec<Vec<bool>>,
    touched_list: Vec<Vec<u32>>,
    pub appearance: Vec<Vec<T>>,
    pub mlp: ColorMlp<T>,
}

impl<T: Real> GradientStore<T> {
    pub fn for_model(model: &Model<T>) -> Self {
        Self {
            tensors: model
                .scales
                .iter()
                .map(|c| {
                    c.tensors()
                        .iter()
                        .map(|t| vec![T::zero(); t.param_count()])
                        .collect()
                })
                .collect(),
            touched: model.scales.iter().map(|c| vec![false; c.len()]).collect(),
            touched_list: model.scales.iter().map(|_| Vec::new()).collect(),
            appearance: model
                .decoder
                .appearance
                .iter()
                .map(|b| vec![T::zero(); b.entries().len()])
                .collect(),
            mlp: model.decoder.mlp.zeros_like(),
        }
    }

    /// True when every buffer has the shape of the corresponding parameter.
    pub fn matches(&self, model: &Model<T>) -> bool {
        self.tensors.len() == model.scales.len()
            && self.tensors.iter().zip(&model.scales).all(|(g, c)| {
                g.len() == c.len()
                    && g.iter()
                        .zip(c.tensors())
                        .all(|(b, t)| b.len() == t.param_count())
            })
            && self
                .appearance
                .iter()
                .zip(&model.decoder.appearance)
                .all(|(g, b)| g.len() == b.entries().len())
            && self
                .mlp
                .buffers()
                .zip(model.decoder.mlp.buffers())
                .all(|(a, b)| a.len() == b.len())
    }

    /// Mutable gradient of one tensor, marking it touched.
    #[inline]
    pub fn tensor_mut(&mut self, scale: usize, tensor: usize) -> &mut [T] {
        if !self.touched[scale][tensor] {
            self.touched[scale][tensor] = true;
            self.touched_list[scale].push(tensor as u32);
        }
        &mut self.tensors[scale][tensor]
    }

    pub fn tensor(&self, scale: usize, tensor: usize) -> &[T] {
        &self.tensors[scale][tensor]
    }

    pub fn is_touched(&self, scale: usize, tensor: usize) -> bool {
        self.touched[scale][tensor]
    }

    pub fn touched(&self, scale: usize) -> &[u32] {
        &self.touched_list[scale]
    }

    pub fn zero(&mut self) {
        for ((bufs, flags), list) in self
            .tensors
            .iter_mut()
            .zip(&mut self.touched)
            .zip(&mut self.touched_list)
        {
            for &i in list.iter() {
                bufs[i as usize].fill(T::zero());
                flags[i as usize] = false;
            }
            list.clear();
        }
        for g in &mut self.appearance {
            g.fill(T::zero());
        }
        for g in self.mlp.buffers_mut() {
            g.fill(T::zero());
        }
    }

    /// `self += other`, visiting only tensors `other` touched.
    pub fn add_assign(&mut self, other: &GradientStore<T>) {
        for s in 0..other.tensors.len() {
            for &i in &other.touched_list[s] {
                let src = &other.tensors[s][i as usize];
                for (d, &v) in self.tensor_mut(s, i as usize).iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        for (d, s) in self.appearance.iter_mut().zip(&other.appearance) {
            for (a, &b) in d.iter_mut().zip(s) {
                *a += b;
            }
        }
        for (d, s) in self.mlp.buffers_mut().zip(other.mlp.buffers()) {
            for (a, &b) in d.iter_mut().zip(s) {
                *a += b;
            }
        }
    }

    /// Largest absolute gradient entry.
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for (s, bufs) in self.tensors.iter().enumerate() {
            for &i in &self.touched_list[s] {
                for v in &bufs[i as usize] {
                    m = m.max(v.as_f64().abs());
                }
            }
        }
        for v in self
            .appearance
            .iter()
            .flatten()
            .chain(self.mlp.buffers().flatten())
        {
            m = m.max(v.as_f64().abs());
        }
        m
    }

    /// Re-shapes tensor buffers after the model's resolutions changed.
    pub fn resize_for(&mut self, model: &Model<T>) {
        *self = Self::for_model(model);
    }
}
