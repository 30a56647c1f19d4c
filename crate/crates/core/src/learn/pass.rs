use super::GradientStore;
use crate::cloud::Model;
use crate::real::Real;
use crate::render::{RayTracer, Shading};

/// Scratch buffers for [`backprop_ray`].
#[derive(Clone, Debug, Default)]
pub struct BackpropScratch<T> {
    grad_features: Vec<T>,
    grad_comps: Vec<T>,
    weighted: Vec<T>,
}

/// Accumulates `∂(grad_pixel · pixel)/∂θ` for the ray last traced by
/// `tracer` into `grads`.
///
/// Compositing is differentiated with a suffix sum over later samples:
/// `∂c/∂σ_q = δ_q (T_{q+1} c_q − Σ_{k>q} w_k c_k − T_final · bg)`.
pub fn backprop_ray<T: Real>(
    tracer: &RayTracer<T>,
    model: &Model<T>,
    grad_pixel: [T; 3],
    grads: &mut GradientStore<T>,
    scratch: &mut BackpropScratch<T>,
) {
    let dot = |c: &[T; 3]| c[0] * grad_pixel[0] + c[1] * grad_pixel[1] + c[2] * grad_pixel[2];
    let decoder = &model.decoder;
    let dim = decoder.feature_dim();
    let mut suffix = tracer.t_final * dot(&tracer.background);
    for k in tracer.kept.iter().rev() {
        let cg = dot(&k.color);
        let d_sigma = k.delta * (k.trans_after * cg - suffix);
        suffix += k.weight * cg;

        let d_f = match tracer.shading {
            Shading::Decoded => d_sigma * decoder.activation.derivative(k.f_sigma),
            Shading::Bypass { .. } => {
                if k.f_sigma > T::zero() {
                    d_sigma
                } else {
                    T::zero()
                }
            }
        };
        let inv_cov = T::one() / T::from_count(k.n_covering as usize);
        let d_fs = d_f * inv_cov;

        let colored = k.decoded() && tracer.shading == Shading::Decoded;
        let mut comp_offset = 0usize;
        if colored {
            let slot = k.slot as usize;
            let grad_rgb = grad_pixel.map(|g| g * k.weight);
            let features = &tracer.features[slot * dim..(slot + 1) * dim];
            scratch.grad_features.clear();
            scratch.grad_features.resize(dim, T::zero());
            decoder.mlp.backward(
                features,
                &tracer.encoding,
                &tracer.caches[slot],
                grad_rgb,
                &mut grads.mlp,
                &mut scratch.grad_features,
            );
            for g in &mut scratch.grad_features {
                *g *= inv_cov;
            }
            comp_offset = tracer.comp_starts[slot] as usize;
        }

        for span in &tracer.spans[k.spans.0 as usize..k.spans.1 as usize] {
            let s = span.scale as usize;
            let cloud = &model.scales[s];
            let rank = cloud.shape().appearance_rank;
            if colored {
                let comps = &tracer.comps[comp_offset..comp_offset + rank];
                comp_offset += rank;
                scratch.grad_comps.clear();
                scratch.grad_comps.resize(rank, T::zero());
                decoder.appearance[s].backward(
                    comps,
                    &scratch.grad_features,
                    &mut grads.appearance[s],
                    &mut scratch.grad_comps,
                );
            }
            for n in &tracer.neighbors[span.start as usize..span.end as usize] {
                let tensor = &cloud.tensors()[n.tensor as usize];
                let loc = tensor.locate(k.position);
                let g = grads.tensor_mut(s, n.tensor as usize);
                if d_fs != T::zero() {
                    tensor.backprop_density(&loc, n.weight * d_fs, g);
                }
                if colored {
                    scratch.weighted.clear();
                    scratch
                        .weighted
                        .extend(scratch.grad_comps.iter().map(|&v| v * n.weight));
                    tensor.backprop_appearance(&loc, &scratch.weighted, g);
                }
            }
        }
    }
}
