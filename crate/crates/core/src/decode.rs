//! Decoding aggregated features into density and colour.
//!
//! Each scale owns a bias-free appearance matrix `B` (`P × R_c`) mapping CP
//! component activations to a `P`-dim appearance feature. Density is a
//! shifted softplus of the density feature; colour comes from a small ReLU
//! MLP over the appearance feature and an encoded view direction.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::{cast_slice, Real, Vec3};

#[inline(always)]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `ln(1 + e^x)` without overflow for large `x`.
#[inline(always)]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn normal_fill<T: Real, R: Rng + ?Sized>(buf: &mut [T], std: f64, rng: &mut R) {
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in buf {
        *v = T::lit(normal.sample(rng));
    }
}

/// Shared per-scale `P × R_c` matrix, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceMatrix<T> {
    rows: usize,
    cols: usize,
    entries: Vec<T>,
}

impl<T: Real> AppearanceMatrix<T> {
    pub fn new(rows: usize, cols: usize, entries: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(
                "appearance matrix needs P >= 1 and R_c >= 1",
            ));
        }
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "appearance matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "appearance matrix contains non-finite entries",
            ));
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.entries[i * n + i] = T::one();
        }
        Ok(m)
    }

    /// Fan-in scaled normal init (variance `1 / R_c`).
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(rows, cols)?;
        normal_fill(&mut m.entries, (1.0 / cols as f64).sqrt(), rng);
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [T] {
        &mut self.entries
    }

    /// `out = B · comps`.
    #[inline]
    pub fn apply_into(&self, comps: &[T], out: &mut [T]) {
        debug_assert_eq!(comps.len(), self.cols);
        for (row, o) in self.entries.chunks_exact(self.cols).zip(out.iter_mut()) {
            *o = row.iter().zip(comps).map(|(&b, &c)| b * c).sum();
        }
    }

    /// Gradients of `upstream · (B · comps)`: `grad_entries += upstream ⊗ comps`,
    /// `grad_comps += Bᵀ · upstream`.
    #[inline]
    pub fn backward(
        &self,
        comps: &[T],
        upstream: &[T],
        grad_entries: &mut [T],
        grad_comps: &mut [T],
    ) {
        for ((row, grow), &u) in self
            .entries
            .chunks_exact(self.cols)
            .zip(grad_entries.chunks_exact_mut(self.cols))
            .zip(upstream)
        {
            if u == T::zero() {
                continue;
            }
            for ((g, &c), (gc, &b)) in grow
                .iter_mut()
                .zip(comps)
                .zip(grad_comps.iter_mut().zip(row))
            {
                *g += u * c;
                *gc += u * b;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> AppearanceMatrix<U> {
        AppearanceMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: cast_slice(&self.entries),
        }
    }
}

/// Matrix-vector product with a dimension check.
pub fn apply_appearance_matrix<T: Real>(b: &AppearanceMatrix<T>, comps: &[T]) -> Result<Vec<T>> {
    if comps.len() != b.cols() {
        return Err(Error::DimensionMismatch(format!(
            "appearance matrix has {} columns, got {} components",
            b.cols(),
            comps.len()
        )));
    }
    let mut out = vec![T::zero(); b.rows()];
    b.apply_into(comps, &mut out);
    Ok(out)
}

/// Shifted softplus density activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityActivation<T> {
    pub shift: T,
}

impl<T: Real> Default for DensityActivation<T> {
    fn default() -> Self {
        Self {
            shift: T::lit(-10.0),
        }
    }
}

impl<T: Real> DensityActivation<T> {
    #[inline(always)]
    pub fn density(&self, f_sigma: T) -> T {
        softplus(f_sigma + self.shift)
    }

    /// `dσ/df`.
    #[inline(always)]
    pub fn derivative(&self, f_sigma: T) -> T {
        sigmoid(f_sigma + self.shift)
    }
}

pub fn density<T: Real>(activation: &DensityActivation<T>, f_sigma: T) -> T {
    activation.density(f_sigma)
}

pub const fn direction_encoding_len(n_freq: usize) -> usize {
    3 + 6 * n_freq
}

/// `[d, sin(2^k π d), cos(2^k π d)]` for `k < n_freq`; `d` is renormalized.
pub fn encode_direction_into<T: Real>(d: Vec3<T>, n_freq: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), direction_encoding_len(n_freq));
    let norm = d.norm();
    let d = if norm > T::zero() { d / norm } else { d };
    out[..3].copy_from_slice(&d.to_array());
    for k in 0..n_freq {
        let scale = T::lit(std::f64::consts::PI * (1u64 << k) as f64);
        for a in 0..3 {
            let x = d[a] * scale;
            out[3 + 6 * k + a] = x.sin();
            out[3 + 6 * k + 3 + a] = x.cos();
        }
    }
}

pub fn encode_direction<T: Real>(d: Vec3<T>, n_freq: usize) -> Vec<T> {
    let mut out = vec![T::zero(); direction_encoding_len(n_freq)];
    encode_direction_into(d, n_freq, &mut out);
    out
}

/// Dense layer, weights `outputs × inputs` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn forward_into(&self, input: &[T], out: &mut [T]) {
        for ((row, &b), o) in self
            .weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .zip(out.iter_mut())
        {
            *o = b + dot(row, input);
        }
    }

    fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            inputs: self.inputs,
            outputs: self.outputs,
            weight: cast_slice(&self.weight),
            bias: cast_slice(&self.bias),
        }
    }
}

#[inline(always)]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four accumulators let the compiler vectorize the f32 case.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Colour decoder: `input → hidden → hidden → 3`, ReLU then sigmoid.
///
/// The first layer's input is `[appearance feature (P), direction encoding]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorMlp<T> {
    layers: [Linear<T>; 3],
    feature_dim: usize,
}

/// Activations recorded by a forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache<T> {
    pre1: Vec<T>,
    act1: Vec<T>,
    pre2: Vec<T>,
    act2: Vec<T>,
    out: [T; 3],
}

impl<T: Real> ColorMlp<T> {
    pub fn zeros(feature_dim: usize, encoding_dim: usize, hidden: usize) -> Self {
        let input = feature_dim + encoding_dim;
        Self {
            layers: [
                Linear::zeros(input, hidden),
                Linear::zeros(hidden, hidden),
                Linear::zeros(hidden, 3),
            ],
            feature_dim,
        }
    }

    /// He initialization: the first layer (no ReLU on its input) uses
    /// variance `1/fan_in`, later layers `2/fan_in`; biases start at zero.
    pub fn random<R: Rng + ?Sized>(
        feature_dim: usize,
        encoding_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut mlp = Self::zeros(feature_dim, encoding_dim, hidden);
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            let gain = if i == 0 { 1.0 } else { 2.0 };
            let std = (gain / layer.inputs as f64).sqrt();
            normal_fill(&mut layer.weight, std, rng);
        }
        mlp
    }

    pub fn from_layers(feature_dim: usize, layers: [Linear<T>; 3]) -> Result<Self> {
        let ok = layers[0].inputs > feature_dim
            && layers[1].inputs == layers[0].outputs
            && layers[2].inputs == layers[1].outputs
            && layers[2].outputs == 3
            && layers
                .iter()
                .all(|l| l.weight.len() == l.inputs * l.outputs && l.bias.len() == l.outputs);
        if !ok {
            return Err(Error::DimensionMismatch(
                "inconsistent colour MLP layer shapes".into(),
            ));
        }
        Ok(Self {
            layers,
            feature_dim,
        })
    }

    pub fn layers(&self) -> &[Linear<T>; 3] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>; 3] {
        &mut self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.feature_dim,
            self.input_dim() - self.feature_dim,
            self.hidden(),
        )
    }

    /// Visits `(weight, bias)` buffers of each layer in order.
    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn buffers(&self) -> impl Iterator<Item = &Vec<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    /// Plain forward over the full concatenated input.
    pub fn forward(&self, input: &[T]) -> [T; 3] {
        let mut cache = MlpCache::default();
        let bias = self.direction_bias(&input[self.feature_dim..]);
        self.forward_cached(&input[..self.feature_dim], &bias, &mut cache)
    }

    /// First-layer contribution of the direction encoding plus bias; constant
    /// along a ray.
    pub fn direction_bias(&self, encoding: &[T]) -> Vec<T> {
        let l = &self.layers[0];
        debug_assert_eq!(self.feature_dim + encoding.len(), l.inputs);
        l.weight
            .chunks_exact(l.inputs)
            .zip(&l.bias)
            .map(|(row, &b)| b + dot(&row[self.feature_dim..], encoding))
            .collect()
    }

    /// Forward with a precomputed [`direction_bias`](Self::direction_bias).
    pub fn forward_cached(
        &self,
        features: &[T],
        dir_bias: &[T],
        cache: &mut MlpCache<T>,
    ) -> [T; 3] {
        let [l1, l2, l3] = &self.layers;
        let h = l1.outputs;
        cache.pre1.resize(h, T::zero());
        cache.act1.resize(h, T::zero());
        cache.pre2.resize(l2.outputs, T::zero());
        cache.act2.resize(l2.outputs, T::zero());
        for ((row, &b), (p, a)) in l1
            .weight
            .chunks_exact(l1.inputs)
            .zip(dir_bias)
            .zip(cache.pre1.iter_mut().zip(cache.act1.iter_mut()))
        {
            *p = b + dot(&row[..self.feature_dim], features);
            *a = p.max(T::zero());
        }
        l2.forward_into(&cache.act1, &mut cache.pre2);
        for (a, &p) in cache.act2.iter_mut().zip(&cache.pre2) {
            *a = p.max(T::zero());
        }
        let mut logits = [T::zero(); 3];
        l3.forward_into(&cache.act2, &mut logits);
        cache.out = logits.map(sigmoid);
        cache.out
    }

    /// Accumulates parameter gradients into `grads` and the feature gradient
    /// into `grad_features`, given `dL/d(rgb)`.
    pub fn backward(
        &self,
        features: &[T],
        encoding: &[T],
        cache: &MlpCache<T>,
        grad_rgb: [T; 3],
        grads: &mut ColorMlp<T>,
        grad_features: &mut [T],
    ) {
        let [l1, l2, l3] = &self.layers;
        let [g1, g2, g3] = &mut grads.layers;
        let mut d3 = [T::zero(); 3];
        for c in 0..3 {
            let s = cache.out[c];
            d3[c] = grad_rgb[c] * s * (T::one() - s);
        }
        let mut d2 = vec![T::zero(); l2.outputs];
        for (c, &d) in d3.iter().enumerate() {
            g3.bias[c] += d;
            let row = &l3.weight[c * l3.inputs..(c + 1) * l3.inputs];
            let grow = &mut g3.weight[c * l3.inputs..(c + 1) * l3.inputs];
            for k in 0..l3.inputs {
                grow[k] += d * cache.act2[k];
                d2[k] += d * row[k];
            }
        }
        for (d, &p) in d2.iter_mut().zip(&cache.pre2) {
            if p <= T::zero() {
                *d = T::zero();
            }
        }
        let mut d1 = vec![T::zero(); l1.outputs];
        for (j, &d) in d2.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            g2.bias[j] += d;
            let row = &l2.weight[j * l2.inputs..(j + 1) * l2.inputs];
            let grow = &mut g2.weight[j * l2.inputs..(j + 1) * l2.inputs];
            for k in 0..l2.inputs {
                grow[k] += d * cache.act1[k];
                d1[k] += d * row[k];
            }
        }
        for (d, &p) in d1.iter_mut().zip(&cache.pre1) {
            if p <= T::zero() {
                *d = T::zero();
            }
        }
        let fdim = self.feature_dim;
        for (j, &d) in d1.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            g1.bias[j] += d;
            let row = &l1.weight[j * l1.inputs..(j + 1) * l1.inputs];
            let grow = &mut g1.weight[j * l1.inputs..(j + 1) * l1.inputs];
            for k in 0..fdim {
                grow[k] += d * features[k];
                grad_features[k] += d * row[k];
            }
            for (k, &e) in encoding.iter().enumerate() {
                grow[fdim + k] += d * e;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ColorMlp<U> {
        ColorMlp {
            layers: [
                self.layers[0].cast(),
                self.layers[1].cast(),
                self.layers[2].cast(),
            ],
            feature_dim: self.feature_dim,
        }
    }
}

/// `ψ(concat(f_color, encode(d)))`.
pub fn decode_color<T: Real>(
    mlp: &ColorMlp<T>,
    f_color: &[T],
    d: Vec3<T>,
    n_freq: usize,
) -> [T; 3] {
    let enc = encode_direction(d, n_freq);
    let mut cache = MlpCache::default();
    mlp.forward_cached(f_color, &mlp.direction_bias(&enc), &mut cache)
}

/// All decoder parameters: per-scale appearance matrices and the colour MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub appearance: Vec<AppearanceMatrix<T>>,
    pub mlp: ColorMlp<T>,
    pub activation: DensityActivation<T>,
    pub n_freq: usize,
}

impl<T: Real> Decoder<T> {
    pub fn random<R: Rng + ?Sized>(
        n_scales: usize,
        feature_dim: usize,
        appearance_rank: usize,
        hidden: usize,
        n_freq: usize,
        shift: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let appearance = (0..n_scales)
            .map(|_| AppearanceMatrix::random(feature_dim, appearance_rank, rng))
            .collect::<Result<Vec<_>>>()?;
        let mlp = ColorMlp::random(feature_dim, direction_encoding_len(n_freq), hidden, rng);
        Ok(Self {
            appearance,
            mlp,
            activation: DensityActivation {
                shift: T::lit(shift),
            },
            n_freq,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.feature_dim()
    }

    pub fn appearance_param_count(&self) -> usize {
        self.appearance.iter().map(|b| b.entries().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Decoder<U> {
        Decoder {
            appearance: self.appearance.iter().map(AppearanceMatrix::cast).collect(),
            mlp: self.mlp.cast(),
            activation: DensityActivation {
                shift: U::lit(self.activation.shift.as_f64()),
            },
            n_freq: self.n_freq,
        }
    }
}
