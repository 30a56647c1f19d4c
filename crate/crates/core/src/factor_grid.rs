//! CP-factorized local tensors.
//!
//! A [`TriVectorTensor`] covers a cube of edge `l` centred at `p` and stores,
//! for each of its `R_σ` density and `R_c` appearance components, three 1-D
//! factor vectors along X, Y and Z. The value of component `r` at a point is
//! the product of the three vectors linearly interpolated at the point's grid
//! coordinates, which equals trilinear interpolation of the densely
//! materialized rank-1 grid.
//!
//! Storage is one flat buffer per tensor. Each component occupies a block of
//! `I + J + K` values laid out X, then Y, then Z; density components come
//! first, appearance components after. Checkpoints use the same order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::{cast_slice, Real, Vec3};

/// One axis-aligned factor vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorVector<T>(Vec<T>);

impl<T: Real> FactorVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "factor vector needs at least 2 values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("factor vector contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn constant(len: usize, value: T) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn lerp(&self, coord: T) -> T {
        lerp_vector(&self.0, coord)
    }

    pub fn upsample(&self, new_len: usize) -> Result<Self> {
        if new_len < self.len() {
            return Err(Error::invalid(format!(
                "cannot shrink factor vector from {} to {new_len}",
                self.len()
            )));
        }
        Ok(Self(resample_linear(&self.0, new_len)))
    }
}

/// Integer cell and fractional offset of a grid coordinate along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisCell<T> {
    pub index: usize,
    pub frac: T,
}

/// Clamps `coord` into `[0, len - 1]` and splits it into a cell and offset.
///
/// The upper boundary maps to the last cell with `frac == 1`, so every
/// coordinate has a containing cell `[index, index + 1]`.
#[inline(always)]
pub fn locate_cell<T: Real>(len: usize, coord: T) -> AxisCell<T> {
    debug_assert!(len >= 2);
    let upper = T::from_count(len - 1);
    // NaN falls through both comparisons; map it to the lower boundary.
    let c = if coord > T::zero() {
        coord.min(upper)
    } else {
        T::zero()
    };
    let index = (c.floor().to_usize().unwrap_or(0)).min(len - 2);
    AxisCell {
        index,
        frac: c - T::from_count(index),
    }
}

/// Linear interpolation of `values` at a (clamped) grid coordinate.
#[inline(always)]
pub fn lerp_vector<T: Real>(values: &[T], coord: T) -> T {
    let cell = locate_cell(values.len(), coord);
    lerp_cell(values, cell)
}

#[inline(always)]
fn lerp_cell<T: Real>(values: &[T], cell: AxisCell<T>) -> T {
    let a = values[cell.index];
    let b = values[cell.index + 1];
    a + (b - a) * cell.frac
}

/// Resamples a piecewise-linear vector onto `new_len` uniform knots spanning
/// the same extent. Endpoints, and any knot shared by both grids, are exact.
pub fn resample_linear<T: Real>(values: &[T], new_len: usize) -> Vec<T> {
    let old_len = values.len();
    if new_len == old_len {
        return values.to_vec();
    }
    if new_len == 1 {
        return vec![values[0]];
    }
    (0..new_len)
        .map(|j| {
            // Integer numerator keeps coordinates of shared knots exact.
            let coord = (j * (old_len - 1)) as f64 / (new_len - 1) as f64;
            lerp_vector(values, T::lit(coord))
        })
        .collect()
}

/// Ranks and per-axis resolutions of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorShape {
    pub density_rank: usize,
    pub appearance_rank: usize,
    pub res: [usize; 3],
}

impl TensorShape {
    pub fn new(density_rank: usize, appearance_rank: usize, res: [usize; 3]) -> Result<Self> {
        if density_rank == 0 || appearance_rank == 0 {
            return Err(Error::invalid("tensor ranks must be at least 1"));
        }
        if res.iter().any(|&r| r < 2) {
            return Err(Error::invalid(format!(
                "factor resolutions must be >= 2, got {res:?}"
            )));
        }
        Ok(Self {
            density_rank,
            appearance_rank,
            res,
        })
    }

    pub fn cubic(density_rank: usize, appearance_rank: usize, res: usize) -> Result<Self> {
        Self::new(density_rank, appearance_rank, [res; 3])
    }

    /// Values per component block.
    #[inline(always)]
    pub fn stride(&self) -> usize {
        self.res[0] + self.res[1] + self.res[2]
    }

    pub fn components(&self) -> usize {
        self.density_rank + self.appearance_rank
    }

    /// `(R_σ + R_c) · (I + J + K)`.
    pub fn param_count(&self) -> usize {
        self.components() * self.stride()
    }

    /// Number of density factor entries.
    pub fn density_len(&self) -> usize {
        self.density_rank * self.stride()
    }

    pub fn with_res(&self, res: [usize; 3]) -> Self {
        Self { res, ..*self }
    }
}

/// Precomputed per-axis cells of a point inside one tensor.
#[derive(Clone, Copy, Debug)]
pub struct TensorLocator<T> {
    pub cells: [AxisCell<T>; 3],
}

/// A local CP-factorized density and appearance grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TriVectorTensor<T> {
    position: Vec3<T>,
    edge: T,
    shape: TensorShape,
    factors: Vec<T>,
}

impl<T: Real> TriVectorTensor<T> {
    pub fn zeros(position: Vec3<T>, edge: T, shape: TensorShape) -> Result<Self> {
        Self::from_flat(position, edge, shape, vec![T::zero(); shape.param_count()])
    }

    pub fn from_flat(
        position: Vec3<T>,
        edge: T,
        shape: TensorShape,
        factors: Vec<T>,
    ) -> Result<Self> {
        if !(edge > T::zero()) || !edge.is_finite() {
            return Err(Error::invalid(format!(
                "tensor edge must be positive, got {edge}"
            )));
        }
        if factors.len() != shape.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} factor values for {shape:?}, got {}",
                shape.param_count(),
                factors.len()
            )));
        }
        Ok(Self {
            position,
            edge,
            shape,
            factors,
        })
    }

    /// Builds a tensor from explicit `[X, Y, Z]` factor triples.
    pub fn from_components(
        position: Vec3<T>,
        edge: T,
        density: Vec<[FactorVector<T>; 3]>,
        appearance: Vec<[FactorVector<T>; 3]>,
    ) -> Result<Self> {
        let first = density
            .first()
            .ok_or_else(|| Error::invalid("tensor needs at least one density component"))?;
        let res = [first[0].len(), first[1].len(), first[2].len()];
        let shape = TensorShape::new(density.len(), appearance.len(), res)?;
        let mut factors = Vec::with_capacity(shape.param_count());
        for triple in density.iter().chain(appearance.iter()) {
            for (axis, v) in triple.iter().enumerate() {
                if v.len() != res[axis] {
                    return Err(Error::DimensionMismatch(format!(
                        "axis {axis} vector has length {}, expected {}",
                        v.len(),
                        res[axis]
                    )));
                }
                factors.extend_from_slice(v.values());
            }
        }
        Self::from_flat(position, edge, shape, factors)
    }

    /// Fills every factor with zero-mean normal noise.
    pub fn init_normal<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        for v in &mut self.factors {
            *v = T::lit(normal.sample(rng));
        }
    }

    pub fn position(&self) -> Vec3<T> {
        self.position
    }

    pub fn edge(&self) -> T {
        self.edge
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn factors(&self) -> &[T] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [T] {
        &mut self.factors
    }

    /// Density factor entries (the L1-regularized block).
    pub fn density_factors(&self) -> &[T] {
        &self.factors[..self.shape.density_len()]
    }

    /// `[X, Y, Z]` slices of the `c`-th component block (density first).
    pub fn component(&self, c: usize) -> [&[T]; 3] {
        let [i, j, k] = self.shape.res;
        let base = c * self.shape.stride();
        let block = &self.factors[base..base + i + j + k];
        [&block[..i], &block[i..i + j], &block[i + j..]]
    }

    pub fn density_component(&self, r: usize) -> [&[T]; 3] {
        assert!(r < self.shape.density_rank);
        self.component(r)
    }

    pub fn appearance_component(&self, r: usize) -> [&[T]; 3] {
        assert!(r < self.shape.appearance_rank);
        self.component(self.shape.density_rank + r)
    }

    /// Whether `p` lies inside the closed coverage cube.
    #[inline(always)]
    pub fn covers(&self, p: Vec3<T>) -> bool {
        let half = self.edge * T::lit(0.5);
        (0..3).all(|a| (p[a] - self.position[a]).abs() <= half)
    }

    /// Maps a scene point to grid coordinates; the cube faces land on `0`
    /// and `len - 1`. Points outside the cube map outside that range.
    pub fn to_grid_coord(&self, p: Vec3<T>) -> Vec3<T> {
        let half = self.edge * T::lit(0.5);
        let inv = T::one() / self.edge;
        let g = |a: usize| {
            (p[a] - self.position[a] + half) * inv * T::from_count(self.shape.res[a] - 1)
        };
        Vec3::new(g(0), g(1), g(2))
    }

    #[inline(always)]
    pub fn locate(&self, p: Vec3<T>) -> TensorLocator<T> {
        let g = self.to_grid_coord(p);
        TensorLocator {
            cells: [
                locate_cell(self.shape.res[0], g.x),
                locate_cell(self.shape.res[1], g.y),
                locate_cell(self.shape.res[2], g.z),
            ],
        }
    }

    #[inline(always)]
    fn component_value(&self, base: usize, loc: &TensorLocator<T>) -> (T, T, T) {
        let [i, j, _] = self.shape.res;
        let f = &self.factors;
        let [cx, cy, cz] = loc.cells;
        let x = lerp_cell(&f[base..], cx);
        let y = lerp_cell(&f[base + i..], cy);
        let z = lerp_cell(&f[base + i + j..], cz);
        (x, y, z)
    }

    /// Σ_r X_r·Y_r·Z_r at a located point.
    #[inline]
    pub fn density_at(&self, loc: &TensorLocator<T>) -> T {
        let stride = self.shape.stride();
        let mut sum = T::zero();
        for r in 0..self.shape.density_rank {
            let (x, y, z) = self.component_value(r * stride, loc);
            sum += x * y * z;
        }
        sum
    }

    /// Adds `weight ·` (per-component appearance products) into `out`.
    #[inline]
    pub fn accumulate_appearance(&self, loc: &TensorLocator<T>, weight: T, out: &mut [T]) {
        let stride = self.shape.stride();
        let offset = self.shape.density_rank * stride;
        for (r, o) in out.iter_mut().enumerate().take(self.shape.appearance_rank) {
            let (x, y, z) = self.component_value(offset + r * stride, loc);
            *o += weight * x * y * z;
        }
    }

    pub fn eval_density_feature(&self, p: Vec3<T>) -> T {
        self.density_at(&self.locate(p))
    }

    pub fn eval_appearance_components(&self, p: Vec3<T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.shape.appearance_rank];
        self.accumulate_appearance(&self.locate(p), T::one(), &mut out);
        out
    }

    #[inline(always)]
    fn backprop_component(&self, base: usize, loc: &TensorLocator<T>, upstream: T, grad: &mut [T]) {
        let [i, j, _] = self.shape.res;
        let (x, y, z) = self.component_value(base, loc);
        let [cx, cy, cz] = loc.cells;
        let gx = upstream * y * z;
        let gy = upstream * x * z;
        let gz = upstream * x * y;
        let bx = base + cx.index;
        grad[bx] += gx * (T::one() - cx.frac);
        grad[bx + 1] += gx * cx.frac;
        let by = base + i + cy.index;
        grad[by] += gy * (T::one() - cy.frac);
        grad[by + 1] += gy * cy.frac;
        let bz = base + i + j + cz.index;
        grad[bz] += gz * (T::one() - cz.frac);
        grad[bz + 1] += gz * cz.frac;
    }

    /// Accumulates `upstream · ∂density_at/∂factors` into `grad` (same layout as the factors).
    pub fn backprop_density(&self, loc: &TensorLocator<T>, upstream: T, grad: &mut [T]) {
        let stride = self.shape.stride();
        for r in 0..self.shape.density_rank {
            self.backprop_component(r * stride, loc, upstream, grad);
        }
    }

    /// Accumulates the gradient of `Σ_r upstream[r] · A_r` into `grad`.
    pub fn backprop_appearance(&self, loc: &TensorLocator<T>, upstream: &[T], grad: &mut [T]) {
        let stride = self.shape.stride();
        let offset = self.shape.density_rank * stride;
        for (r, &u) in upstream.iter().enumerate().take(self.shape.appearance_rank) {
            self.backprop_component(offset + r * stride, loc, u, grad);
        }
    }

    /// Linearly resamples every factor vector to `new_res` over the same coverage.
    pub fn upsample_factors(&self, new_res: [usize; 3]) -> Result<Self> {
        let factors = upsample_buffer(&self.factors, self.shape, new_res)?;
        Ok(Self {
            factors,
            shape: self.shape.with_res(new_res),
            ..*self
        })
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    pub fn cast<U: Real>(&self) -> TriVectorTensor<U> {
        TriVectorTensor {
            position: self.position.cast(),
            edge: U::lit(self.edge.as_f64()),
            shape: self.shape,
            factors: cast_slice(&self.factors),
        }
    }
}

/// Resamples a buffer laid out like a tensor's factors to new resolutions.
/// Also used for optimizer moment buffers that mirror the factors.
pub fn upsample_buffer<T: Real>(
    buf: &[T],
    shape: TensorShape,
    new_res: [usize; 3],
) -> Result<Vec<T>> {
    if (0..3).any(|a| new_res[a] < shape.res[a]) {
        return Err(Error::invalid(format!(
            "upsampling only grows resolutions: {:?} -> {new_res:?}",
            shape.res
        )));
    }
    debug_assert_eq!(buf.len(), shape.param_count());
    let new_shape = shape.with_res(new_res);
    let mut out = Vec::with_capacity(new_shape.param_count());
    let [i, j, _] = shape.res;
    for block in buf.chunks_exact(shape.stride()) {
        out.extend(resample_linear(&block[..i], new_res[0]));
        out.extend(resample_linear(&block[i..i + j], new_res[1]));
        out.extend(resample_linear(&block[i + j..], new_res[2]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(v: &[f64]) -> FactorVector<f64> {
        FactorVector::new(v.to_vec()).unwrap()
    }

    fn constant_tensor(density: &[f64], appearance: &[f64], len: usize) -> TriVectorTensor<f64> {
        let triple = |c: f64| {
            [
                FactorVector::constant(len, c).unwrap(),
                FactorVector::constant(len, c).unwrap(),
                FactorVector::constant(len, c).unwrap(),
            ]
        };
        TriVectorTensor::from_components(
            Vec3::zero(),
            0.3,
            density.iter().map(|&c| triple(c)).collect(),
            appearance.iter().map(|&c| triple(c)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn lerp_examples() {
        assert_eq!(lerp_vector(&[1.0, 3.0], 0.5), 2.0);
        assert_eq!(lerp_vector(&[0.0, 10.0, 20.0], 2.0), 20.0);
        assert_eq!(lerp_vector(&[0.0, 10.0, 20.0], -0.7), 0.0);
        assert_eq!(lerp_vector(&[0.0, 10.0, 20.0], 7.0), 20.0);
        assert_eq!(lerp_vector(&[0.0, 10.0, 20.0], f64::NAN), 0.0);
    }

    #[test]
    fn factor_vector_validation() {
        assert!(FactorVector::new(vec![1.0f32]).is_err());
        assert!(FactorVector::new(vec![1.0f32, f32::NAN]).is_err());
        assert!(FactorVector::new(vec![1.0f32, 2.0]).is_ok());
    }

    #[test]
    fn grid_coord_examples() {
        let shape = TensorShape::cubic(1, 1, 29).unwrap();
        let p = Vec3::new(0.2, -0.4, 0.6);
        let t = TriVectorTensor::zeros(p, 0.6, shape).unwrap();
        let g = t.to_grid_coord(p);
        assert!((g.x - 14.0f64).abs() < 1e-12 && (g.y - 14.0).abs() < 1e-12);
        let lo = t.to_grid_coord(p - Vec3::splat(0.3));
        assert!(lo.x.abs() < 1e-12 && lo.y.abs() < 1e-12 && lo.z.abs() < 1e-12);

        let t = TriVectorTensor::zeros(Vec3::zero(), 0.3, TensorShape::cubic(1, 1, 31).unwrap())
            .unwrap();
        let g = t.to_grid_coord(Vec3::new(0.15, 0.0, 0.0));
        assert!((g.x - 30.0f64).abs() < 1e-12);
    }

    #[test]
    fn density_examples() {
        let t = constant_tensor(&[2.0], &[1.0], 4);
        for p in [
            Vec3::zero(),
            Vec3::new(0.1, -0.12, 0.05),
            Vec3::new(5.0, 5.0, -5.0),
        ] {
            assert_eq!(t.eval_density_feature(p), 8.0);
        }
        let t = constant_tensor(&[2.0, 1.0], &[1.0], 4);
        assert_eq!(t.eval_density_feature(Vec3::new(0.03, 0.0, 0.1)), 9.0);
    }

    #[test]
    fn appearance_examples() {
        let t = constant_tensor(&[1.0], &[1.0], 3);
        assert_eq!(t.eval_appearance_components(Vec3::zero()), vec![1.0]);
        let t = constant_tensor(&[1.0], &[2.0, -3.0], 3);
        assert_eq!(
            t.eval_appearance_components(Vec3::new(0.1, 0.1, 0.0)),
            vec![8.0, -27.0]
        );
    }

    #[test]
    fn upsample_examples() {
        assert_eq!(
            fv(&[0.0, 1.0]).upsample(3).unwrap().values(),
            &[0.0, 0.5, 1.0]
        );
        assert_eq!(
            fv(&[0.3, -1.0, 2.5]).upsample(3).unwrap().values(),
            &[0.3, -1.0, 2.5]
        );
        assert_eq!(
            fv(&[0.0, 6.0, 0.0]).upsample(5).unwrap().values(),
            &[0.0, 3.0, 6.0, 3.0, 0.0]
        );
        assert!(fv(&[0.0, 6.0, 0.0]).upsample(2).is_err());
    }

    #[test]
    fn tensor_upsample_rejects_shrink_and_keeps_placement() {
        let t = TriVectorTensor::<f64>::zeros(
            Vec3::new(0.1, 0.2, 0.3),
            0.6,
            TensorShape::cubic(2, 3, 5).unwrap(),
        )
        .unwrap();
        assert!(t.upsample_factors([4, 5, 5]).is_err());
        let u = t.upsample_factors([9, 7, 5]).unwrap();
        assert_eq!(u.position(), t.position());
        assert_eq!(u.edge(), t.edge());
        assert_eq!(u.shape().res, [9, 7, 5]);
        assert_eq!(u.param_count(), 5 * 21);
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(TensorShape::cubic(16, 48, 29).unwrap().param_count(), 5568);
        assert_eq!(TensorShape::cubic(1, 1, 2).unwrap().param_count(), 12);
        assert_eq!(
            TensorShape::cubic(16, 48, 121).unwrap().param_count(),
            23232
        );
    }

    #[test]
    fn backprop_matches_linearity() {
        // Each component is linear in every single entry, so the gradient is
        // the value change for a unit perturbation.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = TensorShape::new(2, 3, [4, 5, 3]).unwrap();
        let mut t = TriVectorTensor::<f64>::zeros(Vec3::zero(), 0.5, shape).unwrap();
        t.init_normal(0.5, &mut rng);
        let p = Vec3::new(0.07, -0.11, 0.2);
        let loc = t.locate(p);
        let up = [0.3, -1.2, 0.7];
        let mut grad = vec![0.0; shape.param_count()];
        t.backprop_density(&loc, 1.5, &mut grad);
        t.backprop_appearance(&loc, &up, &mut grad);
        let objective = |t: &TriVectorTensor<f64>| {
            let a = t.eval_appearance_components(p);
            1.5 * t.eval_density_feature(p) + a.iter().zip(up).map(|(a, u)| a * u).sum::<f64>()
        };
        let base = objective(&t);
        for k in 0..shape.param_count() {
            let mut u = t.clone();
            u.factors_mut()[k] += 1.0;
            // Objective is affine in one entry: exact unit difference.
            assert!((objective(&u) - base - grad[k]).abs() < 1e-9, "entry {k}");
        }
    }

    proptest! {
        #[test]
        fn evaluation_is_total_and_finite(
            seed in 0u64..1000,
            px in -3.0f64..3.0, py in -3.0f64..3.0, pz in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = TriVectorTensor::<f32>::zeros(Vec3::zero(), 0.6, TensorShape::cubic(2, 2, 5).unwrap()).unwrap();
            t.init_normal(1.0, &mut rng);
            let p = Vec3::new(px as f32, py as f32, pz as f32);
            prop_assert!(t.eval_density_feature(p).is_finite());
            prop_assert!(t.eval_appearance_components(p).iter().all(|v| v.is_finite()));
        }

        #[test]
        fn scaling_a_vector_scales_its_component(seed in 0u64..1000, s in -4.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = TensorShape::cubic(2, 1, 4).unwrap();
            let mut t = TriVectorTensor::<f64>::zeros(Vec3::zero(), 1.0, shape).unwrap();
            t.init_normal(1.0, &mut rng);
            let p = Vec3::new(0.1, 0.27, -0.33);
            let loc = t.locate(p);
            let c0 = {
                let [x, y, z] = t.density_component(0);
                lerp_vector(x, loc_coord(&t, p, 0)) * lerp_vector(y, loc_coord(&t, p, 1)) * lerp_vector(z, loc_coord(&t, p, 2))
            };
            let total = t.density_at(&loc);
            // Y vector of component 0 occupies [4, 8).
            for v in &mut t.factors_mut()[4..8] { *v *= s; }
            let scaled = t.eval_density_feature(p);
            prop_assert!((scaled - (total - c0 + s * c0)).abs() < 1e-9);
        }

        #[test]
        fn doubling_upsample_preserves_knots(seed in 0u64..1000, len in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let up = resample_linear(&values, 2 * len - 1);
            for (i, v) in values.iter().enumerate() {
                prop_assert_eq!(up[2 * i], *v);
            }
        }
    }

    fn loc_coord(t: &TriVectorTensor<f64>, p: Vec3<f64>, axis: usize) -> f64 {
        t.to_grid_coord(p)[axis]
    }
}
