//! Sparse per-scale tensor clouds.
//!
//! Tensors sit at the centres of occupied cells of a regular lattice and
//! overlap their neighbours (edge > spacing). A query point gathers the `M`
//! nearest tensors whose cube contains it and blends their features with
//! normalized inverse-distance weights.

mod model;

pub use model::{Model, MultiscaleFeatures, ParamReport, RenderSettings, MAX_SCALES};

use std::collections::BTreeSet;

use rand::Rng;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::factor_grid::{TensorShape, TriVectorTensor};
use crate::real::{Real, Vec3};

/// Distance clamp for inverse-distance weights, in scene units.
pub const WEIGHT_EPSILON: f64 = 1e-6;

/// Placement of one scale's lattice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleLayout {
    pub origin: [f64; 3],
    pub spacing: f64,
    pub edge: f64,
    /// Neighbour count `M` used for queries on this scale.
    pub neighbors: usize,
}

impl ScaleLayout {
    fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0) || !(self.edge > 0.0) {
            return Err(Error::invalid(
                "lattice spacing and tensor edge must be positive",
            ));
        }
        if self.edge <= self.spacing {
            return Err(Error::invalid(format!(
                "tensor edge {} must exceed lattice spacing {} so neighbours overlap",
                self.edge, self.spacing
            )));
        }
        if self.neighbors == 0 {
            return Err(Error::invalid("neighbour count M must be at least 1"));
        }
        Ok(())
    }

    /// Lattice cell containing `p`.
    pub fn cell_of(&self, p: [f64; 3]) -> [i32; 3] {
        std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.spacing).floor() as i32)
    }

    pub fn cell_center(&self, cell: [i32; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + self.spacing * (cell[a] as f64 + 0.5))
    }
}

/// A located neighbour and its normalized weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor<T> {
    pub tensor: u32,
    pub weight: T,
}

pub type Neighbors<T> = SmallVec<[Neighbor<T>; 8]>;

/// Output of [`ScaleCloud::aggregate_scale`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleAggregate<T> {
    pub density: T,
    /// Weighted sum of component activations, before the appearance matrix.
    pub appearance: Vec<T>,
    pub covered: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct LatticeIndex {
    min: [i32; 3],
    dims: [usize; 3],
    slots: Vec<u32>,
}

impl LatticeIndex {
    const EMPTY: u32 = u32::MAX;

    fn build(cells: &[[i32; 3]]) -> Self {
        let min = std::array::from_fn(|a| cells.iter().map(|c| c[a]).min().unwrap_or(0));
        let dims: [usize; 3] = std::array::from_fn(|a| {
            cells
                .iter()
                .map(|c| (c[a] - min[a]) as usize + 1)
                .max()
                .unwrap_or(0)
        });
        let mut slots = vec![Self::EMPTY; dims.iter().product()];
        let mut index = Self {
            min,
            dims,
            slots: Vec::new(),
        };
        for (i, &c) in cells.iter().enumerate() {
            slots[index.offset(c).unwrap()] = i as u32;
        }
        index.slots = slots;
        index
    }

    #[inline(always)]
    fn offset(&self, c: [i32; 3]) -> Option<usize> {
        let mut off = 0usize;
        for a in (0..3).rev() {
            let d = c[a] - self.min[a];
            if d < 0 || d as usize >= self.dims[a] {
                return None;
            }
            off = off * self.dims[a] + d as usize;
        }
        Some(off)
    }

    #[inline(always)]
    fn get(&self, c: [i32; 3]) -> Option<u32> {
        self.offset(c)
            .map(|o| self.slots[o])
            .filter(|&s| s != Self::EMPTY)
    }
}

/// All local tensors of one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleCloud<T> {
    layout: ScaleLayout,
    cells: Vec<[i32; 3]>,
    tensors: Vec<TriVectorTensor<T>>,
    index: LatticeIndex,
    // Cached for the hot path.
    origin_t: Vec3<T>,
    inv_spacing: T,
    half_edge_cells: T,
}

/// Rasterizes `points` onto the lattice and places one freshly initialized
/// tensor at the centre of every occupied cell.
pub fn distribute<T: Real, R: Rng + ?Sized>(
    points: &[[f64; 3]],
    layout: ScaleLayout,
    shape: TensorShape,
    init_std: f64,
    rng: &mut R,
) -> Result<ScaleCloud<T>> {
    if points.is_empty() {
        return Err(Error::EmptyGeometry);
    }
    layout.validate()?;
    let occupied: BTreeSet<[i32; 3]> = points.iter().map(|&p| layout.cell_of(p)).collect();
    let mut cells: Vec<[i32; 3]> = occupied.into_iter().collect();
    sort_cells(&mut cells);
    let tensors = cells
        .iter()
        .map(|&c| {
            let mut t = TriVectorTensor::zeros(
                Vec3::from_f64(layout.cell_center(c)),
                T::lit(layout.edge),
                shape,
            )?;
            t.init_normal(init_std, rng);
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    ScaleCloud::from_parts(layout, cells, tensors)
}

/// Orders cells by z, then y, then x.
fn sort_cells(cells: &mut [[i32; 3]]) {
    cells.sort_by_key(|c| (c[2], c[1], c[0]));
}

impl<T: Real> ScaleCloud<T> {
    /// Reassembles a cloud from explicit cells and tensors (checkpoint loading,
    /// hand-built test models). Tensor positions must be the cell centres.
    pub fn from_parts(
        layout: ScaleLayout,
        cells: Vec<[i32; 3]>,
        tensors: Vec<TriVectorTensor<T>>,
    ) -> Result<Self> {
        layout.validate()?;
        if cells.len() != tensors.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} cells but {} tensors",
                cells.len(),
                tensors.len()
            )));
        }
        if cells.is_empty() {
            return Err(Error::EmptyGeometry);
        }
        let mut sorted = cells.clone();
        sort_cells(&mut sorted);
        sorted.dedup();
        if sorted != cells {
            return Err(Error::invalid(
                "cells must be unique and ordered by (z, y, x)",
            ));
        }
        let shape = tensors[0].shape();
        for (c, t) in cells.iter().zip(&tensors) {
            if t.shape() != shape {
                return Err(Error::DimensionMismatch(
                    "tensors of one scale must share a shape".into(),
                ));
            }
            let center = layout.cell_center(*c);
            let pos = t.position().to_f64();
            if (0..3).any(|a| (pos[a] - center[a]).abs() > 1e-5)
                || (t.edge().as_f64() - layout.edge).abs() > 1e-6
            {
                return Err(Error::invalid(format!(
                    "tensor at {pos:?} is not centred on cell {c:?}"
                )));
            }
        }
        let index = LatticeIndex::build(&cells);
        Ok(Self {
            origin_t: Vec3::from_f64(layout.origin),
            inv_spacing: T::lit(1.0 / layout.spacing),
            half_edge_cells: T::lit(0.5 * layout.edge / layout.spacing),
            layout,
            cells,
            tensors,
            index,
        })
    }

    pub fn layout(&self) -> &ScaleLayout {
        &self.layout
    }

    pub fn neighbors(&self) -> usize {
        self.layout.neighbors
    }

    pub fn set_neighbors(&mut self, m: usize) -> Result<()> {
        if m == 0 {
            return Err(Error::invalid("neighbour count M must be at least 1"));
        }
        self.layout.neighbors = m;
        Ok(())
    }

    pub fn cells(&self) -> &[[i32; 3]] {
        &self.cells
    }

    pub fn tensors(&self) -> &[TriVectorTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [TriVectorTensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn shape(&self) -> TensorShape {
        self.tensors[0].shape()
    }

    pub fn tensor_index(&self, cell: [i32; 3]) -> Option<usize> {
        self.index.get(cell).map(|i| i as usize)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(TriVectorTensor::param_count).sum()
    }

    /// Replaces every tensor with its upsampled version.
    pub fn upsample(&mut self, res: [usize; 3]) -> Result<()> {
        for t in &mut self.tensors {
            *t = t.upsample_factors(res)?;
        }
        Ok(())
    }

    /// Up to `m` covering tensors closest to `p`, with weights
    /// `1/max(|p_m − p|, ε)` normalized to sum to one. Ties keep ascending
    /// (z, y, x) lattice order.
    pub fn query_neighbors(&self, p: Vec3<T>, m: usize) -> Neighbors<T> {
        let mut out = Neighbors::new();
        self.query_into(p, m, &mut out);
        out
    }

    #[inline]
    pub fn query_into(&self, p: Vec3<T>, m: usize, out: &mut Neighbors<T>) {
        out.clear();
        let rel = (p - self.origin_t) * self.inv_spacing;
        // A tensor at cell c covers p iff |rel − (c + ½)| ≤ half-edge (in cells).
        let slack = T::lit(1e-4);
        let mut range = [[0i32; 2]; 3];
        for a in 0..3 {
            let lo = (rel[a] - self.half_edge_cells - T::lit(0.5) - slack).ceil();
            let hi = (rel[a] + self.half_edge_cells - T::lit(0.5) + slack).floor();
            match (lo.to_i32(), hi.to_i32()) {
                (Some(lo), Some(hi)) if lo <= hi => range[a] = [lo, hi],
                _ => return,
            }
        }
        let mut candidates: SmallVec<[(T, u32); 27]> = SmallVec::new();
        for z in range[2][0]..=range[2][1] {
            for y in range[1][0]..=range[1][1] {
                for x in range[0][0]..=range[0][1] {
                    if let Some(i) = self.index.get([x, y, z]) {
                        let t = &self.tensors[i as usize];
                        if t.covers(p) {
                            candidates.push(((t.position() - p).norm(), i));
                        }
                    }
                }
            }
        }
        if candidates.is_empty() {
            return;
        }
        // Stable: equal distances keep the (z, y, x) loop order.
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        candidates.truncate(m);
        let eps = T::lit(WEIGHT_EPSILON);
        let mut total = T::zero();
        for &(d, i) in &candidates {
            let w = T::one() / d.max(eps);
            total += w;
            out.push(Neighbor {
                tensor: i,
                weight: w,
            });
        }
        for n in out.iter_mut() {
            n.weight /= total;
        }
    }

    /// Weighted density feature and weighted component sum (before `B`).
    pub fn aggregate_scale(&self, p: Vec3<T>, m: usize) -> ScaleAggregate<T> {
        let neighbors = self.query_neighbors(p, m);
        let rank = self.shape().appearance_rank;
        let mut appearance = vec![T::zero(); rank];
        if neighbors.is_empty() {
            return ScaleAggregate {
                density: T::zero(),
                appearance,
                covered: false,
            };
        }
        let density = self.accumulate(p, &neighbors, Some(&mut appearance));
        ScaleAggregate {
            density,
            appearance,
            covered: true,
        }
    }

    /// Returns the weighted density feature and, when `appearance` is given,
    /// adds the weighted component activations into it.
    #[inline]
    pub fn accumulate(
        &self,
        p: Vec3<T>,
        neighbors: &[Neighbor<T>],
        mut appearance: Option<&mut [T]>,
    ) -> T {
        let mut density = T::zero();
        for n in neighbors {
            let t = &self.tensors[n.tensor as usize];
            let loc = t.locate(p);
            density += n.weight * t.density_at(&loc);
            if let Some(out) = appearance.as_deref_mut() {
                t.accumulate_appearance(&loc, n.weight, out);
            }
        }
        density
    }

    /// Adds the weighted component activations into `out`.
    #[inline]
    pub fn appearance_into(&self, p: Vec3<T>, neighbors: &[Neighbor<T>], out: &mut [T]) {
        for n in neighbors {
            let t = &self.tensors[n.tensor as usize];
            t.accumulate_appearance(&t.locate(p), n.weight, out);
        }
    }

    /// Weighted density feature only.
    #[inline]
    pub fn density_feature(&self, p: Vec3<T>, neighbors: &[Neighbor<T>]) -> T {
        self.accumulate(p, neighbors, None)
    }

    pub fn cast<U: Real>(&self) -> ScaleCloud<U> {
        ScaleCloud::from_parts(
            self.layout,
            self.cells.clone(),
            self.tensors.iter().map(|t| t.cast()).collect(),
        )
        .expect("casting preserves a valid cloud")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{apply_appearance_matrix, AppearanceMatrix};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout(spacing: f64, edge: f64, m: usize) -> ScaleLayout {
        ScaleLayout {
            origin: [0.0; 3],
            spacing,
            edge,
            neighbors: m,
        }
    }

    fn shape() -> TensorShape {
        TensorShape::cubic(2, 3, 5).unwrap()
    }

    fn cloud(points: &[[f64; 3]], spacing: f64, edge: f64, seed: u64) -> ScaleCloud<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        distribute(points, layout(spacing, edge, 4), shape(), 0.3, &mut rng).unwrap()
    }

    #[test]
    fn distribute_places_tensor_at_cell_center() {
        let c = cloud(&[[0.1, 0.1, 0.1]], 0.4, 0.6, 0);
        assert_eq!(c.len(), 1);
        let p = c.tensors()[0].position().to_f64();
        for a in 0..3 {
            assert!((p[a] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn distribute_deduplicates_cells() {
        let c = cloud(&[[0.1, 0.1, 0.1], [0.3, 0.05, 0.39]], 0.4, 0.6, 0);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn distribute_rejects_empty_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err =
            distribute::<f32, _>(&[], layout(0.4, 0.6, 4), shape(), 0.2, &mut rng).unwrap_err();
        assert_eq!(err.to_string(), "no geometry to distribute on");
        assert!(
            distribute::<f32, _>(&[[0.0; 3]], layout(0.4, 0.4, 4), shape(), 0.2, &mut rng).is_err()
        );
    }

    #[test]
    fn distribute_is_deterministic_and_ordered() {
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|i| {
                let f = i as f64;
                [(f * 0.37).sin(), (f * 0.91).cos(), (f * 0.13).sin()]
            })
            .collect();
        let a = cloud(&pts, 0.2, 0.3, 9);
        let b = cloud(&pts, 0.2, 0.3, 9);
        assert_eq!(a, b);
        let keys: Vec<_> = a.cells().iter().map(|c| (c[2], c[1], c[0])).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn equidistant_pair_gets_equal_weights() {
        // Cells (0,0,0) and (1,0,0): centres 0.2 and 0.6 on x; midpoint 0.4.
        let c = cloud(&[[0.1, 0.1, 0.1], [0.5, 0.1, 0.1]], 0.4, 0.6, 1);
        let n = c.query_neighbors(Vec3::new(0.4, 0.2, 0.2), 2);
        assert_eq!(n.len(), 2);
        assert!((n[0].weight - 0.5).abs() < 1e-12 && (n[1].weight - 0.5).abs() < 1e-12);
        // Tie broken by ascending x.
        assert_eq!((n[0].tensor, n[1].tensor), (0, 1));
    }

    #[test]
    fn point_at_center_gets_full_weight() {
        let c = cloud(&[[0.1, 0.1, 0.1], [0.5, 0.1, 0.1]], 0.4, 0.6, 1);
        let n = c.query_neighbors(Vec3::new(0.2, 0.2, 0.2), 1);
        assert_eq!(n.len(), 1);
        assert_eq!(n[0].tensor, 0);
        assert_eq!(n[0].weight, 1.0);
    }

    #[test]
    fn fewer_covering_tensors_than_m() {
        let c = cloud(
            &[[0.1, 0.1, 0.1], [0.5, 0.1, 0.1], [0.1, 0.5, 0.1]],
            0.4,
            0.6,
            1,
        );
        let n = c.query_neighbors(Vec3::new(0.35, 0.35, 0.2), 4);
        assert_eq!(n.len(), 3);
        let s: f64 = n.iter().map(|n| n.weight).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(c.query_neighbors(Vec3::new(3.0, 3.0, 3.0), 4).is_empty());
    }

    #[test]
    fn aggregate_single_tensor_is_raw_evaluation() {
        let c = cloud(&[[0.1, 0.1, 0.1]], 0.4, 0.6, 2);
        let p = Vec3::new(0.13, 0.31, 0.02);
        let agg = c.aggregate_scale(p, 4);
        assert!(agg.covered);
        let t = &c.tensors()[0];
        assert!((agg.density - t.eval_density_feature(p)).abs() < 1e-14);
        let comps = t.eval_appearance_components(p);
        for (a, b) in agg.appearance.iter().zip(comps) {
            assert!((a - b).abs() < 1e-14);
        }
        let miss = c.aggregate_scale(Vec3::new(2.0, 2.0, 2.0), 4);
        assert!(!miss.covered && miss.density == 0.0 && miss.appearance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_tensors_are_a_fixed_point() {
        let mut c = cloud(&[[0.1, 0.1, 0.1], [0.5, 0.1, 0.1]], 0.4, 0.6, 3);
        for t in c.tensors_mut() {
            for v in t.factors_mut() {
                *v = 0.7;
            }
        }
        let p = Vec3::new(0.33, 0.2, 0.25);
        assert_eq!(c.query_neighbors(p, 4).len(), 2);
        let alone = c.tensors()[0].eval_density_feature(p);
        let agg = c.aggregate_scale(p, 4);
        assert!((agg.density - alone).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(x in 0.0f64..1.2, y in 0.0f64..1.2, z in 0.0f64..1.2, m in 1usize..6) {
            let pts: Vec<[f64; 3]> = (0..27).map(|i| [
                0.2 + 0.4 * (i % 3) as f64, 0.2 + 0.4 * ((i / 3) % 3) as f64, 0.2 + 0.4 * (i / 9) as f64,
            ]).collect();
            let c = cloud(&pts, 0.4, 0.6, 0);
            let n = c.query_neighbors(Vec3::new(x, y, z), m);
            prop_assert!(!n.is_empty() && n.len() <= m);
            let s: f64 = n.iter().map(|n| n.weight).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn shared_matrix_identity(seed in 0u64..300, t in 0.0f64..1.0) {
            let c = cloud(&[[0.1, 0.1, 0.1], [0.5, 0.1, 0.1]], 0.4, 0.6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let b = AppearanceMatrix::<f64>::random(4, 3, &mut rng).unwrap();
            let p = Vec3::new(0.15 + 0.5 * t, 0.25, 0.1);
            let agg = c.aggregate_scale(p, 4);
            let factored = apply_appearance_matrix(&b, &agg.appearance).unwrap();
            let mut direct = [0.0; 4];
            for n in c.query_neighbors(p, 4) {
                let per = apply_appearance_matrix(&b, &c.tensors()[n.tensor as usize].eval_appearance_components(p)).unwrap();
                for k in 0..4 { direct[k] += n.weight * per[k]; }
            }
            for k in 0..4 { prop_assert!((factored[k] - direct[k]).abs() <= 1e-5); }
        }
    }
}
