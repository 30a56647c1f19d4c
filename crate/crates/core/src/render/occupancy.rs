use crate::error::{Error, Result};
use crate::real::Aabb;

/// `resolution³` boolean voxels over the scene box, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    resolution: usize,
    aabb: Aabb,
    voxels: Vec<bool>,
}

impl OccupancyGrid {
    pub fn empty(resolution: usize, aabb: Aabb) -> Self {
        Self::filled(resolution, aabb, false)
    }

    pub fn filled(resolution: usize, aabb: Aabb, value: bool) -> Self {
        assert!(resolution > 0, "occupancy resolution must be positive");
        Self {
            resolution,
            aabb,
            voxels: vec![value; resolution.pow(3)],
        }
    }

    pub fn from_voxels(resolution: usize, aabb: Aabb, voxels: Vec<bool>) -> Result<Self> {
        if resolution == 0 || voxels.len() != resolution.pow(3) {
            return Err(Error::DimensionMismatch(format!(
                "{} voxels for an occupancy grid of resolution {resolution}",
                voxels.len()
            )));
        }
        Ok(Self {
            resolution,
            aabb,
            voxels,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    #[inline]
    fn flat(&self, [i, j, k]: [usize; 3]) -> usize {
        i + self.resolution * (j + self.resolution * k)
    }

    pub fn get(&self, v: [usize; 3]) -> bool {
        self.voxels[self.flat(v)]
    }

    pub fn set(&mut self, v: [usize; 3], value: bool) {
        let f = self.flat(v);
        self.voxels[f] = value;
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.aabb.max[a] - self.aabb.min[a]) / self.resolution as f64)
    }

    /// Voxel containing `p`, or `None` outside the box.
    #[inline]
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut v = [0usize; 3];
        for a in 0..3 {
            let (lo, hi) = (self.aabb.min[a], self.aabb.max[a]);
            if !(p[a] >= lo && p[a] <= hi) {
                return None;
            }
            let g = ((p[a] - lo) / (hi - lo) * self.resolution as f64) as usize;
            v[a] = g.min(self.resolution - 1);
        }
        Some(v)
    }

    #[inline]
    pub fn is_occupied(&self, p: [f64; 3]) -> bool {
        self.voxel_of(p).is_some_and(|v| self.get(v))
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> [f64; 3] {
        let s = self.voxel_size();
        std::array::from_fn(|a| self.aabb.min[a] + (v[a] as f64 + 0.5) * s[a])
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    /// Grows the occupied set by `radius` voxels (Chebyshev neighbourhood).
    pub fn dilate(&self, radius: usize) -> Self {
        let n = self.resolution;
        let mut out = self.clone();
        let r = radius as isize;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    if !self.get([i, j, k]) {
                        continue;
                    }
                    for dk in -r..=r {
                        for dj in -r..=r {
                            for di in -r..=r {
                                let (x, y, z) = (i as isize + di, j as isize + dj, k as isize + dk);
                                let inside = |c: isize| c >= 0 && c < n as isize;
                                if inside(x) && inside(y) && inside(z) {
                                    out.set([x as usize, y as usize, z as usize], true);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Centres of all occupied voxels in storage order.
    pub fn occupied_centers(&self) -> Vec<[f64; 3]> {
        let n = self.resolution;
        let mut pts = Vec::new();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    if self.get([i, j, k]) {
                        pts.push(self.voxel_center([i, j, k]));
                    }
                }
            }
        }
        pts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_centers() {
        let mut g = OccupancyGrid::empty(4, Aabb::default());
        g.set([3, 0, 1], true);
        assert_eq!(g.voxel_center([3, 0, 1]), [0.75, -0.75, -0.25]);
        assert!(g.is_occupied([0.75, -0.75, -0.25]));
        assert!(g.is_occupied([1.0, -1.0, -0.4]));
        assert!(!g.is_occupied([1.01, -0.75, -0.25]));
        assert_eq!(g.count(), 1);
        assert_eq!(g.occupied_centers(), vec![[0.75, -0.75, -0.25]]);
    }

    #[test]
    fn dilation_is_clipped_cube() {
        let mut g = OccupancyGrid::empty(5, Aabb::default());
        g.set([0, 2, 2], true);
        assert_eq!(g.dilate(1).count(), 2 * 3 * 3);
        assert_eq!(g.dilate(0), g);
    }

    #[test]
    fn bad_voxel_count_rejected() {
        assert!(OccupancyGrid::from_voxels(3, Aabb::default(), vec![true; 26]).is_err());
    }
}
