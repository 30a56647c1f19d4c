//! Cameras, ray sampling and emission–absorption compositing.

mod image;
mod occupancy;
mod trace;

pub use self::image::Image;

pub use occupancy::OccupancyGrid;
pub use trace::{render_image, render_image_with, render_pixel, KeptSample, RayTracer, Shading};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{Aabb, Real, Vec3};

/// Pinhole camera; the pose is camera-to-world with the camera looking down
/// its local −Z axis and +Y up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub pose: [[f64; 4]; 4],
}

impl Camera {
    pub fn new(width: usize, height: usize, focal: f64, pose: [[f64; 4]; 4]) -> Result<Self> {
        let cam = Self {
            width,
            height,
            focal,
            pose,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera resolution must be non-zero"));
        }
        if !(self.focal > 0.0) {
            return Err(Error::invalid(format!(
                "focal length must be positive, got {}",
                self.focal
            )));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| self.pose[k][i] * self.pose[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-4 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    pub fn position(&self) -> [f64; 3] {
        [self.pose[0][3], self.pose[1][3], self.pose[2][3]]
    }

    /// World-space viewing axis (camera −Z).
    pub fn forward(&self) -> [f64; 3] {
        [-self.pose[0][2], -self.pose[1][2], -self.pose[2][2]]
    }

    /// Unnormalized camera-space direction through the centre of a pixel.
    pub fn pixel_direction_camera(&self, row: usize, col: usize) -> [f64; 3] {
        [
            (col as f64 + 0.5 - 0.5 * self.width as f64) / self.focal,
            -(row as f64 + 0.5 - 0.5 * self.height as f64) / self.focal,
            -1.0,
        ]
    }

    /// Ray through a pixel centre, clipped to `aabb`.
    pub fn ray<T: Real>(&self, row: usize, col: usize, aabb: &Aabb) -> Ray<T> {
        let dc = self.pixel_direction_camera(row, col);
        let dw: [f64; 3] = std::array::from_fn(|i| (0..3).map(|k| self.pose[i][k] * dc[k]).sum());
        let n = (dw[0] * dw[0] + dw[1] * dw[1] + dw[2] * dw[2]).sqrt();
        let dir = Vec3::from_f64([dw[0] / n, dw[1] / n, dw[2] / n]);
        Ray::clipped(Vec3::from_f64(self.position()), dir, aabb)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A posed image: one training or evaluation view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}

/// A ray clipped to the scene box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    pub dir: Vec3<T>,
    pub near: T,
    pub far: T,
    /// False when the ray misses the box; such rays composite to background.
    pub hit: bool,
}

impl<T: Real> Ray<T> {
    pub fn clipped(origin: Vec3<T>, dir: Vec3<T>, aabb: &Aabb) -> Self {
        match aabb.intersect(origin, dir) {
            Some((near, far)) => Self {
                origin,
                dir,
                near,
                far,
                hit: true,
            },
            None => Self {
                origin,
                dir,
                near: T::zero(),
                far: T::zero(),
                hit: false,
            },
        }
    }

    #[inline(always)]
    pub fn at(&self, t: T) -> Vec3<T> {
        self.origin + self.dir * t
    }
}

/// Rays for the given `(row, col)` pixels.
pub fn generate_rays<T: Real>(
    camera: &Camera,
    pixels: &[(usize, usize)],
    aabb: &Aabb,
) -> Result<Vec<Ray<T>>> {
    pixels
        .iter()
        .map(|&(r, c)| {
            if r >= camera.height || c >= camera.width {
                return Err(Error::invalid(format!(
                    "pixel ({r}, {c}) outside {}x{}",
                    camera.width, camera.height
                )));
            }
            Ok(camera.ray(r, c, aabb))
        })
        .collect()
}

/// A shading point and its marching interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample<T> {
    pub position: Vec3<T>,
    pub t: T,
    pub delta: T,
}

/// Counter-based jitter: the stream is the ray's identity within a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Jitter {
    pub seed: u64,
    pub stream: u64,
}

/// Uniform marching from `near` to `far` with spacing `step` (the last
/// interval truncated at `far`), dropping samples in empty occupancy voxels.
/// Samples sit at interval midpoints, or at a uniformly jittered offset.
pub fn sample_ray<T: Real>(
    ray: &Ray<T>,
    occupancy: Option<&OccupancyGrid>,
    step: T,
    jitter: Option<Jitter>,
    out: &mut Vec<Sample<T>>,
) {
    out.clear();
    if !ray.hit || !(step > T::zero()) {
        return;
    }
    let mut rng = jitter.map(|j| {
        let mut rng = ChaCha8Rng::seed_from_u64(j.seed);
        rng.set_stream(j.stream);
        rng
    });
    let n = ((ray.far - ray.near) / step).ceil().to_usize().unwrap_or(0);
    for k in 0..n {
        let t0 = ray.near + step * T::from_count(k);
        let t1 = (t0 + step).min(ray.far);
        if t1 <= t0 {
            break;
        }
        let delta = t1 - t0;
        let t = match rng.as_mut() {
            Some(r) => t0 + delta * T::lit(r.random::<f64>()),
            None => t0 + delta * T::lit(0.5),
        };
        let position = ray.at(t);
        if let Some(occ) = occupancy {
            if !occ.is_occupied(position.to_f64()) {
                continue;
            }
        }
        out.push(Sample { position, t, delta });
    }
}

/// Emission–absorption compositing:
/// `c = Σ_q T_q (1 − e^{−σ_q δ_q}) c_q + T_final · background`,
/// stopping once `T < early_stop`. Returns the pixel and `T_final`.
pub fn composite<T: Real>(
    sigmas: &[T],
    colors: &[[T; 3]],
    deltas: &[T],
    background: [T; 3],
    early_stop: T,
) -> ([T; 3], T) {
    assert!(
        sigmas.len() == colors.len() && sigmas.len() == deltas.len(),
        "composite inputs differ in length"
    );
    let mut trans = T::one();
    let mut rgb = [T::zero(); 3];
    for ((&sigma, color), &delta) in sigmas.iter().zip(colors).zip(deltas) {
        let decay = (-sigma * delta).exp();
        let w = trans * (T::one() - decay);
        for c in 0..3 {
            rgb[c] += w * color[c];
        }
        trans *= decay;
        if trans < early_stop {
            break;
        }
    }
    for c in 0..3 {
        rgb[c] += trans * background[c];
    }
    (rgb, trans)
}

/// Per-sample compositing weights `T_q (1 − e^{−σ_q δ_q})` (no early stop).
pub fn composite_weights<T: Real>(sigmas: &[T], deltas: &[T]) -> (Vec<T>, T) {
    let mut trans = T::one();
    let w = sigmas
        .iter()
        .zip(deltas)
        .map(|(&s, &d)| {
            let decay = (-s * d).exp();
            let w = trans * (T::one() - decay);
            trans *= decay;
            w
        })
        .collect();
    (w, trans)
}

/// Gradients of `g · composite(...)` w.r.t. every `σ_q` and `c_q`, without
/// early stopping.
pub fn composite_backward<T: Real>(
    sigmas: &[T],
    colors: &[[T; 3]],
    deltas: &[T],
    background: [T; 3],
    grad_pixel: [T; 3],
) -> (Vec<T>, Vec<[T; 3]>) {
    let n = sigmas.len();
    let mut after = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let mut trans = T::one();
    for q in 0..n {
        let decay = (-sigmas[q] * deltas[q]).exp();
        weights[q] = trans * (T::one() - decay);
        trans *= decay;
        after[q] = trans;
    }
    let dot = |c: &[T; 3]| c[0] * grad_pixel[0] + c[1] * grad_pixel[1] + c[2] * grad_pixel[2];
    let mut suffix = trans * dot(&background);
    let mut d_sigma = vec![T::zero(); n];
    let mut d_color = vec![[T::zero(); 3]; n];
    for q in (0..n).rev() {
        let cg = dot(&colors[q]);
        d_sigma[q] = deltas[q] * (after[q] * cg - suffix);
        d_color[q] = grad_pixel.map(|g| g * weights[q]);
        suffix += weights[q] * cg;
    }
    (d_sigma, d_color)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_pose() -> [[f64; 4]; 4] {
        [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    fn ray01() -> Ray<f64> {
        Ray {
            origin: Vec3::zero(),
            dir: Vec3::new(0.0, 0.0, 1.0),
            near: 0.0,
            far: 1.0,
            hit: true,
        }
    }

    #[test]
    fn center_pixel_looks_down_negative_z() {
        let cam = Camera::new(5, 5, 10.0, identity_pose()).unwrap();
        let r: Ray<f64> = cam.ray(
            2,
            2,
            &Aabb {
                min: [-10.0; 3],
                max: [10.0; 3],
            },
        );
        assert!((r.dir - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
        let all = generate_rays::<f64>(&cam, &[(0, 0), (4, 4), (1, 3)], &Aabb::default()).unwrap();
        assert!(all.iter().all(|r| r.origin == Vec3::zero()));
        assert!(generate_rays::<f64>(&cam, &[(5, 0)], &Aabb::default()).is_err());
    }

    #[test]
    fn corner_pixel_matches_pinhole_formula() {
        // Camera at (0, 0, 3) rotated 90° about Y: camera −Z maps to world −X.
        let pose = [
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0, 3.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let cam = Camera::new(8, 6, 7.5, pose).unwrap();
        let r: Ray<f64> = cam.ray(
            0,
            0,
            &Aabb {
                min: [-100.0; 3],
                max: [100.0; 3],
            },
        );
        let (u, v) = ((0.5 - 4.0) / 7.5, -(0.5 - 3.0) / 7.5);
        // World direction = R · (u, v, −1).
        let d = [-1.0, v, -u];
        let n: f64 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let n = n.sqrt();
        for a in 0..3 {
            assert!((r.dir[a] - d[a] / n).abs() < 1e-12);
        }
        assert_eq!(r.origin.to_f64(), [0.0, 0.0, 3.0]);
    }

    #[test]
    fn non_orthonormal_pose_rejected() {
        let mut pose = identity_pose();
        pose[0][0] = 2.0;
        assert!(Camera::new(4, 4, 1.0, pose).is_err());
        assert!(Camera::new(4, 4, 0.0, identity_pose()).is_err());
    }

    #[test]
    fn midpoint_samples() {
        let mut out = Vec::new();
        sample_ray(&ray01(), None, 0.25, None, &mut out);
        let ts: Vec<f64> = out.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(out.iter().all(|s| s.delta == 0.25));
    }

    #[test]
    fn last_interval_truncated() {
        let mut out = Vec::new();
        let ray = Ray {
            far: 0.9,
            ..ray01()
        };
        sample_ray(&ray, None, 0.25, None, &mut out);
        assert_eq!(out.len(), 4);
        assert!((out[3].delta - 0.15).abs() < 1e-12);
        assert!((out[3].t - 0.825).abs() < 1e-12);
    }

    #[test]
    fn empty_occupancy_drops_everything() {
        let occ = OccupancyGrid::empty(8, Aabb::default());
        let mut out = Vec::new();
        sample_ray(&ray01(), Some(&occ), 0.01, None, &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn half_occupied_grid_matches_recount() {
        let mut occ = OccupancyGrid::empty(10, Aabb::default());
        for k in 0..10 {
            for j in 0..10 {
                for i in 0..5 {
                    occ.set([i, j, k], true);
                }
            }
        }
        let ray = Ray::clipped(
            Vec3::new(-2.0, 0.13, 0.07),
            Vec3::new(1.0, 0.2, -0.1).normalized(),
            &Aabb::default(),
        );
        let mut all = Vec::new();
        sample_ray(&ray, None, 0.01, None, &mut all);
        let expected = all.iter().filter(|s| s.position.x < 0.0).count();
        let mut kept = Vec::new();
        sample_ray(&ray, Some(&occ), 0.01, None, &mut kept);
        assert_eq!(kept.len(), expected);
        assert!(expected > 0 && expected < all.len());
    }

    #[test]
    fn jitter_is_deterministic_and_within_interval() {
        let j = Jitter {
            seed: 42,
            stream: 7,
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        sample_ray(&ray01(), None, 0.1, Some(j), &mut a);
        sample_ray(&ray01(), None, 0.1, Some(j), &mut b);
        assert_eq!(a, b);
        for (k, s) in a.iter().enumerate() {
            let t0 = 0.1 * k as f64;
            assert!(s.t >= t0 && s.t < t0 + s.delta + 1e-12);
        }
        let mut c = Vec::new();
        sample_ray(
            &ray01(),
            None,
            0.1,
            Some(Jitter {
                seed: 42,
                stream: 8,
            }),
            &mut c,
        );
        assert_ne!(a, c);
    }

    #[test]
    fn composite_half_alpha() {
        let (rgb, t) = composite(
            &[2f64.ln()],
            &[[0.2, 0.4, 0.6]],
            &[1.0],
            [1.0, 1.0, 1.0],
            0.0,
        );
        for c in 0..3 {
            assert!((rgb[c] - (0.5 * [0.2, 0.4, 0.6][c] + 0.5)).abs() < 1e-12);
        }
        assert!((t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_density_is_background_exactly() {
        let bg = [0.3f32, 0.7, 0.9];
        let (rgb, t) = composite(&[0.0; 5], &[[0.1, 0.2, 0.3]; 5], &[0.1; 5], bg, 1e-4);
        assert_eq!(rgb, bg);
        assert_eq!(t, 1.0);
        let (rgb, t) = composite::<f32>(&[], &[], &[], bg, 1e-4);
        assert_eq!((rgb, t), (bg, 1.0));
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let sig = [0.5, 2.0, 0.1, 3.0];
        let col = [
            [0.1, 0.9, 0.3],
            [0.5, 0.5, 0.5],
            [0.8, 0.2, 0.4],
            [0.3, 0.3, 0.9],
        ];
        let del = [0.2, 0.1, 0.3, 0.25];
        let bg = [1.0, 0.5, 0.0];
        let g = [0.3, -0.7, 1.1];
        let f = |s: &[f64], c: &[[f64; 3]]| {
            let (rgb, _) = composite(s, c, &del, bg, 0.0);
            (0..3).map(|i| rgb[i] * g[i]).sum::<f64>()
        };
        let (ds, dc) = composite_backward(&sig, &col, &del, bg, g);
        let h = 1e-6;
        for q in 0..4 {
            let (mut a, mut b) = (sig, sig);
            a[q] += h;
            b[q] -= h;
            assert!(((f(&a, &col) - f(&b, &col)) / (2.0 * h) - ds[q]).abs() < 1e-8);
            for ch in 0..3 {
                let (mut a, mut b) = (col, col);
                a[q][ch] += h;
                b[q][ch] -= h;
                assert!(((f(&sig, &a) - f(&sig, &b)) / (2.0 * h) - dc[q][ch]).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn weights_and_transmittance_partition_unity(
            sig in proptest::collection::vec(0.0f64..50.0, 0..32),
            d in 0.001f64..0.2,
        ) {
            let deltas = vec![d; sig.len()];
            let (w, t) = composite_weights(&sig, &deltas);
            prop_assert!((w.iter().sum::<f64>() + t - 1.0).abs() <= 1e-5);
            let colors = vec![[1.0, 0.0, 0.5]; sig.len()];
            let (rgb, _) = composite(&sig, &colors, &deltas, [0.0, 1.0, 0.25], 0.0);
            prop_assert!(rgb.iter().all(|c| (0.0..=1.0 + 1e-12).contains(c)));
        }

        #[test]
        fn transmittance_is_monotone(sig in proptest::collection::vec(0.0f64..20.0, 1..32)) {
            let mut trans = 1.0;
            for s in sig {
                let next = trans * (-s * 0.05f64).exp();
                prop_assert!(next <= trans);
                trans = next;
            }
        }

        #[test]
        fn splitting_a_sample_is_invariant(
            sig in proptest::collection::vec(0.0f64..20.0, 1..12),
            k in 0usize..12,
            d in 0.01f64..0.3,
        ) {
            let k = k % sig.len();
            let colors: Vec<[f64; 3]> = (0..sig.len()).map(|i| [0.1 * i as f64 % 1.0, 0.5, 0.9]).collect();
            let deltas = vec![d; sig.len()];
            let (a, _) = composite(&sig, &colors, &deltas, [1.0; 3], 0.0);
            let mut s2 = sig.clone();
            let mut c2 = colors.clone();
            let mut d2 = deltas.clone();
            s2.insert(k, sig[k]);
            c2.insert(k, colors[k]);
            d2[k] = d / 2.0;
            d2.insert(k, d / 2.0);
            let (b, _) = composite(&s2, &c2, &d2, [1.0; 3], 0.0);
            for c in 0..3 { prop_assert!((a[c] - b[c]).abs() <= 1e-6); }
        }
    }
}
