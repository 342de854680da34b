//! Rotation oracles: matrix-trace angles, brute-force group closure, and a
//! node grid over cuboid surfaces.

use std::f64::consts::PI;

use gaitspeed_core::so3::{
    closest_point_on_cuboid, geodesic_distance_unchecked, sample_uniform_rotation, Cuboid, Pose, Rotation, Vec3,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Angle from the rotation matrix trace, independent of the quaternion path.
pub fn trace_angle(a: &Rotation, b: &Rotation) -> f64 {
    let ma = a.to_matrix();
    let mb = b.to_matrix();
    // trace(A^T B)
    let mut tr = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            tr += ma[j][i] * mb[j][i];
        }
    }
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub struct AngleHistogram {
    pub chi2: f64,
    pub p_value: f64,
    pub mean: f64,
}

/// χ² test of sampled angles to identity against the density
/// `(1 - cos t) / π`, whose CDF is `(t - sin t) / π`.
pub fn uniform_angle_histogram(seed: u64, n: usize, bins: usize) -> AngleHistogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; bins];
    let id = Rotation::IDENTITY;
    let mut sum = 0.0;
    for _ in 0..n {
        let theta = geodesic_distance_unchecked(&id, &sample_uniform_rotation(&mut rng));
        sum += theta;
        counts[((theta / PI * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let cdf = |t: f64| (t - t.sin()) / PI;
    let mut chi2 = 0.0;
    for (k, &c) in counts.iter().enumerate() {
        let lo = k as f64 * PI / bins as f64;
        let hi = (k + 1) as f64 * PI / bins as f64;
        let expected = n as f64 * (cdf(hi) - cdf(lo));
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    let p_value = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
    AngleHistogram {
        chi2,
        p_value,
        mean: sum / n as f64,
    }
}

/// Closure of the axis generators by repeated composition, deduplicated.
pub fn brute_force_closure(step: f64) -> Vec<Rotation> {
    let gens: Vec<Rotation> = [1.0, -1.0]
        .iter()
        .flat_map(|s| {
            [
                Rotation::about_x(s * step),
                Rotation::about_y(s * step),
                Rotation::about_z(s * step),
            ]
        })
        .collect();
    let mut set = vec![Rotation::IDENTITY];
    loop {
        let mut added = false;
        for a in set.clone() {
            for g in &gens {
                let c = g.compose(&a);
                if !set.iter().any(|s| geodesic_distance_unchecked(s, &c) < 1e-6) {
                    set.push(c);
                    added = true;
                }
            }
        }
        if !added {
            return set;
        }
    }
}

/// About `n` surface points on a node grid over all six faces, in the world
/// frame. Nodes include the edges and corners, where outside queries
/// usually project.
pub fn surface_grid(pose: &Pose, shape: &Cuboid, n: usize) -> Vec<Vec3> {
    let h = shape.half_extents();
    let area = 8.0 * (h[1] * h[2] + h[0] * h[2] + h[0] * h[1]);
    let spacing = (area / n as f64).sqrt();
    let mut out = Vec::with_capacity(n + 64);
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let nu = ((2.0 * h[u] / spacing).round() as usize).max(1);
        let nv = ((2.0 * h[v] / spacing).round() as usize).max(1);
        for sign in [-1.0, 1.0] {
            for i in 0..=nu {
                for j in 0..=nv {
                    let mut p = [0.0; 3];
                    p[axis] = sign * h[axis];
                    p[u] = -h[u] + i as f64 * 2.0 * h[u] / nu as f64;
                    p[v] = -h[v] + j as f64 * 2.0 * h[v] / nv as f64;
                    out.push(pose.transform_point(p));
                }
            }
        }
    }
    out
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub struct ClosestPointAgreement {
    /// Largest `(grid - exact) / exact` distance gap.
    pub worst_gap: f64,
    /// Queries where the grid found a point closer than the exact answer.
    pub undercuts: usize,
    pub queries: usize,
}

/// Exact closest-point distances against the minimum over a ~10⁴ node
/// surface grid, for random posed cuboids (aspect ≤ 2) and queries at least
/// 1 cm outside. From outside, the grid minimum converges from above.
pub fn closest_point_agreement(seed: u64, attempts: usize) -> ClosestPointAgreement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ClosestPointAgreement {
        worst_gap: 0.0,
        undercuts: 0,
        queries: 0,
    };
    for _ in 0..attempts {
        let h = [rng.random_range(0.02..0.04), rng.random_range(0.02..0.04), rng.random_range(0.02..0.04)];
        let max = h.iter().copied().fold(0.0, f64::max);
        let min = h.iter().copied().fold(f64::INFINITY, f64::min);
        if max / min > 2.0 {
            continue;
        }
        let shape = Cuboid::new(h).unwrap();
        let pose = Pose::new(
            [rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)],
            sample_uniform_rotation(&mut rng),
        )
        .unwrap();
        let q = loop {
            let q = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
            let local = pose.inverse_transform_point(q);
            if (0..3).any(|i| local[i].abs() > h[i] + 0.01) {
                break q;
            }
        };
        let exact = dist(closest_point_on_cuboid(&pose, &shape, q), q);
        let sampled = surface_grid(&pose, &shape, 10_000)
            .into_iter()
            .map(|p| dist(p, q))
            .fold(f64::INFINITY, f64::min);
        if exact > sampled + 1e-12 {
            out.undercuts += 1;
        }
        out.worst_gap = out.worst_gap.max((sampled - exact) / exact);
        out.queries += 1;
    }
    out
}
