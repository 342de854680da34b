//! Rotation algebra on SO(3), goal sampling, and the basis-point shape
//! encoding for cuboids.
//!
//! Rotations are unit quaternions stored in the `w >= 0` hemisphere so that
//! serialization is deterministic. All functions here are pure.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::So3Error;

pub type Vec3 = [f64; 3];

/// Tolerance used when validating externally supplied quaternions.
pub const UNIT_TOLERANCE: f64 = 1e-6;

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Unit quaternion representing an element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            w: f64,
            x: f64,
            y: f64,
            z: f64,
        }
        let raw = Raw::deserialize(deserializer)?;
        Rotation::from_quaternion(raw.w, raw.x, raw.y, raw.z).map_err(serde::de::Error::custom)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes the quaternion. Fails on zero or
    /// non-finite input.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self, So3Error> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(So3Error::InvalidRotation(format!(
                "cannot normalize quaternion ({w}, {x}, {y}, {z})"
            )));
        }
        Ok(Self::canonical(w / n, x / n, y / n, z / n))
    }

    /// Builds a rotation without normalizing. Only for testing validation
    /// paths and for decoding data that is checked later.
    pub fn from_raw_parts(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rotation { w, x, y, z }
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        // Near w == 0 the sign is decided by the first significant component.
        let flip = if w.abs() > 1e-12 {
            w < 0.0
        } else {
            [x, y, z]
                .into_iter()
                .find(|c| c.abs() > 1e-12)
                .map(|c| c < 0.0)
                .unwrap_or(false)
        };
        if flip {
            Rotation {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            Rotation { w, x, y, z }
        }
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn quaternion_norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn validate(&self) -> Result<(), So3Error> {
        let n = self.quaternion_norm();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(So3Error::InvalidRotation(format!(
                "quaternion norm {n} is not 1"
            )));
        }
        Ok(())
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self, So3Error> {
        let n = norm(axis);
        if !(n > 1e-12) {
            return Err(So3Error::InvalidRotation("zero rotation axis".into()));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let k = s / n;
        Self::from_quaternion(c, axis[0] * k, axis[1] * k, axis[2] * k)
    }

    pub fn about_x(angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        Self::canonical(c, s, 0.0, 0.0)
    }

    pub fn about_y(angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        Self::canonical(c, 0.0, s, 0.0)
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        Self::canonical(c, 0.0, 0.0, s)
    }

    /// Exponential map from a rotation vector (axis times angle).
    pub fn exp(v: Vec3) -> Self {
        let theta = norm(v);
        let half = 0.5 * theta;
        // sin(theta/2)/theta, with its Taylor expansion near zero.
        let k = if theta < 1e-6 {
            0.5 - theta * theta / 48.0
        } else {
            half.sin() / theta
        };
        let w = half.cos();
        let (x, y, z) = (v[0] * k, v[1] * k, v[2] * k);
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    /// Logarithm map; the returned vector has norm in [0, pi].
    pub fn log(&self) -> Vec3 {
        let v = [self.x, self.y, self.z];
        let s = norm(v);
        if s < 1e-15 {
            return [0.0; 3];
        }
        let theta = 2.0 * s.atan2(self.w);
        scale(v, theta / s)
    }

    /// Composition `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let (a, b) = (self, other);
        let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
        let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
        let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
        let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    pub fn inverse(&self) -> Rotation {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let u = [self.x, self.y, self.z];
        let t = scale(cross(u, v), 2.0);
        add(add(v, scale(t, self.w)), cross(u, t))
    }

    /// Rotation angle in [0, pi].
    pub fn angle(&self) -> f64 {
        let s = norm([self.x, self.y, self.z]);
        2.0 * s.atan2(self.w.abs())
    }

    /// Row-major rotation matrix.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Converts an orthonormal, right-handed matrix (row-major) to a rotation.
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Result<Self, So3Error> {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let (w, x, y, z) = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            (
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            (
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            (
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            (
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        Self::from_quaternion(w, x, y, z)
    }
}

/// Angle of the relative rotation between `a` and `b`, in [0, pi].
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> Result<f64, So3Error> {
    a.validate()?;
    b.validate()?;
    Ok(geodesic_distance_unchecked(a, b))
}

/// Same as [`geodesic_distance`] for rotations already known to be unit.
pub fn geodesic_distance_unchecked(a: &Rotation, b: &Rotation) -> f64 {
    // |<a, b>| = cos(theta / 2); the cross term gives sin(theta / 2).
    let d = (a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z).abs();
    let rel = a.inverse().compose(b);
    let s = norm([rel.x, rel.y, rel.z]);
    2.0 * s.atan2(d)
}

/// Haar-uniform rotation (Shoemake's subgroup algorithm).
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (s2, c2) = (2.0 * PI * u2).sin_cos();
    let (s3, c3) = (2.0 * PI * u3).sin_cos();
    Rotation::from_quaternion(b * c3, a * s2, a * c2, b * s3).unwrap_or(Rotation::IDENTITY)
}

/// `goal ∘ estimate⁻¹`: the rotation that still has to be applied to reach
/// the goal.
pub fn relative_rotation(goal: &Rotation, estimate: &Rotation) -> Rotation {
    goal.compose(&estimate.inverse())
}

/// First two columns of the rotation matrix, flattened column by column.
pub fn rotation_to_feature(r: &Rotation) -> [f64; 6] {
    let m = r.to_matrix();
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Gram–Schmidt with first-column priority. Returns the three orthonormal
/// columns.
pub fn gram_schmidt(feature: &[f64; 6]) -> Result<[Vec3; 3], So3Error> {
    let a1 = [feature[0], feature[1], feature[2]];
    let a2 = [feature[3], feature[4], feature[5]];
    let n1 = norm(a1);
    if !(n1 > 1e-12) {
        return Err(So3Error::InvalidRotation("degenerate first column".into()));
    }
    let b1 = scale(a1, 1.0 / n1);
    let u2 = sub(a2, scale(b1, dot(b1, a2)));
    let n2 = norm(u2);
    if !(n2 > 1e-12) {
        return Err(So3Error::InvalidRotation("degenerate second column".into()));
    }
    let b2 = scale(u2, 1.0 / n2);
    Ok([b1, b2, cross(b1, b2)])
}

pub fn rotation_from_feature(feature: &[f64; 6]) -> Result<Rotation, So3Error> {
    let [b1, b2, b3] = gram_schmidt(feature)?;
    let m = [
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ];
    Rotation::from_matrix(&m)
}

/// Maximum breadth-first depth when the generated group is not finite.
pub const GOAL_SET_MAX_DEPTH: usize = 8;

/// Rotations generated by compositions of `±step` rotations about the three
/// principal axes, deduplicated and in breadth-first order.
pub fn discretized_goal_set(step: f64) -> Result<Vec<Rotation>, So3Error> {
    let ratio = PI / step;
    if !step.is_finite() || step <= 0.0 || (ratio - ratio.round()).abs() > 1e-9 {
        return Err(So3Error::InvalidArgument(format!(
            "step {step} does not divide pi"
        )));
    }
    let generators = [
        Rotation::about_x(step),
        Rotation::about_x(-step),
        Rotation::about_y(step),
        Rotation::about_y(-step),
        Rotation::about_z(step),
        Rotation::about_z(-step),
    ];
    let mut seen: HashMap<[i64; 4], ()> = HashMap::new();
    let mut out = vec![Rotation::IDENTITY];
    seen.insert(goal_key(&Rotation::IDENTITY), ());
    let mut frontier: VecDeque<(Rotation, usize)> = VecDeque::from([(Rotation::IDENTITY, 0)]);
    while let Some((r, depth)) = frontier.pop_front() {
        if depth == GOAL_SET_MAX_DEPTH {
            continue;
        }
        for g in &generators {
            let next = g.compose(&r);
            if is_known(&seen, &next) {
                continue;
            }
            seen.insert(goal_key(&next), ());
            out.push(next);
            frontier.push_back((next, depth + 1));
        }
    }
    Ok(out)
}

const KEY_RESOLUTION: f64 = 1e-7;

fn goal_key(r: &Rotation) -> [i64; 4] {
    r.to_array().map(|c| (c / KEY_RESOLUTION).round() as i64)
}

// Duplicates closer than 1e-6 rad can land in neighbouring cells; probe
// them, and the antipodal cells near w == 0.
fn is_known(seen: &HashMap<[i64; 4], ()>, r: &Rotation) -> bool {
    let base = goal_key(r);
    let neg = r.to_array().map(|c| (-c / KEY_RESOLUTION).round() as i64);
    for key in [base, neg] {
        if key != base && r.w().abs() > 1e-6 {
            continue;
        }
        for d0 in -1..=1 {
            for d1 in -1..=1 {
                for d2 in -1..=1 {
                    for d3 in -1..=1 {
                        let k = [key[0] + d0, key[1] + d1, key[2] + d2, key[3] + d3];
                        if seen.contains_key(&k) {
                            return true;
                        }
                    }
                }
            }
        }
    }
    false
}

/// Rigid placement of an object in the hand frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Rotation,
}

impl Pose {
    pub fn new(position: Vec3, orientation: Rotation) -> Result<Self, So3Error> {
        if position.iter().any(|c| !c.is_finite()) {
            return Err(So3Error::InvalidArgument("non-finite position".into()));
        }
        Ok(Pose {
            position,
            orientation,
        })
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        add(self.orientation.rotate(p), self.position)
    }

    pub fn inverse_transform_point(&self, p: Vec3) -> Vec3 {
        self.orientation.inverse().rotate(sub(p, self.position))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cuboid {
    half_extents: Vec3,
}

impl<'de> Deserialize<'de> for Cuboid {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            half_extents: Vec3,
        }
        let raw = Raw::deserialize(deserializer)?;
        Cuboid::new(raw.half_extents).map_err(serde::de::Error::custom)
    }
}

/// Largest supported ratio between the longest and shortest side.
pub const MAX_ASPECT_RATIO: f64 = 2.0;

impl Cuboid {
    pub fn new(half_extents: Vec3) -> Result<Self, So3Error> {
        if half_extents.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(So3Error::InvalidArgument(
                "cuboid half extents must be positive".into(),
            ));
        }
        let max = half_extents.iter().cloned().fold(f64::MIN, f64::max);
        let min = half_extents.iter().cloned().fold(f64::MAX, f64::min);
        if max / min > MAX_ASPECT_RATIO + 1e-12 {
            return Err(So3Error::InvalidArgument(format!(
                "cuboid aspect ratio {} exceeds {MAX_ASPECT_RATIO}",
                max / min
            )));
        }
        Ok(Cuboid { half_extents })
    }

    pub fn cube(half_extent: f64) -> Result<Self, So3Error> {
        Self::new([half_extent; 3])
    }

    pub fn half_extents(&self) -> Vec3 {
        self.half_extents
    }
}

/// Closest point on the cuboid surface. Interior queries are pushed to the
/// nearest face; ties go to the smallest axis index and the positive side.
pub fn closest_point_on_cuboid(pose: &Pose, shape: &Cuboid, query: Vec3) -> Vec3 {
    let h = shape.half_extents;
    let p = pose.inverse_transform_point(query);
    let outside = (0..3).any(|i| p[i].abs() > h[i]);
    let local = if outside {
        [
            p[0].clamp(-h[0], h[0]),
            p[1].clamp(-h[1], h[1]),
            p[2].clamp(-h[2], h[2]),
        ]
    } else {
        let mut best = 0;
        let mut best_gap = h[0] - p[0].abs();
        for i in 1..3 {
            let gap = h[i] - p[i].abs();
            if gap < best_gap {
                best = i;
                best_gap = gap;
            }
        }
        let mut out = p;
        out[best] = if p[best] < 0.0 { -h[best] } else { h[best] };
        out
    };
    pose.transform_point(local)
}

/// Fixed reference points in the hand frame used for the shape encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisPointSet {
    points: Vec<Vec3>,
}

fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut factor = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * factor;
        index /= base;
        factor *= inv;
    }
    out
}

impl BasisPointSet {
    pub fn new(points: Vec<Vec3>) -> Result<Self, So3Error> {
        if points.is_empty() {
            return Err(So3Error::InvalidArgument("empty basis point set".into()));
        }
        for (i, a) in points.iter().enumerate() {
            if a.iter().any(|c| !c.is_finite()) {
                return Err(So3Error::InvalidArgument("non-finite basis point".into()));
            }
            for b in &points[..i] {
                if norm(sub(*a, *b)) < 1e-12 {
                    return Err(So3Error::InvalidArgument(
                        "basis points must be pairwise distinct".into(),
                    ));
                }
            }
        }
        Ok(BasisPointSet { points })
    }

    /// Halton (2, 3, 5) points rejected to the ball of `radius` around
    /// `center`.
    pub fn halton_ball(count: usize, radius: f64, center: Vec3) -> Result<Self, So3Error> {
        if count == 0 || !(radius > 0.0) {
            return Err(So3Error::InvalidArgument(
                "basis set needs count >= 1 and radius > 0".into(),
            ));
        }
        let mut points = Vec::with_capacity(count);
        let mut index = 1u64;
        while points.len() < count {
            let u = [
                2.0 * radical_inverse(index, 2) - 1.0,
                2.0 * radical_inverse(index, 3) - 1.0,
                2.0 * radical_inverse(index, 5) - 1.0,
            ];
            index += 1;
            if dot(u, u) <= 1.0 {
                points.push(add(center, scale(u, radius)));
            }
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Vector from each basis point to its closest point on the posed cuboid.
pub fn basis_point_encoding(pose: &Pose, shape: &Cuboid, basis: &BasisPointSet) -> Vec<Vec3> {
    basis
        .points
        .iter()
        .map(|&p| sub(closest_point_on_cuboid(pose, shape, p), p))
        .collect()
}
