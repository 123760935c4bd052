//! Deterministic geometric kernels: vectors, unit quaternions, SE(3)
//! transforms, brute-force KNN / farthest point sampling, RBF influence
//! weights and trajectory distance.
//!
//! Everything here is a pure function over immutable inputs.

use crate::error::{domain, Result};

/// A point or direction in world units. The object is normalized to fit in
/// the unit-radius sphere at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(self, o: Vec3) -> f64 {
        self.sub(o).norm()
    }

    pub fn dist_sq(self, o: Vec3) -> f64 {
        self.sub(o).norm_sq()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n == 0.0 {
            Vec3::ZERO
        } else {
            self.scale(1.0 / n)
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Unit quaternion on the canonical hemisphere (w >= 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes and flips onto the w >= 0 hemisphere.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<UnitQuat> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(domain("cannot normalize near-zero quaternion"));
        }
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        Ok(UnitQuat { w: w * s, x: x * s, y: y * s, z: z * s })
    }

    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> UnitQuat {
        let a = axis.normalized();
        let (s, c) = (angle_rad * 0.5).sin_cos();
        UnitQuat::from_wxyz(c, a.x * s, a.y * s, a.z * s).expect("unit axis")
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Builds a quaternion from a row-major rotation matrix (Shepperd's
    /// method, numerically stable branch selection).
    pub fn from_rotation_matrix(m: &[[f64; 3]; 3]) -> Result<UnitQuat> {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[2][1] - m[1][2]) / s;
            y = (m[0][2] - m[2][0]) / s;
            z = (m[1][0] - m[0][1]) / s;
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            w = (m[2][1] - m[1][2]) / s;
            x = 0.25 * s;
            y = (m[0][1] + m[1][0]) / s;
            z = (m[0][2] + m[2][0]) / s;
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            w = (m[0][2] - m[2][0]) / s;
            x = (m[0][1] + m[1][0]) / s;
            y = 0.25 * s;
            z = (m[1][2] + m[2][1]) / s;
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            w = (m[1][0] - m[0][1]) / s;
            x = (m[0][2] + m[2][0]) / s;
            y = (m[1][2] + m[2][1]) / s;
            z = 0.25 * s;
        }
        UnitQuat::from_wxyz(w, x, y, z)
    }

    /// Hamilton product self * other (apply other first, then self).
    pub fn mul(self, o: UnitQuat) -> UnitQuat {
        let w = self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z;
        let x = self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y;
        let y = self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x;
        let z = self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w;
        UnitQuat::from_wxyz(w, x, y, z).expect("product of unit quaternions")
    }

    pub fn conjugate(self) -> UnitQuat {
        UnitQuat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Rotates a vector: v' = q v q*.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v).scale(2.0);
        v.add(t.scale(self.w)).add(u.cross(t))
    }

    pub fn dot(self, o: UnitQuat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Rigid transform: rotate then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3 {
    pub rotation: UnitQuat,
    pub translation: Vec3,
}

impl SE3 {
    pub const IDENTITY: SE3 = SE3 { rotation: UnitQuat::IDENTITY, translation: Vec3::ZERO };

    pub fn new(rotation: UnitQuat, translation: Vec3) -> SE3 {
        SE3 { rotation, translation }
    }

    pub fn apply(self, p: Vec3) -> Vec3 {
        self.rotation.rotate(p).add(self.translation)
    }

    /// self ∘ other: apply other first.
    pub fn compose(self, o: SE3) -> SE3 {
        SE3 {
            rotation: self.rotation.mul(o.rotation),
            translation: self.rotation.rotate(o.translation).add(self.translation),
        }
    }

    pub fn inverse(self) -> SE3 {
        let r = self.rotation.conjugate();
        SE3 { rotation: r, translation: r.rotate(self.translation).scale(-1.0) }
    }
}

/// Unnormalized RBF kernel of Eq-style influence: exp(-d^2 / (2 r)).
/// The radius enters linearly (variance-like), not squared.
pub fn rbf_kernel(dist_sq: f64, radius: f64) -> f64 {
    (-dist_sq / (2.0 * radius)).exp()
}

/// Normalized RBF influence weights of each query against its neighbor set.
///
/// Row j holds, for each keypoint k, the weight of k on query j; weights are
/// normalized to sum to 1 over the query's neighbor set and are exactly 0
/// outside it.
pub fn rbf_weights(
    queries: &[Vec3],
    keypoints: &[Vec3],
    radii: &[f64],
    neighbor_sets: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    if radii.len() != keypoints.len() {
        return Err(domain("radii length must match keypoints"));
    }
    if neighbor_sets.len() != queries.len() {
        return Err(domain("one neighbor set required per query"));
    }
    for &r in radii {
        if !(r > 0.0) {
            return Err(domain(format!("non-positive radius {r}")));
        }
    }
    let mut out = vec![vec![0.0; keypoints.len()]; queries.len()];
    for (j, q) in queries.iter().enumerate() {
        let set = &neighbor_sets[j];
        if set.is_empty() {
            return Err(domain(format!("empty neighbor set for query {j}")));
        }
        let mut sum = 0.0;
        for &k in set {
            let w = rbf_kernel(q.dist_sq(keypoints[k]), radii[k]);
            out[j][k] = w;
            sum += w;
        }
        if sum <= 0.0 {
            return Err(domain(format!("all-zero RBF weights for query {j}")));
        }
        for &k in set {
            out[j][k] /= sum;
        }
    }
    Ok(out)
}

/// Brute-force K-nearest neighbors over precomputed pairwise distances.
/// Self excluded; indices sorted by ascending distance, ties by index.
pub fn knn_by<F: Fn(usize, usize) -> f64>(n: usize, k: usize, dist: F) -> Result<Vec<Vec<usize>>> {
    if k >= n {
        return Err(domain(format!("knn: k={k} must be < point count {n}")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        cand.sort_by(|&a, &b| {
            dist(i, a).partial_cmp(&dist(i, b)).unwrap().then(a.cmp(&b))
        });
        cand.truncate(k);
        out.push(cand);
    }
    Ok(out)
}

/// K-nearest neighbors of 3D points under Euclidean distance.
pub fn knn(points: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    knn_by(points.len(), k, |i, j| points[i].dist_sq(points[j]))
}

/// Greedy farthest point sampling. First pick is `start_index`; every
/// subsequent pick maximizes the min-distance to the already selected set,
/// ties broken by ascending index.
pub fn fps(points: &[Vec3], m: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(domain(format!("fps: m={m} exceeds point count {n}")));
    }
    if start_index >= n {
        return Err(domain(format!("fps: start_index {start_index} out of range")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut picked = vec![false; n];
    selected.push(start_index);
    picked[start_index] = true;
    while selected.len() < m {
        let last = *selected.last().unwrap();
        for j in 0..n {
            if !picked[j] {
                let d = points[j].dist_sq(points[last]);
                if d < min_dist[j] {
                    min_dist[j] = d;
                }
            }
        }
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if !picked[j] && min_dist[j] > best_d {
                best_d = min_dist[j];
                best = j;
            }
        }
        selected.push(best);
        picked[best] = true;
    }
    Ok(selected)
}

/// Distance between two equal-length trajectories: Euclidean norm of the
/// concatenated 3T-vectors, divided by T.
pub fn trajectory_distance(traj_a: &[Vec3], traj_b: &[Vec3]) -> Result<f64> {
    if traj_a.len() != traj_b.len() {
        return Err(domain("trajectory length mismatch"));
    }
    if traj_a.is_empty() {
        return Err(domain("empty trajectory"));
    }
    let sq: f64 = traj_a.iter().zip(traj_b).map(|(a, b)| a.dist_sq(*b)).sum();
    Ok(sq.sqrt() / traj_a.len() as f64)
}

/// Blends unit quaternions by sign-aligned normalized weighted sum (QLERP).
/// All inputs are flipped onto the hemisphere of the highest-weight
/// quaternion before summation.
pub fn blend_rotations(quats: &[UnitQuat], weights: &[f64]) -> Result<UnitQuat> {
    if quats.is_empty() || quats.len() != weights.len() {
        return Err(domain("blend_rotations: quats/weights length mismatch or empty"));
    }
    let pivot = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap();
    if weights[pivot] <= 0.0 {
        return Err(domain("blend_rotations: at least one weight must be > 0"));
    }
    let pq = quats[pivot];
    let (mut w, mut x, mut y, mut z) = (0.0, 0.0, 0.0, 0.0);
    for (q, &wt) in quats.iter().zip(weights) {
        let sign = if q.dot(pq) < 0.0 { -1.0 } else { 1.0 };
        let s = sign * wt;
        w += s * q.w;
        x += s * q.x;
        y += s * q.y;
        z += s * q.z;
    }
    UnitQuat::from_wxyz(w, x, y, z)
        .map_err(|_| domain("blend_rotations: degenerate (antipodal) blend"))
}
