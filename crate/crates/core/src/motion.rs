//! Keypoint-driven motion representation: sparse keypoints with influence
//! radii, a co-movement graph over their trajectories, cached per-motion
//! transforms, and linear blend skinning of canonical Gaussians.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{domain, Result};
use crate::geom::{
    blend_rotations, knn, knn_by, rbf_weights, trajectory_distance, SE3, UnitQuat, Vec3,
};

/// Sparse control points in canonical space. Radii are stored in log form so
/// they stay positive under unconstrained optimization.
#[derive(Debug, Clone)]
pub struct KeyPointSet {
    pub positions: Vec<Vec3>,
    pub log_radii: Vec<f64>,
}

impl KeyPointSet {
    pub fn new(positions: Vec<Vec3>, log_radii: Vec<f64>) -> Result<KeyPointSet> {
        if positions.is_empty() {
            return Err(domain("keypoint set must be non-empty"));
        }
        if positions.len() != log_radii.len() {
            return Err(domain("positions/log_radii length mismatch"));
        }
        if !positions.iter().all(|p| p.is_finite()) || !log_radii.iter().all(|r| r.is_finite()) {
            return Err(domain("non-finite keypoint data"));
        }
        Ok(KeyPointSet { positions, log_radii })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn radii(&self) -> Vec<f64> {
        self.log_radii.iter().map(|r| r.exp()).collect()
    }

    /// ASCII PLY with per-vertex influence radius.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", self.len());
        s.push_str("property float x\nproperty float y\nproperty float z\nproperty float radius\nend_header\n");
        for (p, lr) in self.positions.iter().zip(&self.log_radii) {
            let _ = writeln!(s, "{} {} {} {}", p.x, p.y, p.z, lr.exp());
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// K-nearest-neighbor edges over keypoints (no self edges).
#[derive(Debug, Clone)]
pub struct MotionGraph {
    pub edges: Vec<Vec<usize>>,
    pub degree: usize,
}

/// Cached per-motion keypoint transforms, indexed [motion][frame][keypoint].
#[derive(Debug, Clone)]
pub struct TrajectoryCache {
    pub transforms: Vec<Vec<Vec<SE3>>>,
    pub motion_count: usize,
    pub frame_count: usize,
}

impl TrajectoryCache {
    pub fn new(transforms: Vec<Vec<Vec<SE3>>>) -> Result<TrajectoryCache> {
        let motion_count = transforms.len();
        if motion_count == 0 {
            return Err(domain("trajectory cache must hold at least one motion"));
        }
        let frame_count = transforms[0].len();
        for per_motion in &transforms {
            if per_motion.len() != frame_count || frame_count == 0 {
                return Err(domain("inconsistent or empty frame counts in trajectory cache"));
            }
            for frame in per_motion {
                if frame.len() != transforms[0][0].len() {
                    return Err(domain("inconsistent keypoint counts in trajectory cache"));
                }
                for tf in frame {
                    if !tf.rotation.is_finite() || !tf.translation.is_finite() {
                        return Err(domain("non-finite transform in trajectory cache"));
                    }
                }
            }
        }
        Ok(TrajectoryCache { transforms, motion_count, frame_count })
    }

    pub fn keypoint_count(&self) -> usize {
        self.transforms[0][0].len()
    }

    /// World-space path of keypoint `k` under motion `m`. A keypoint rotates
    /// about itself, so its deformed position is p_k plus the translation.
    pub fn keypoint_path(&self, m: usize, k: usize, canonical: Vec3) -> Vec<Vec3> {
        (0..self.frame_count)
            .map(|t| canonical.add(self.transforms[m][t][k].translation))
            .collect()
    }
}

/// Canonical 3D Gaussians: isotropic rendering consumes the mean of the three
/// axis scales; rotations still ride along under skinning for export.
#[derive(Debug, Clone)]
pub struct GaussianSet {
    pub centers: Vec<Vec3>,
    pub rotations: Vec<UnitQuat>,
    pub log_scales: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl GaussianSet {
    pub fn new(
        centers: Vec<Vec3>,
        rotations: Vec<UnitQuat>,
        log_scales: Vec<Vec3>,
        opacity_logits: Vec<f64>,
        colors: Vec<[f64; 3]>,
    ) -> Result<GaussianSet> {
        let n = centers.len();
        if n == 0 {
            return Err(domain("gaussian set must be non-empty"));
        }
        if rotations.len() != n || log_scales.len() != n || opacity_logits.len() != n || colors.len() != n {
            return Err(domain("gaussian field length mismatch"));
        }
        if !centers.iter().all(|c| c.is_finite()) {
            return Err(domain("non-finite gaussian centers"));
        }
        Ok(GaussianSet { centers, rotations, log_scales, opacity_logits, colors })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.opacity_logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect()
    }

    /// Mean of the three axis scales; the isotropic footprint the renderer uses.
    pub fn mean_scale(&self, i: usize) -> f64 {
        let s = self.log_scales[i];
        (s.x.exp() + s.y.exp() + s.z.exp()) / 3.0
    }

    /// ASCII PLY with scale, opacity and color per vertex.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", self.len());
        s.push_str(concat!(
            "property float x\nproperty float y\nproperty float z\n",
            "property float scale_0\nproperty float scale_1\nproperty float scale_2\n",
            "property float opacity\n",
            "property float red\nproperty float green\nproperty float blue\nend_header\n"
        ));
        let op = self.opacities();
        for i in 0..self.len() {
            let c = self.centers[i];
            let sc = self.log_scales[i];
            let col = self.colors[i];
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {} {} {}",
                c.x, c.y, c.z, sc.x.exp(), sc.y.exp(), sc.z.exp(), op[i], col[0], col[1], col[2]
            );
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Builds the keypoint neighbor graph. With trajectories, edges follow
/// co-movement: pairwise trajectory distances averaged over all motions.
/// Without (before any motion exists), canonical Euclidean KNN.
pub fn build_motion_graph(
    keypoints: &KeyPointSet,
    trajectories: Option<&TrajectoryCache>,
    degree: usize,
) -> Result<MotionGraph> {
    let edges = match trajectories {
        None => knn(&keypoints.positions, degree)?,
        Some(cache) => {
            if cache.keypoint_count() != keypoints.len() {
                return Err(domain("trajectory cache keypoint count mismatch"));
            }
            let n = keypoints.len();
            let paths: Vec<Vec<Vec<Vec3>>> = (0..cache.motion_count)
                .map(|m| (0..n).map(|k| cache.keypoint_path(m, k, keypoints.positions[k])).collect())
                .collect();
            let mut dist = vec![0.0; n * n];
            for m in 0..cache.motion_count {
                for i in 0..n {
                    for j in (i + 1)..n {
                        let d = trajectory_distance(&paths[m][i], &paths[m][j])?;
                        dist[i * n + j] += d;
                        dist[j * n + i] += d;
                    }
                }
            }
            let inv_m = 1.0 / cache.motion_count as f64;
            knn_by(n, degree, |i, j| dist[i * n + j] * inv_m)?
        }
    };
    Ok(MotionGraph { edges, degree })
}

/// Per-Gaussian driver keypoints and blend weights. `drivers[i]` is the
/// anchor (nearest keypoint) followed by the anchor's graph neighbors;
/// `weights[i]` is parallel to it and sums to 1.
#[derive(Debug, Clone)]
pub struct SkinningAssignment {
    pub anchors: Vec<usize>,
    pub drivers: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl SkinningAssignment {
    /// Driver count shared by every Gaussian (anchor + graph degree).
    pub fn driver_count(&self) -> usize {
        self.drivers[0].len()
    }
}

pub fn skinning_assignment(
    gaussians: &GaussianSet,
    keypoints: &KeyPointSet,
    graph: &MotionGraph,
) -> Result<SkinningAssignment> {
    if graph.edges.len() != keypoints.len() {
        return Err(domain("graph/keypoint count mismatch"));
    }
    let radii = keypoints.radii();
    let mut anchors = Vec::with_capacity(gaussians.len());
    let mut drivers = Vec::with_capacity(gaussians.len());
    for c in &gaussians.centers {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, p) in keypoints.positions.iter().enumerate() {
            let d = c.dist_sq(*p);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        let mut set = Vec::with_capacity(1 + graph.degree);
        set.push(best);
        set.extend_from_slice(&graph.edges[best]);
        anchors.push(best);
        drivers.push(set);
    }
    let dense = rbf_weights(&gaussians.centers, &keypoints.positions, &radii, &drivers)?;
    let weights = drivers
        .iter()
        .zip(&dense)
        .map(|(set, row)| set.iter().map(|&k| row[k]).collect())
        .collect();
    Ok(SkinningAssignment { anchors, drivers, weights })
}

/// Linear blend skinning: each driver rotates the Gaussian about the driver's
/// canonical position, then translates; results mix by the skinning weights.
/// Returns deformed centers and rotations (scales/opacity/color are unchanged
/// by deformation).
pub fn lbs_deform(
    gaussians: &GaussianSet,
    keypoints: &KeyPointSet,
    assignment: &SkinningAssignment,
    transforms: &[SE3],
) -> Result<(Vec<Vec3>, Vec<UnitQuat>)> {
    if transforms.len() != keypoints.len() {
        return Err(domain("one transform required per keypoint"));
    }
    if assignment.drivers.len() != gaussians.len() {
        return Err(domain("assignment/gaussian count mismatch"));
    }
    let mut centers = Vec::with_capacity(gaussians.len());
    let mut rotations = Vec::with_capacity(gaussians.len());
    for i in 0..gaussians.len() {
        let mu = gaussians.centers[i];
        let set = &assignment.drivers[i];
        let w = &assignment.weights[i];
        let mut out = Vec3::ZERO;
        let mut quats = Vec::with_capacity(set.len());
        for (&k, &wk) in set.iter().zip(w) {
            let p = keypoints.positions[k];
            let tf = transforms[k];
            let moved = tf.rotation.rotate(mu.sub(p)).add(p).add(tf.translation);
            out = out.add(moved.scale(wk));
            quats.push(tf.rotation);
        }
        let blended = blend_rotations(&quats, w)?;
        centers.push(out);
        rotations.push(blended.mul(gaussians.rotations[i]));
    }
    Ok((centers, rotations))
}

/// Differentiable LBS over tape variables. Skinning weights are recomputed
/// on-tape from centers, keypoint positions and log radii, so all of them
/// (plus rotations and translations) receive gradients.
pub struct LbsVars {
    /// N_g x 3 canonical Gaussian centers.
    pub centers: Var,
    /// N_k x 3 canonical keypoint positions.
    pub keypoint_positions: Var,
    /// N_k x 1 keypoint log radii.
    pub keypoint_log_radii: Var,
    /// N_k x 4 unit quaternions (normalize on tape before passing).
    pub rotations: Var,
    /// N_k x 3 translations.
    pub translations: Var,
}

pub fn lbs_deform_vars(tape: &mut Tape, vars: &LbsVars, drivers: &[Vec<usize>]) -> Result<Var> {
    let n_g = drivers.len();
    if n_g == 0 {
        return Err(domain("lbs: no gaussians"));
    }
    let d = drivers[0].len();
    if drivers.iter().any(|s| s.len() != d) || d == 0 {
        return Err(domain("lbs: driver sets must be non-empty and uniform"));
    }
    let idx: Vec<usize> = drivers.iter().flatten().copied().collect();
    let rep: Vec<usize> = (0..n_g).flat_map(|i| std::iter::repeat(i).take(d)).collect();

    let p = tape.gather_rows(vars.keypoint_positions, &idx);
    let mu = tape.gather_rows(vars.centers, &rep);
    let diff = tape.sub(mu, p);

    // exp(-d^2 / (2 r)) per (gaussian, driver), normalized over the driver set
    let sq = tape.square(diff);
    let d2 = tape.sum_rows(sq);
    let logr = tape.gather_rows(vars.keypoint_log_radii, &idx);
    let r = tape.exp(logr);
    let ratio = tape.div(d2, r);
    let half = tape.scale(ratio, -0.5);
    let unnorm = tape.exp(half);
    let mat = tape.reshape(unnorm, n_g, d);
    let sums = tape.sum_rows(mat);
    let ones = tape.constant(Tensor::new(n_g, 1, vec![1.0; n_g]));
    let inv = tape.div(ones, sums);
    let wmat = tape.mul_col_broadcast(mat, inv);
    let wcol = tape.reshape(wmat, n_g * d, 1);

    let q = tape.gather_rows(vars.rotations, &idx);
    let t = tape.gather_rows(vars.translations, &idx);
    let rotated = tape.quat_rotate(q, diff);
    let back = tape.add(rotated, p);
    let moved = tape.add(back, t);
    let weighted = tape.mul_col_broadcast(moved, wcol);
    Ok(tape.sum_row_groups(weighted, d))
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DensifyConfig {
    /// Mean positional-gradient magnitude above which a point is cloned.
    pub grad_threshold: f64,
    /// Opacity below which a point is pruned.
    pub opacity_threshold: f64,
    /// Pruning never reduces the set below this count.
    pub min_count: usize,
    /// Clone offset, as a fraction of the point's mean scale.
    pub clone_jitter: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig { grad_threshold: 2e-4, opacity_threshold: 0.05, min_count: 1, clone_jitter: 0.01 }
    }
}

/// Clones high-gradient points (small random offset), prunes low-opacity
/// ones, never dropping below `min_count`. Returns, for each surviving row,
/// the index it came from in the input set — optimizer moments follow it.
pub fn densify_prune(
    set: &mut GaussianSet,
    grad_stats: &[f64],
    config: &DensifyConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if grad_stats.len() != set.len() {
        return Err(domain("grad stats length mismatch"));
    }
    let n0 = set.len();
    let mut mapping: Vec<usize> = (0..n0).collect();
    for i in 0..n0 {
        if grad_stats[i] > config.grad_threshold {
            let r = set.mean_scale(i) * config.clone_jitter;
            let offset = Vec3::new(
                rng.gen_range(-r..=r),
                rng.gen_range(-r..=r),
                rng.gen_range(-r..=r),
            );
            set.centers.push(set.centers[i].add(offset));
            set.rotations.push(set.rotations[i]);
            set.log_scales.push(set.log_scales[i]);
            set.opacity_logits.push(set.opacity_logits[i]);
            set.colors.push(set.colors[i]);
            mapping.push(i);
        }
    }

    let opacities = set.opacities();
    let mut keep: Vec<bool> = opacities.iter().map(|&o| o >= config.opacity_threshold).collect();
    let kept = keep.iter().filter(|&&k| k).count();
    if kept < config.min_count {
        // Re-admit the highest-opacity pruned points until the floor holds.
        let mut pruned: Vec<usize> = (0..keep.len()).filter(|&i| !keep[i]).collect();
        pruned.sort_by(|&a, &b| opacities[b].partial_cmp(&opacities[a]).unwrap().then(a.cmp(&b)));
        for &i in pruned.iter().take(config.min_count - kept) {
            keep[i] = true;
        }
    }
    retain_by(&mut set.centers, &keep);
    retain_by(&mut set.rotations, &keep);
    retain_by(&mut set.log_scales, &keep);
    retain_by(&mut set.opacity_logits, &keep);
    retain_by(&mut set.colors, &keep);
    retain_by(&mut mapping, &keep);
    Ok(mapping)
}

fn retain_by<T>(v: &mut Vec<T>, keep: &[bool]) {
    let mut i = 0;
    v.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{fd_check, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_keypoints(rng: &mut ChaCha8Rng, n: usize) -> KeyPointSet {
        let positions = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let log_radii = (0..n).map(|_| rng.gen_range(-2.0..0.0)).collect();
        KeyPointSet::new(positions, log_radii).unwrap()
    }

    fn random_gaussians(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet {
        let centers: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let rotations = (0..n)
            .map(|_| {
                UnitQuat::from_axis_angle(
                    Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                    rng.gen_range(-3.0..3.0),
                )
            })
            .collect();
        let log_scales = (0..n).map(|_| Vec3::new(-2.0, -2.0, -2.0)).collect();
        let opacity_logits = (0..n).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let colors = (0..n).map(|_| [0.5, 0.5, 0.5]).collect();
        GaussianSet::new(centers, rotations, log_scales, opacity_logits, colors).unwrap()
    }

    fn static_cache(n_k: usize, t: usize, m: usize) -> TrajectoryCache {
        TrajectoryCache::new(vec![vec![vec![SE3::IDENTITY; n_k]; t]; m]).unwrap()
    }

    #[test]
    fn static_trajectories_match_canonical_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kp = random_keypoints(&mut rng, 12);
        let boot = build_motion_graph(&kp, None, 4).unwrap();
        let cache = static_cache(12, 5, 3);
        let from_traj = build_motion_graph(&kp, Some(&cache), 4).unwrap();
        assert_eq!(boot.edges, from_traj.edges);
    }

    #[test]
    fn separating_clusters_have_no_cross_edges() {
        // Two 8-point clusters; the second translates away over 10 frames.
        let mut positions = Vec::new();
        for i in 0..8 {
            positions.push(Vec3::new(i as f64 * 0.1, 0.0, 0.0));
        }
        for i in 0..8 {
            positions.push(Vec3::new(5.0 + i as f64 * 0.1, 0.0, 0.0));
        }
        let kp = KeyPointSet::new(positions, vec![0.0; 16]).unwrap();
        let t_frames = 10;
        let mut transforms = vec![vec![vec![SE3::IDENTITY; 16]; t_frames]; 1];
        for (t, frame) in transforms[0].iter_mut().enumerate() {
            for item in frame.iter_mut().skip(8) {
                *item = SE3::new(UnitQuat::IDENTITY, Vec3::new(0.0, 0.0, t as f64));
            }
        }
        let cache = TrajectoryCache::new(transforms).unwrap();
        let graph = build_motion_graph(&kp, Some(&cache), 4).unwrap();

        // Brute-force check of the same distances.
        for (i, edges) in graph.edges.iter().enumerate() {
            for &j in edges {
                assert_eq!(i < 8, j < 8, "cross-cluster edge {i} -> {j}");
            }
        }
    }

    #[test]
    fn full_degree_graph_is_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kp = random_keypoints(&mut rng, 6);
        let g = build_motion_graph(&kp, None, 5).unwrap();
        for (i, edges) in g.edges.iter().enumerate() {
            let mut expect: Vec<usize> = (0..6).filter(|&j| j != i).collect();
            let mut got = edges.clone();
            got.sort_unstable();
            expect.sort_unstable();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn coincident_gaussian_concentrates_weight() {
        let kp = KeyPointSet::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)],
            vec![(0.1f64).ln(); 2],
        )
        .unwrap();
        let graph = build_motion_graph(&kp, None, 1).unwrap();
        let mut g = random_gaussians(&mut ChaCha8Rng::seed_from_u64(0), 1);
        g.centers[0] = Vec3::ZERO;
        let a = skinning_assignment(&g, &kp, &graph).unwrap();
        assert_eq!(a.anchors[0], 0);
        assert!(a.weights[0][0] >= 0.99, "weight {}", a.weights[0][0]);
    }

    #[test]
    fn single_keypoint_weight_is_one() {
        let kp = KeyPointSet::new(vec![Vec3::new(0.3, 0.1, -0.2)], vec![-1.0]).unwrap();
        let graph = MotionGraph { edges: vec![vec![]], degree: 0 };
        let g = random_gaussians(&mut ChaCha8Rng::seed_from_u64(1), 5);
        let a = skinning_assignment(&g, &kp, &graph).unwrap();
        for w in &a.weights {
            assert_eq!(w.len(), 1);
            assert!((w[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kp = random_keypoints(&mut rng, 10);
        let graph = build_motion_graph(&kp, None, 3).unwrap();
        let g = random_gaussians(&mut rng, 40);
        let a = skinning_assignment(&g, &kp, &graph).unwrap();
        for w in &a.weights {
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_transforms_are_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let kp = random_keypoints(&mut rng, 8);
        let graph = build_motion_graph(&kp, None, 3).unwrap();
        let g = random_gaussians(&mut rng, 30);
        let a = skinning_assignment(&g, &kp, &graph).unwrap();
        let (centers, rotations) = lbs_deform(&g, &kp, &a, &vec![SE3::IDENTITY; 8]).unwrap();
        for i in 0..g.len() {
            assert!(centers[i].dist(g.centers[i]) < 1e-6);
            assert!(rotations[i].dot(g.rotations[i]).abs() > 1.0 - 1e-6);
        }
    }

    #[test]
    fn single_keypoint_translation_shifts_everything() {
        let kp = KeyPointSet::new(vec![Vec3::ZERO], vec![0.0]).unwrap();
        let graph = MotionGraph { edges: vec![vec![]], degree: 0 };
        let g = random_gaussians(&mut ChaCha8Rng::seed_from_u64(2), 6);
        let a = skinning_assignment(&g, &kp, &graph).unwrap();
        let shift = Vec3::new(0.4, -0.2, 1.0);
        let (centers, _) =
            lbs_deform(&g, &kp, &a, &[SE3::new(UnitQuat::IDENTITY, shift)]).unwrap();
        for i in 0..g.len() {
            assert!(centers[i].dist(g.centers[i].add(shift)) < 1e-12);
        }
    }

    #[test]
    fn opposed_translations_cancel_at_midpoint() {
        let kp = KeyPointSet::new(
            vec![Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)],
            vec![0.0, 0.0],
        )
        .unwrap();
        let mut g = random_gaussians(&mut ChaCha8Rng::seed_from_u64(3), 1);
        g.centers[0] = Vec3::ZERO;
        // Equidistant center with equal radii gives weights (0.5, 0.5).
        let a = SkinningAssignment {
            anchors: vec![0],
            drivers: vec![vec![0, 1]],
            weights: vec![vec![0.5, 0.5]],
        };
        let delta = 0.3;
        let transforms = [
            SE3::new(UnitQuat::IDENTITY, Vec3::new(delta, 0.0, 0.0)),
            SE3::new(UnitQuat::IDENTITY, Vec3::new(-delta, 0.0, 0.0)),
        ];
        let (centers, _) = lbs_deform(&g, &kp, &a, &transforms).unwrap();
        assert!(centers[0].norm() < 1e-12);
    }

    /// Per-keypoint transforms realizing a global rigid motion G on every
    /// keypoint must carry every Gaussian center to G(center).
    #[test]
    fn global_rigid_motion_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let kp = random_keypoints(&mut rng, 9);
        let graph = build_motion_graph(&kp, None, 4).unwrap();
        let g = random_gaussians(&mut rng, 25);
        let a = skinning_assignment(&g, &kp, &graph).unwrap();

        let rot = UnitQuat::from_axis_angle(Vec3::new(0.3, 1.0, -0.5), 0.9);
        let trans = Vec3::new(0.2, -0.7, 0.4);
        let global = SE3::new(rot, trans);
        // Local transform about p_k realizing G: rotation R, translation G(p_k) - p_k.
        let transforms: Vec<SE3> = kp
            .positions
            .iter()
            .map(|&p| SE3::new(rot, global.apply(p).sub(p)))
            .collect();
        let (centers, _) = lbs_deform(&g, &kp, &a, &transforms).unwrap();
        for i in 0..g.len() {
            assert!(centers[i].dist(global.apply(g.centers[i])) < 1e-5);
        }
        // Pairwise distances preserved under the common rigid transform.
        for i in 0..g.len() {
            for j in (i + 1)..g.len() {
                let before = g.centers[i].dist(g.centers[j]);
                let after = centers[i].dist(centers[j]);
                assert!((before - after).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn tape_lbs_matches_plain_lbs() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let kp = random_keypoints(&mut rng, 7);
        let graph = build_motion_graph(&kp, None, 3).unwrap();
        let g = random_gaussians(&mut rng, 12);
        let a = skinning_assignment(&g, &kp, &graph).unwrap();
        let transforms: Vec<SE3> = (0..7)
            .map(|_| {
                SE3::new(
                    UnitQuat::from_axis_angle(
                        Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                        rng.gen_range(-1.0..1.0),
                    ),
                    Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
                )
            })
            .collect();
        let (expected, _) = lbs_deform(&g, &kp, &a, &transforms).unwrap();

        let mut tape = Tape::new();
        let vars = LbsVars {
            centers: tape.leaf(vec3_tensor(&g.centers)),
            keypoint_positions: tape.leaf(vec3_tensor(&kp.positions)),
            keypoint_log_radii: tape.leaf(Tensor::new(7, 1, kp.log_radii.clone())),
            rotations: tape.leaf(quat_tensor(&transforms)),
            translations: tape.leaf(vec3_tensor(
                &transforms.iter().map(|t| t.translation).collect::<Vec<_>>(),
            )),
        };
        let out = lbs_deform_vars(&mut tape, &vars, &a.drivers).unwrap();
        let val = tape.value(out);
        for (i, e) in expected.iter().enumerate() {
            assert!((val.at(i, 0) - e.x).abs() < 1e-9);
            assert!((val.at(i, 1) - e.y).abs() < 1e-9);
            assert!((val.at(i, 2) - e.z).abs() < 1e-9);
        }
    }

    fn vec3_tensor(v: &[Vec3]) -> Tensor {
        Tensor::new(v.len(), 3, v.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
    }

    fn quat_tensor(t: &[SE3]) -> Tensor {
        Tensor::new(
            t.len(),
            4,
            t.iter().flat_map(|s| [s.rotation.w, s.rotation.x, s.rotation.y, s.rotation.z]).collect(),
        )
    }

    #[test]
    fn tape_lbs_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let kp = random_keypoints(&mut rng, 4);
        let graph = build_motion_graph(&kp, None, 2).unwrap();
        let g = random_gaussians(&mut rng, 5);
        let a = skinning_assignment(&g, &kp, &graph).unwrap();

        let mut store = ParamStore::new();
        store.add("centers", 5, 3, vec3_data(&g.centers), 1.0);
        store.add("kp_pos", 4, 3, vec3_data(&kp.positions), 1.0);
        store.add("kp_logr", 4, 1, kp.log_radii.clone(), 1.0);
        // Raw (unnormalized) quaternion parameters; the graph normalizes them.
        let qdata: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.add("quats", 4, 4, qdata, 1.0);
        store.add("trans", 4, 3, (0..12).map(|_| rng.gen_range(-0.5..0.5)).collect(), 1.0);

        let drivers = a.drivers.clone();
        let run = |s: &ParamStore| {
            let mut tape = Tape::new();
            let centers = tape.leaf(s.get("centers").tensor());
            let kp_pos = tape.leaf(s.get("kp_pos").tensor());
            let kp_logr = tape.leaf(s.get("kp_logr").tensor());
            let quats_raw = tape.leaf(s.get("quats").tensor());
            let trans = tape.leaf(s.get("trans").tensor());
            let quats = tape.normalize_rows(quats_raw, 1e-12);
            let vars = LbsVars {
                centers,
                keypoint_positions: kp_pos,
                keypoint_log_radii: kp_logr,
                rotations: quats,
                translations: trans,
            };
            let out = lbs_deform_vars(&mut tape, &vars, &drivers).unwrap();
            let sq = tape.square(out);
            let loss = tape.sum_all(sq);
            (tape, vec![centers, kp_pos, kp_logr, quats_raw, trans], loss)
        };
        let (tape, leaves, loss) = run(&store);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Option<Tensor>> = leaves.iter().map(|v| grads[v.0].clone()).collect();
        let eval = |s: &ParamStore| {
            let (tape, _, loss) = run(s);
            tape.value(loss).data[0]
        };
        let report = fd_check(&store, &eval, &analytic, 1e-5, 80, 9);
        assert!(report.max_rel_err < 1e-4, "{} at {}", report.max_rel_err, report.worst_param);
    }

    fn vec3_data(v: &[Vec3]) -> Vec<f64> {
        v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    #[test]
    fn densify_noop_when_quiet() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut g = random_gaussians(&mut rng, 10);
        g.opacity_logits.iter_mut().for_each(|l| *l = 3.0);
        let before = g.centers.clone();
        let map = densify_prune(&mut g, &vec![0.0; 10], &DensifyConfig::default(), &mut rng).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(map, (0..10).collect::<Vec<_>>());
        assert_eq!(g.centers, before);
    }

    #[test]
    fn densify_clones_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mut g = random_gaussians(&mut rng, 10);
        g.opacity_logits.iter_mut().for_each(|l| *l = 3.0);
        let mut stats = vec![0.0; 10];
        stats[4] = 1.0;
        let map = densify_prune(&mut g, &stats, &DensifyConfig::default(), &mut rng).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(map[10], 4);
        // Clone lands within the jitter ball of its source.
        let r = g.mean_scale(4) * DensifyConfig::default().clone_jitter;
        assert!(g.centers[10].dist(g.centers[4]) <= r * 3f64.sqrt() + 1e-12);
    }

    #[test]
    fn pruning_stops_at_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let mut g = random_gaussians(&mut rng, 10);
        g.opacity_logits.iter_mut().for_each(|l| *l = -10.0);
        let cfg = DensifyConfig { min_count: 5, ..DensifyConfig::default() };
        let map = densify_prune(&mut g, &vec![0.0; 10], &cfg, &mut rng).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(map.len(), 5);
    }

    #[test]
    fn ply_export_roundtrips_header() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let g = random_gaussians(&mut rng, 4);
        let kp = random_keypoints(&mut rng, 3);
        let dir = tempfile::tempdir().unwrap();
        let gp = dir.path().join("g.ply");
        let kpp = dir.path().join("k.ply");
        g.write_ply(&gp).unwrap();
        kp.write_ply(&kpp).unwrap();
        let gs = std::fs::read_to_string(&gp).unwrap();
        assert!(gs.starts_with("ply\nformat ascii 1.0\nelement vertex 4\n"));
        assert_eq!(gs.lines().count(), 14 + 4);
        let ks = std::fs::read_to_string(&kpp).unwrap();
        assert!(ks.contains("property float radius"));
        assert_eq!(ks.lines().count(), 8 + 3);
    }
}
