//! Training objectives: masked photometric error, ARAP rigidity over keypoint
//! trajectories, KL regularization of the latent table, and symmetric squared
//! Chamfer distance between point sets.

use crate::diff::{Tape, Tensor, Var};
use crate::error::{domain, Result};
use crate::geom::{rbf_weights, Vec3};
use crate::motion::{KeyPointSet, MotionGraph};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub w_rgb: f64,
    pub w_mask: f64,
    pub w_arap: f64,
    pub w_kl: f64,
    pub w_chamfer: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_rgb: 1.0, w_mask: 0.5, w_arap: 0.1, w_kl: 1e-3, w_chamfer: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_rgb, self.w_mask, self.w_arap, self.w_kl, self.w_chamfer];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(domain("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Masked L1 on color plus L1 on coverage. `render` is the rasterizer output
/// (n x 5: rgb, alpha, depth); targets are n x 3 and n x 1 with n = H*W.
pub fn photometric_loss_vars(
    tape: &mut Tape,
    render: Var,
    target_rgb: &Tensor,
    target_mask: &Tensor,
    weights: &LossWeights,
) -> Result<Var> {
    let n = tape.value(render).rows;
    if target_rgb.rows != n || target_rgb.cols != 3 || target_mask.rows != n || target_mask.cols != 1 {
        return Err(domain("photometric loss: resolution mismatch"));
    }
    let rgb = tape.slice_cols(render, 0, 3);
    let alpha = tape.slice_cols(render, 3, 1);
    let t_rgb = tape.constant(target_rgb.clone());
    let t_mask = tape.constant(target_mask.clone());

    let d_rgb = tape.sub(rgb, t_rgb);
    let a_rgb = tape.abs(d_rgb);
    let masked = tape.mul_col_broadcast(a_rgb, t_mask);
    let m_rgb = tape.mean_all(masked);
    let rgb_term = tape.scale(m_rgb, weights.w_rgb);

    let d_mask = tape.sub(alpha, t_mask);
    let a_mask = tape.abs(d_mask);
    let m_mask = tape.mean_all(a_mask);
    let mask_term = tape.scale(m_mask, weights.w_mask);
    Ok(tape.add(rgb_term, mask_term))
}

/// Canonical-space edge weights for the rigidity term: for each keypoint k,
/// the normalized RBF weight of each graph neighbor j, flattened in edge
/// order (k major, neighbor minor).
pub fn arap_edge_weights(keypoints: &KeyPointSet, graph: &MotionGraph) -> Result<Vec<f64>> {
    let dense = rbf_weights(
        &keypoints.positions,
        &keypoints.positions,
        &keypoints.radii(),
        &graph.edges,
    )?;
    let mut out = Vec::new();
    for (k, edges) in graph.edges.iter().enumerate() {
        for &j in edges {
            out.push(dense[k][j]);
        }
    }
    Ok(out)
}

/// As-rigid-as-possible penalty: for every graph edge, the change of edge
/// length between frames t and t+dt, weighted by the canonical RBF weight.
/// `frames[t]` is an N_k x 3 tape variable of keypoint positions.
pub fn arap_loss_vars(
    tape: &mut Tape,
    frames: &[Var],
    graph: &MotionGraph,
    edge_weights: &[f64],
    dt: usize,
) -> Result<Var> {
    let t_count = frames.len();
    if t_count < 2 {
        return Err(domain("arap: need at least two frames"));
    }
    if dt == 0 || dt >= t_count {
        return Err(domain(format!("arap: dt={dt} outside [1, {}]", t_count - 1)));
    }
    let mut ks = Vec::new();
    let mut js = Vec::new();
    for (k, edges) in graph.edges.iter().enumerate() {
        for &j in edges {
            ks.push(k);
            js.push(j);
        }
    }
    if edge_weights.len() != ks.len() {
        return Err(domain("arap: edge weight count mismatch"));
    }
    let w = tape.constant(Tensor::new(ks.len(), 1, edge_weights.to_vec()));

    let edge_len = |tape: &mut Tape, frame: Var| {
        let pk = tape.gather_rows(frame, &ks);
        let pj = tape.gather_rows(frame, &js);
        let d = tape.sub(pj, pk);
        tape.norm_rows(d, 1e-12)
    };
    let mut total = None;
    for t in 0..t_count - dt {
        let len_a = edge_len(tape, frames[t]);
        let len_b = edge_len(tape, frames[t + dt]);
        let diff = tape.sub(len_a, len_b);
        let a = tape.abs(diff);
        let wa = tape.mul(a, w);
        let s = tape.sum_all(wa);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s),
        });
    }
    Ok(total.unwrap())
}

/// Plain evaluation of the rigidity term for oracle tests.
pub fn arap_loss(
    positions: &[Vec<Vec3>],
    graph: &MotionGraph,
    edge_weights: &[f64],
    dt: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let frames: Vec<Var> = positions
        .iter()
        .map(|frame| {
            tape.leaf(Tensor::new(frame.len(), 3, frame.iter().flat_map(|p| [p.x, p.y, p.z]).collect()))
        })
        .collect();
    let loss = arap_loss_vars(&mut tape, &frames, graph, edge_weights, dt)?;
    Ok(tape.value(loss).data[0])
}

/// KL(q || N(0, I)) summed over motions and latent dimensions, with log_var
/// read as log of the variance: -1/2 * sum(log v - v - mu^2 + 1).
pub fn kl_loss_vars(tape: &mut Tape, mu: Var, log_var: Var) -> Var {
    let v = tape.exp(log_var);
    let sq = tape.square(mu);
    let a = tape.sub(log_var, v);
    let b = tape.sub(a, sq);
    let c = tape.add_const(b, 1.0);
    let s = tape.sum_all(c);
    tape.scale(s, -0.5)
}

pub fn kl_loss(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(&m, &lv)| -0.5 * (lv - lv.exp() - m * m + 1.0))
        .sum()
}

/// Symmetric squared Chamfer distance between point sets.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(domain("chamfer: empty point set"));
    }
    let nearest_sq = |from: &[Vec3], to: &[Vec3]| -> f64 {
        from.iter()
            .map(|p| to.iter().map(|q| p.dist_sq(*q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(nearest_sq(a, b) + nearest_sq(b, a))
}

/// Differentiable Chamfer against a fixed target set. Nearest-neighbor
/// correspondences are chosen from the current values and held fixed for the
/// gradient (the standard subgradient at the min).
pub fn chamfer_vars(tape: &mut Tape, pred: Var, target: &[Vec3]) -> Result<Var> {
    let tp = tape.value(pred);
    if tp.rows == 0 || target.is_empty() {
        return Err(domain("chamfer: empty point set"));
    }
    let pred_pts: Vec<Vec3> = (0..tp.rows).map(|r| Vec3::new(tp.at(r, 0), tp.at(r, 1), tp.at(r, 2))).collect();
    let argmin = |p: Vec3, set: &[Vec3]| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, q) in set.iter().enumerate() {
            let d = p.dist_sq(*q);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };

    // pred -> target: fixed target rows gathered per prediction.
    let idx_ab: Vec<usize> = pred_pts.iter().map(|&p| argmin(p, target)).collect();
    let tgt_ab = tape.constant(Tensor::new(
        idx_ab.len(),
        3,
        idx_ab.iter().flat_map(|&i| [target[i].x, target[i].y, target[i].z]).collect(),
    ));
    let d_ab = tape.sub(pred, tgt_ab);
    let sq_ab = tape.square(d_ab);
    let s_ab = tape.sum_all(sq_ab);
    let m_ab = tape.scale(s_ab, 1.0 / pred_pts.len() as f64);

    // target -> pred: each target row matched to a gathered prediction row.
    let idx_ba: Vec<usize> = target.iter().map(|&q| argmin(q, &pred_pts)).collect();
    let pred_ba = tape.gather_rows(pred, &idx_ba);
    let tgt_ba = tape.constant(Tensor::new(
        target.len(),
        3,
        target.iter().flat_map(|q| [q.x, q.y, q.z]).collect(),
    ));
    let d_ba = tape.sub(pred_ba, tgt_ba);
    let sq_ba = tape.square(d_ba);
    let s_ba = tape.sum_all(sq_ba);
    let m_ba = tape.scale(s_ba, 1.0 / target.len() as f64);
    Ok(tape.add(m_ab, m_ba))
}
