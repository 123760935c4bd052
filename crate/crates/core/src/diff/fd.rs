//! Central finite-difference referee for analytic gradients.

use crate::diff::{ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

impl FdReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compares `analytic` (one gradient per store group, aligned by index)
/// against central differences of `eval` on a random coordinate subset of at
/// least `min_coords` coordinates per trainable group. Failures are reported,
/// never thrown.
pub fn fd_check(
    store: &ParamStore,
    eval: &dyn Fn(&ParamStore) -> f64,
    analytic: &[Option<Tensor>],
    step: f64,
    min_coords: usize,
    seed: u64,
) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport { max_rel_err: 0.0, worst_param: String::new(), checked: 0 };
    let mut probe = store.clone();
    for idx in 0..store.len() {
        let group = store.group(idx);
        if !group.trainable {
            continue;
        }
        let Some(grad) = &analytic[idx] else { continue };
        let n = group.data.len();
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(&mut rng);
        coords.truncate(min_coords.min(n));
        for &i in &coords {
            let orig = group.data[i];
            probe.group_mut(idx).data[i] = orig + step;
            let fp = eval(&probe);
            probe.group_mut(idx).data[i] = orig - step;
            let fm = eval(&probe);
            probe.group_mut(idx).data[i] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let an = grad.data[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            let rel = (fd - an).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{}[{}]", group.name, i);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut store = ParamStore::new();
        store.add("p", 5, 1, vec![0.3, -1.2, 0.7, 2.0, -0.1], 1.0);
        let eval = |s: &ParamStore| s.get("p").data.iter().map(|x| x * x).sum::<f64>();
        let mut tape = Tape::new();
        let p = tape.leaf(store.get("p").tensor());
        let sq = tape.square(p);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let analytic = vec![grads[p.0].clone()];
        let report = fd_check(&store, &eval, &analytic, 1e-5, 64, 0);
        assert!(report.max_rel_err < 1e-8, "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 5);
    }
}
