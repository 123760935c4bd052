//! Differentiable isotropic point-splat rasterizer.
//!
//! Each Gaussian projects to an isotropic screen-space footprint with
//! sigma_px = f * mean(exp(log_scale)) / depth, truncated at 3 sigma.
//! Contributions are composited front-to-back in ascending camera depth
//! (ties by index); per-pixel alpha is clamped at 0.99 so transmittance
//! stays positive. The backward pass recomputes the forward per pixel and
//! applies suffix-sum chain rules; sort order and truncation are treated
//! as constants.

use crate::diff::{CustomOp, Tensor};
use crate::geom::Vec3;
use crate::render::Camera;

const ALPHA_MAX: f64 = 0.99;
const ALPHA_SKIP: f64 = 1e-4;
const TRANSMITTANCE_STOP: f64 = 1e-4;
const TRUNCATION_SIGMAS: f64 = 3.0;

/// Rows are split into this many fixed bands for the worker pool. The band
/// structure (and therefore every floating-point reduction order) does not
/// depend on the thread count, so renders are bitwise identical whether the
/// pool has 1 thread or 64.
const ROW_BANDS: usize = 16;

/// MOTION4D_THREADS caps the worker count; default is all available cores.
fn worker_threads() -> usize {
    std::env::var("MOTION4D_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn row_bands(h: usize) -> Vec<(usize, usize)> {
    let bands = ROW_BANDS.min(h);
    let size = h.div_ceil(bands);
    (0..bands).map(|b| (b * size, ((b + 1) * size).min(h))).filter(|(a, b)| a < b).collect()
}

/// Runs `work` once per band and returns results in band order. Workers pull
/// bands from a shared cursor; with one thread this degenerates to a plain
/// sequential loop.
fn map_bands<R: Send>(h: usize, work: &(dyn Fn(usize, usize) -> R + Sync)) -> Vec<R> {
    let bands = row_bands(h);
    let threads = worker_threads().min(bands.len());
    if threads <= 1 {
        return bands.iter().map(|&(y0, y1)| work(y0, y1)).collect();
    }
    let cursor = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..bands.len()).map(|_| None).collect();
    let slot_addr = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let b = cursor.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if b >= bands.len() {
                    break;
                }
                let (y0, y1) = bands[b];
                let r = work(y0, y1);
                slot_addr.lock().unwrap()[b] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("band result")).collect()
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// H*W*3, row-major, [0,1]
    pub rgb: Vec<f64>,
    /// H*W in [0,1]
    pub alpha: Vec<f64>,
    /// H*W expected depth, world units (0 where nothing renders)
    pub depth: Vec<f64>,
}

struct Projected {
    idx: usize,
    u: f64,
    v: f64,
    z: f64,
    sigma: f64,
    opacity: f64,
    color: [f64; 3],
    x0: usize,
    x1: usize, // exclusive
    y0: usize,
    y1: usize,
}

struct Scene {
    projected: Vec<Projected>,
    // CSR pixel bins: for pixel p, projected indices bin_items[bin_start[p]..bin_start[p+1]]
    bin_start: Vec<usize>,
    bin_items: Vec<u32>,
}

fn project_scene(
    camera: &Camera,
    centers: &[f64],
    log_scales: &[f64],
    opacity_logits: &[f64],
    colors: &[f64],
) -> Scene {
    let n = centers.len() / 3;
    let (w, h) = (camera.width, camera.height);
    let f = camera.focal_px();
    let mut projected = Vec::new();
    for i in 0..n {
        let p = Vec3::new(centers[i * 3], centers[i * 3 + 1], centers[i * 3 + 2]);
        let c = camera.to_camera(p);
        if c.z <= camera.near || c.z >= camera.far {
            continue;
        }
        let u = 0.5 * w as f64 + f * c.x / c.z;
        let v = 0.5 * h as f64 + f * c.y / c.z;
        let sbar = (log_scales[i * 3].exp() + log_scales[i * 3 + 1].exp() + log_scales[i * 3 + 2].exp()) / 3.0;
        let sigma = f * sbar / c.z;
        if !(u.is_finite() && v.is_finite() && sigma.is_finite()) {
            continue;
        }
        let r = TRUNCATION_SIGMAS * sigma;
        let x0 = (u - r).floor().max(0.0) as usize;
        let x1 = ((u + r).ceil() as i64).clamp(0, w as i64) as usize;
        let y0 = (v - r).floor().max(0.0) as usize;
        let y1 = ((v + r).ceil() as i64).clamp(0, h as i64) as usize;
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        let opacity = 1.0 / (1.0 + (-opacity_logits[i]).exp());
        projected.push(Projected {
            idx: i,
            u,
            v,
            z: c.z,
            sigma,
            opacity,
            color: [colors[i * 3], colors[i * 3 + 1], colors[i * 3 + 2]],
            x0,
            x1,
            y0,
            y1,
        });
    }
    // front-to-back; ties broken by original index
    projected.sort_by(|a, b| a.z.partial_cmp(&b.z).unwrap().then(a.idx.cmp(&b.idx)));

    let mut bin_start = vec![0usize; w * h + 1];
    for p in &projected {
        for y in p.y0..p.y1 {
            for x in p.x0..p.x1 {
                bin_start[y * w + x + 1] += 1;
            }
        }
    }
    for i in 0..w * h {
        bin_start[i + 1] += bin_start[i];
    }
    let mut cursor = bin_start.clone();
    let mut bin_items = vec![0u32; bin_start[w * h]];
    for (pi, p) in projected.iter().enumerate() {
        for y in p.y0..p.y1 {
            for x in p.x0..p.x1 {
                let px = y * w + x;
                bin_items[cursor[px]] = pi as u32;
                cursor[px] += 1;
            }
        }
    }
    Scene { projected, bin_start, bin_items }
}

fn pixel_alpha(p: &Projected, px: f64, py: f64) -> Option<(f64, f64, bool)> {
    let dx = px - p.u;
    let dy = py - p.v;
    let rho = dx * dx + dy * dy;
    let lim = TRUNCATION_SIGMAS * p.sigma;
    if rho > lim * lim {
        return None;
    }
    let g = (-rho / (2.0 * p.sigma * p.sigma)).exp();
    let raw = p.opacity * g;
    let clamped = raw > ALPHA_MAX;
    let alpha = if clamped { ALPHA_MAX } else { raw };
    if alpha < ALPHA_SKIP {
        return None;
    }
    Some((alpha, g, clamped))
}

/// Renders the scene given flat attribute arrays (n*3 centers/log_scales/
/// colors, n opacity logits).
pub fn splat_render(
    camera: &Camera,
    centers: &[f64],
    log_scales: &[f64],
    opacity_logits: &[f64],
    colors: &[f64],
) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let scene = project_scene(camera, centers, log_scales, opacity_logits, colors);
    let mut out = RenderOutput {
        width: w,
        height: h,
        rgb: vec![0.0; w * h * 3],
        alpha: vec![0.0; w * h],
        depth: vec![0.0; w * h],
    };
    let work = |y0: usize, y1: usize| {
        let rows = y1 - y0;
        let mut rgb = vec![0.0; rows * w * 3];
        let mut alpha = vec![0.0; rows * w];
        let mut depth = vec![0.0; rows * w];
        for y in y0..y1 {
            for x in 0..w {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                let pi = y * w + x;
                let li = (y - y0) * w + x;
                let mut t = 1.0;
                for &item in &scene.bin_items[scene.bin_start[pi]..scene.bin_start[pi + 1]] {
                    let p = &scene.projected[item as usize];
                    let Some((a, _, _)) = pixel_alpha(p, px, py) else { continue };
                    let wgt = a * t;
                    rgb[li * 3] += wgt * p.color[0];
                    rgb[li * 3 + 1] += wgt * p.color[1];
                    rgb[li * 3 + 2] += wgt * p.color[2];
                    alpha[li] += wgt;
                    depth[li] += wgt * p.z;
                    t *= 1.0 - a;
                    if t < TRANSMITTANCE_STOP {
                        break;
                    }
                }
            }
        }
        (y0, rgb, alpha, depth)
    };
    for (y0, rgb, alpha, depth) in map_bands(h, &work) {
        out.rgb[y0 * w * 3..y0 * w * 3 + rgb.len()].copy_from_slice(&rgb);
        out.alpha[y0 * w..y0 * w + alpha.len()].copy_from_slice(&alpha);
        out.depth[y0 * w..y0 * w + depth.len()].copy_from_slice(&depth);
    }
    out
}

/// Gradients of a scalar loss wrt all four attribute arrays, given the loss
/// gradient wrt the (H*W) x 5 output (rgb, alpha, depth).
#[allow(clippy::too_many_arguments)]
pub fn splat_backward(
    camera: &Camera,
    centers: &[f64],
    log_scales: &[f64],
    opacity_logits: &[f64],
    colors: &[f64],
    grad_out: &[f64], // (H*W)*5
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h) = (camera.width, camera.height);
    let f = camera.focal_px();
    let scene = project_scene(camera, centers, log_scales, opacity_logits, colors);
    let np = scene.projected.len();
    // Per-band partial accumulators, reduced in band order below so the
    // result is independent of how bands map onto threads.
    let work = |y0: usize, y1: usize| {
        let mut g_u = vec![0.0; np];
        let mut g_v = vec![0.0; np];
        let mut g_sigma = vec![0.0; np];
        let mut g_opacity = vec![0.0; np];
        let mut g_z_direct = vec![0.0; np];
        let mut grad_colors = vec![0.0; colors.len()];
        // contributor record: (projected idx, alpha, gaussian value g, clamped, transmittance)
        let mut contribs: Vec<(usize, f64, f64, bool, f64)> = Vec::with_capacity(64);
        for y in y0..y1 {
            for x in 0..w {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                let pi = y * w + x;
                let go = &grad_out[pi * 5..pi * 5 + 5];
                if go.iter().all(|&g| g == 0.0) {
                    continue;
                }
                contribs.clear();
                let mut t = 1.0;
                for &item in &scene.bin_items[scene.bin_start[pi]..scene.bin_start[pi + 1]] {
                    let p = &scene.projected[item as usize];
                    let Some((alpha, gval, clamped)) = pixel_alpha(p, px, py) else { continue };
                    contribs.push((item as usize, alpha, gval, clamped, t));
                    t *= 1.0 - alpha;
                    if t < TRANSMITTANCE_STOP {
                        break;
                    }
                }
                // suffix sums of x_i * alpha_i * T_i per channel, iterated back-to-front
                let mut suffix = [0.0f64; 5];
                for &(item, alpha, gval, clamped, trans) in contribs.iter().rev() {
                    let p = &scene.projected[item];
                    let at = alpha * trans;
                    let values = [p.color[0], p.color[1], p.color[2], 1.0, p.z];
                    // color gradient: linear in alpha * T
                    for ch in 0..3 {
                        grad_colors[p.idx * 3 + ch] += go[ch] * at;
                    }
                    g_z_direct[item] += go[4] * at;
                    // d loss / d alpha_i
                    let mut g_alpha = 0.0;
                    for ch in 0..5 {
                        g_alpha += go[ch] * (values[ch] * trans - suffix[ch] / (1.0 - alpha));
                    }
                    if !clamped {
                        // alpha = opacity * g
                        g_opacity[item] += g_alpha * gval;
                        let g_g = g_alpha * p.opacity;
                        let dx = px - p.u;
                        let dy = py - p.v;
                        let s2 = p.sigma * p.sigma;
                        g_u[item] += g_g * gval * dx / s2;
                        g_v[item] += g_g * gval * dy / s2;
                        g_sigma[item] += g_g * gval * (dx * dx + dy * dy) / (s2 * p.sigma);
                    }
                    for ch in 0..5 {
                        suffix[ch] += values[ch] * at;
                    }
                }
            }
        }
        (g_u, g_v, g_sigma, g_opacity, g_z_direct, grad_colors)
    };
    let mut g_u = vec![0.0; np];
    let mut g_v = vec![0.0; np];
    let mut g_sigma = vec![0.0; np];
    let mut g_opacity = vec![0.0; np];
    let mut g_z_direct = vec![0.0; np];
    let mut grad_colors = vec![0.0; colors.len()];
    for part in map_bands(h, &work) {
        let acc = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };
        acc(&mut g_u, &part.0);
        acc(&mut g_v, &part.1);
        acc(&mut g_sigma, &part.2);
        acc(&mut g_opacity, &part.3);
        acc(&mut g_z_direct, &part.4);
        acc(&mut grad_colors, &part.5);
    }

    // chain screen-space gradients to world-space centers and log scales
    let mut grad_centers = vec![0.0; centers.len()];
    let mut grad_log_scales = vec![0.0; log_scales.len()];
    let mut grad_logits = vec![0.0; opacity_logits.len()];
    let rot_t = camera.pose.rotation.conjugate();
    for (pi, p) in scene.projected.iter().enumerate() {
        let i = p.idx;
        let cp = camera.to_camera(Vec3::new(centers[i * 3], centers[i * 3 + 1], centers[i * 3 + 2]));
        let sbar = (log_scales[i * 3].exp() + log_scales[i * 3 + 1].exp() + log_scales[i * 3 + 2].exp()) / 3.0;
        let gx = g_u[pi] * f / cp.z;
        let gy = g_v[pi] * f / cp.z;
        let gz = -g_u[pi] * f * cp.x / (cp.z * cp.z) - g_v[pi] * f * cp.y / (cp.z * cp.z)
            - g_sigma[pi] * f * sbar / (cp.z * cp.z)
            + g_z_direct[pi];
        let gw = rot_t.rotate(Vec3::new(gx, gy, gz));
        grad_centers[i * 3] += gw.x;
        grad_centers[i * 3 + 1] += gw.y;
        grad_centers[i * 3 + 2] += gw.z;
        for k in 0..3 {
            grad_log_scales[i * 3 + k] += g_sigma[pi] * f * log_scales[i * 3 + k].exp() / (3.0 * cp.z);
        }
        let o = p.opacity;
        grad_logits[i] += g_opacity[pi] * o * (1.0 - o);
    }
    (grad_centers, grad_log_scales, grad_logits, grad_colors)
}

/// Tape op wrapping the rasterizer. Inputs: centers (n x 3), log_scales
/// (n x 3), opacity_logits (n x 1), colors (n x 3). Output: (H*W) x 5
/// columns (r, g, b, alpha, depth).
pub struct SplatOp {
    pub camera: Camera,
}

impl CustomOp for SplatOp {
    fn name(&self) -> &'static str {
        "splat_render"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let [centers, log_scales, logits, colors] = inputs else {
            panic!("splat op expects 4 inputs")
        };
        let out = splat_render(&self.camera, &centers.data, &log_scales.data, &logits.data, &colors.data);
        let hw = out.width * out.height;
        let mut data = vec![0.0; hw * 5];
        for p in 0..hw {
            data[p * 5..p * 5 + 3].copy_from_slice(&out.rgb[p * 3..p * 3 + 3]);
            data[p * 5 + 3] = out.alpha[p];
            data[p * 5 + 4] = out.depth[p];
        }
        Tensor::new(hw, 5, data)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let [centers, log_scales, logits, colors] = inputs else {
            panic!("splat op expects 4 inputs")
        };
        let n = centers.rows;
        let (gc, gs, go, gcol) =
            splat_backward(&self.camera, &centers.data, &log_scales.data, &logits.data, &colors.data, &grad_out.data);
        vec![
            Tensor::new(n, 3, gc),
            Tensor::new(n, 3, gs),
            Tensor::new(n, 1, go),
            Tensor::new(n, 3, gcol),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{fd_check, ParamStore, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head_on_camera(res: usize) -> Camera {
        Camera::orbit(0.0, 0.0, 2.0, 33.9, (res, res))
    }

    #[test]
    fn empty_scene_is_black() {
        let cam = head_on_camera(16);
        let out = splat_render(&cam, &[], &[], &[], &[]);
        assert!(out.rgb.iter().all(|&v| v == 0.0));
        assert!(out.alpha.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn behind_camera_is_black() {
        let cam = head_on_camera(16);
        let out = splat_render(&cam, &[0.0, 0.0, 5.0], &[-3.0; 3], &[4.0], &[1.0, 1.0, 1.0]);
        assert!(out.alpha.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_gaussian_center_alpha_and_symmetry() {
        // large footprint so the center-pixel alpha approaches the opacity
        let cam = head_on_camera(64);
        let opacity: f64 = 0.7;
        let logit = (opacity / (1.0 - opacity)).ln();
        let log_scale = (1.0f64).ln(); // sigma_px = f/2, huge
        let out = splat_render(&cam, &[0.0, 0.0, 0.0], &[log_scale; 3], &[logit], &[1.0, 0.5, 0.25]);
        // projection lands exactly at (32, 32); probe the four adjacent pixels
        let probe = [(31, 31), (32, 31), (31, 32), (32, 32)];
        for (x, y) in probe {
            let a = out.alpha[y * 64 + x];
            assert!((a - opacity).abs() < 1e-4, "alpha {a} vs {opacity}");
        }
        // radial symmetry across the projection center
        for d in 1..10usize {
            let a = out.alpha[32 * 64 + (32 + d)];
            let b = out.alpha[32 * 64 + (31 - d)];
            assert!((a - b).abs() < 1e-9);
            let c = out.alpha[(32 + d) * 64 + 32];
            let e = out.alpha[(31 - d) * 64 + 32];
            assert!((c - e).abs() < 1e-9);
        }
    }

    #[test]
    fn opaque_near_occludes_far() {
        let cam = head_on_camera(32);
        // near gaussian alpha clamps at 0.99 -> far contributes at most 1% at center
        let centers = [0.0, 0.0, 0.5, 0.0, 0.0, -0.5];
        let log_scales = [(0.5f64).ln(); 6];
        let logits = [20.0, 20.0]; // both fully opaque (clamped to 0.99)
        let colors = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let out = splat_render(&cam, &centers, &log_scales, &logits, &colors);
        let pi = 16 * 32 + 16;
        assert!(out.rgb[pi * 3] > 0.98, "near color dominates: {}", out.rgb[pi * 3]);
        assert!(out.rgb[pi * 3 + 1] < 0.011, "far contribution: {}", out.rgb[pi * 3 + 1]);
        // expected depth near the close gaussian's camera depth (1.5)
        let d = out.depth[pi] / out.alpha[pi];
        assert!((d - 1.5).abs() < 0.02, "depth {d}");
    }

    #[test]
    fn translation_invariance_of_camera_and_scene() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let centers: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let log_scales: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-3.5..-2.5)).collect();
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let colors: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cam = head_on_camera(24);
        let out_a = splat_render(&cam, &centers, &log_scales, &logits, &colors);
        let offset = Vec3::new(5.0, -3.0, 11.0);
        let moved: Vec<f64> = centers
            .chunks(3)
            .flat_map(|c| [c[0] + offset.x, c[1] + offset.y, c[2] + offset.z])
            .collect();
        let pos = cam.pose.inverse().apply(Vec3::ZERO).add(offset);
        let cam_b = Camera::look_at(pos, offset, cam.fov_y_deg, (24, 24));
        let out_b = splat_render(&cam_b, &moved, &log_scales, &logits, &colors);
        for (a, b) in out_a.rgb.iter().zip(&out_b.rgb) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn alpha_monotone_in_opacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let n = 4;
            let centers: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let log_scales: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-3.0..-2.0)).collect();
            let mut logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let colors = vec![0.5; n * 3];
            let cam = head_on_camera(16);
            let base = splat_render(&cam, &centers, &log_scales, &logits, &colors);
            let which = rng.gen_range(0..n);
            logits[which] += 0.5;
            let bumped = splat_render(&cam, &centers, &log_scales, &logits, &colors);
            for (a, b) in base.alpha.iter().zip(&bumped.alpha) {
                assert!(*b >= *a - 1e-12);
            }
        }
    }

    #[test]
    fn color_gradient_equals_alpha_weight() {
        let cam = head_on_camera(16);
        let centers = [0.0, 0.0, 0.0];
        let log_scales = [(0.3f64).ln(); 3];
        let logits = [0.2];
        let colors = [0.4, 0.4, 0.4];
        let out = splat_render(&cam, &centers, &log_scales, &logits, &colors);
        let pi = 8 * 16 + 8;
        let mut grad_out = vec![0.0; 16 * 16 * 5];
        grad_out[pi * 5] = 1.0; // d loss / d red at center pixel
        let (_, _, _, gcol) = splat_backward(&cam, &centers, &log_scales, &logits, &colors, &grad_out);
        // single gaussian: composited alpha weight is exactly alpha at that pixel
        assert!((gcol[0] - out.alpha[pi]).abs() < 1e-12);
        assert_eq!(gcol[1], 0.0);
    }

    #[test]
    fn zero_output_gradient_gives_zero_param_gradients() {
        let cam = head_on_camera(8);
        let grad_out = vec![0.0; 8 * 8 * 5];
        let (gc, gs, go, gcol) =
            splat_backward(&cam, &[0.0, 0.0, 0.0], &[-2.5; 3], &[0.0], &[0.5, 0.5, 0.5], &grad_out);
        assert!(gc.iter().chain(&gs).chain(&go).chain(&gcol).all(|&g| g == 0.0));
    }

    #[test]
    fn fd_check_on_small_render() {
        // 5 gaussians, 16x16, distinct depths to stay away from sort
        // discontinuities
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 5;
        let mut store = ParamStore::new();
        let centers: Vec<f64> = (0..n)
            .flat_map(|i| {
                [
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                    -0.4 + 0.2 * i as f64,
                ]
            })
            .collect();
        store.add("centers", n, 3, centers, 1.0);
        store.add("log_scales", n, 3, (0..n * 3).map(|_| rng.gen_range(-2.8..-2.2)).collect(), 1.0);
        store.add("logits", n, 1, (0..n).map(|_| rng.gen_range(-0.5..1.5)).collect(), 1.0);
        store.add("colors", n, 3, (0..n * 3).map(|_| rng.gen_range(0.2..0.9)).collect(), 1.0);
        let cam = head_on_camera(16);
        let run = |s: &ParamStore| {
            let mut tape = Tape::new();
            let c = tape.leaf(s.get("centers").tensor());
            let ls = tape.leaf(s.get("log_scales").tensor());
            let lo = tape.leaf(s.get("logits").tensor());
            let col = tape.leaf(s.get("colors").tensor());
            let img = tape.custom(Box::new(SplatOp { camera: cam }), &[c, ls, lo, col]);
            // weighted sum over all channels as a probe loss
            let sq = tape.square(img);
            let loss = tape.mean_all(sq);
            (tape, [c, ls, lo, col], loss)
        };
        let eval = |s: &ParamStore| {
            let (tape, _, loss) = run(s);
            tape.value(loss).data[0]
        };
        let (tape, vars, loss) = run(&store);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<_> = vars.iter().map(|v| grads[v.0].clone()).collect();
        let report = fd_check(&store, &eval, &analytic, 1e-5, 64, 5);
        assert!(report.max_rel_err < 1e-3, "{} at {}", report.max_rel_err, report.worst_param);
    }
}
