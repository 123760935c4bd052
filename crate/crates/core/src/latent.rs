//! The motion latent space: per-motion Gaussian parameters, reparameterized
//! sampling, the latent-conditioned keypoint-transform decoder, latent
//! interpolation, and a prompt-to-latent projector.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{ParamStore, Tape, Tensor, Var};
use crate::error::{domain, Error, Result};
use crate::geom::{SE3, UnitQuat, Vec3};
use crate::motion::KeyPointSet;

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 5.0;

/// Learnable per-motion Gaussian parameters (mean and log-variance).
#[derive(Debug, Clone)]
pub struct LatentTable {
    pub mu: Vec<Vec<f64>>,
    pub log_var: Vec<Vec<f64>>,
    pub dim: usize,
}

impl LatentTable {
    /// Means start near zero (distinct per motion), variances at 1.
    pub fn new(motions: usize, dim: usize, rng: &mut impl Rng) -> Result<LatentTable> {
        if motions == 0 || dim == 0 {
            return Err(domain("latent table needs M >= 1, D >= 1"));
        }
        let mu = (0..motions)
            .map(|_| (0..dim).map(|_| rng.gen_range(-0.01..0.01)).collect())
            .collect();
        let log_var = vec![vec![0.0; dim]; motions];
        Ok(LatentTable { mu, log_var, dim })
    }

    pub fn motion_count(&self) -> usize {
        self.mu.len()
    }
}

/// Clamps a log-variance into the numerically safe band.
pub fn clamp_log_var(lv: f64) -> f64 {
    lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// z = mu + exp(log_var / 2) * eps. Gradients (in the tape version) flow to
/// mu and log_var only; eps is fixed noise.
pub fn reparameterize(mu: &[f64], log_var: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (0.5 * clamp_log_var(lv)).exp() * e)
        .collect()
}

pub fn sample_latent(mu: &[f64], log_var: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let eps: Vec<f64> = (0..mu.len()).map(|_| StandardNormal.sample(rng)).collect();
    reparameterize(mu, log_var, &eps)
}

/// Tape version: mu, log_var are 1 x D variables, eps fixed. log_var is
/// assumed already inside the clamp band (the optimizer projects it there).
pub fn reparameterize_vars(tape: &mut Tape, mu: Var, log_var: Var, eps: &[f64]) -> Var {
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let noise = tape.constant(Tensor::new(1, eps.len(), eps.to_vec()));
    let scaled = tape.mul(std, noise);
    tape.add(mu, scaled)
}

/// Sinusoidal features per input component:
/// [sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{F-1} pi x), cos(2^{F-1} pi x), x].
pub fn positional_embedding(x: &[f64], num_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (2 * num_freqs + 1));
    for &v in x {
        for f in 0..num_freqs {
            let s = (1u64 << f) as f64 * std::f64::consts::PI * v;
            out.push(s.sin());
            out.push(s.cos());
        }
        out.push(v);
    }
    out
}

/// On-tape positional embedding of an n x c variable -> n x c(2F+1),
/// matching `positional_embedding` layout per row.
pub fn positional_embedding_vars(tape: &mut Tape, x: Var, num_freqs: usize) -> Var {
    let cols = tape.value(x).cols;
    let mut parts = Vec::new();
    for c in 0..cols {
        let comp = tape.slice_cols(x, c, 1);
        for f in 0..num_freqs {
            let scaled = tape.scale(comp, (1u64 << f) as f64 * std::f64::consts::PI);
            parts.push(tape.sin(scaled));
            parts.push(tape.cos(scaled));
        }
        parts.push(comp);
    }
    tape.concat_cols(&parts)
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    /// The raw input is concatenated onto the activations entering this layer.
    pub skip_layer: usize,
    pub pos_freqs: usize,
    pub time_freqs: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { latent_dim: 8, hidden: 128, depth: 8, skip_layer: 4, pos_freqs: 6, time_freqs: 4 }
    }
}

impl DecoderConfig {
    pub fn input_dim(&self) -> usize {
        self.latent_dim + 3 * (2 * self.pos_freqs + 1) + (2 * self.time_freqs + 1)
    }

    /// (in, out) per layer. Output is 7: quaternion residual + translation.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let inp = self.input_dim();
        (0..self.depth)
            .map(|l| {
                let i = if l == 0 {
                    inp
                } else if l == self.skip_layer {
                    self.hidden + inp
                } else {
                    self.hidden
                };
                let o = if l == self.depth - 1 { 7 } else { self.hidden };
                (i, o)
            })
            .collect()
    }
}

/// MLP mapping (z, PE(p_k), PE(t)) to a per-keypoint rigid transform.
/// The final layer starts at zero so a fresh decoder emits exact identities.
#[derive(Debug, Clone)]
pub struct MotionDecoder {
    pub config: DecoderConfig,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Tape handles for one registered copy of the decoder parameters.
pub struct DecoderVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MotionDecoder {
    pub fn new(config: DecoderConfig, rng: &mut impl Rng) -> MotionDecoder {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let dims = config.layer_dims();
        for (l, &(i, o)) in dims.iter().enumerate() {
            let data = if l == dims.len() - 1 {
                vec![0.0; i * o]
            } else {
                let a = (6.0 / (i + o) as f64).sqrt();
                (0..i * o).map(|_| rng.gen_range(-a..a)).collect()
            };
            weights.push(Tensor::new(i, o, data));
            biases.push(Tensor::new(1, o, vec![0.0; o]));
        }
        MotionDecoder { config, weights, biases }
    }

    pub fn weight_name(l: usize) -> String {
        format!("decoder.w{l}")
    }

    pub fn bias_name(l: usize) -> String {
        format!("decoder.b{l}")
    }

    pub fn add_to_store(&self, store: &mut ParamStore, lr_mult: f64) {
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            store.add(&Self::weight_name(l), w.rows, w.cols, w.data.clone(), lr_mult);
            store.add(&Self::bias_name(l), b.rows, b.cols, b.data.clone(), lr_mult);
        }
    }

    pub fn read_from_store(&mut self, store: &ParamStore) {
        for l in 0..self.config.depth {
            self.weights[l] = store.get(&Self::weight_name(l)).tensor();
            self.biases[l] = store.get(&Self::bias_name(l)).tensor();
        }
    }

    pub fn vars_from_store(store: &ParamStore, tape: &mut Tape, depth: usize) -> DecoderVars {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..depth {
            weights.push(tape.leaf(store.get(&Self::weight_name(l)).tensor()));
            biases.push(tape.leaf(store.get(&Self::bias_name(l)).tensor()));
        }
        DecoderVars { weights, biases }
    }

    pub fn vars_from_self(&self, tape: &mut Tape) -> DecoderVars {
        DecoderVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Forward pass on tape. `z` is 1 x D, `positions` N_k x 3 (on tape so
    /// canonical keypoints receive gradients through the embedding), `t` in
    /// [0,1]. Returns (unit quaternions N_k x 4, translations N_k x 3).
    pub fn decode_vars(
        &self,
        tape: &mut Tape,
        params: &DecoderVars,
        z: Var,
        positions: Var,
        t: f64,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let n_k = tape.value(positions).rows;
        let rep: Vec<usize> = vec![0; n_k];
        let z_rep = tape.gather_rows(z, &rep);
        let pe_pos = positional_embedding_vars(tape, positions, cfg.pos_freqs);
        let t_leaf = tape.constant(Tensor::new(1, 1, vec![t]));
        let pe_t = positional_embedding_vars(tape, t_leaf, cfg.time_freqs);
        let pe_t_rep = tape.gather_rows(pe_t, &rep);
        let inp = tape.concat_cols(&[z_rep, pe_pos, pe_t_rep]);

        let mut h = inp;
        for l in 0..cfg.depth {
            if l == cfg.skip_layer {
                h = tape.concat_cols(&[h, inp]);
            }
            let lin = tape.matmul(h, params.weights[l]);
            let pre = tape.add_row_broadcast(lin, params.biases[l]);
            h = if l == cfg.depth - 1 { pre } else { tape.relu(pre) };
            if !tape.value(h).is_finite() {
                return Err(Error::Numeric(format!("decoder layer {l}: non-finite activations")));
            }
        }

        // Quaternion as residual from identity keeps the zero-init identity exact.
        let quat_res = tape.slice_cols(h, 0, 4);
        let identity = tape.constant(Tensor::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]));
        let quat_raw = tape.add_row_broadcast(quat_res, identity);
        let quats = tape.normalize_rows(quat_raw, 1e-12);
        let trans = tape.slice_cols(h, 4, 3);
        Ok((quats, trans))
    }

    /// Plain decode on a scratch tape.
    pub fn decode_motion(&self, z: &[f64], keypoints: &KeyPointSet, t: f64) -> Result<Vec<SE3>> {
        if z.len() != self.config.latent_dim {
            return Err(domain("latent dimension mismatch"));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(domain(format!("time {t} outside [0,1]")));
        }
        let mut tape = Tape::new();
        let params = self.vars_from_self(&mut tape);
        let zv = tape.leaf(Tensor::new(1, z.len(), z.to_vec()));
        let pos = tape.leaf(Tensor::new(
            keypoints.len(),
            3,
            keypoints.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
        ));
        let (quats, trans) = self.decode_vars(&mut tape, &params, zv, pos, t)?;
        let (tq, tt) = (tape.value(quats), tape.value(trans));
        (0..keypoints.len())
            .map(|k| {
                let r = tq.row(k);
                let q = UnitQuat::from_wxyz(r[0], r[1], r[2], r[3])?;
                Ok(SE3::new(q, Vec3::new(tt.at(k, 0), tt.at(k, 1), tt.at(k, 2))))
            })
            .collect()
    }
}

pub fn interpolate_latents(mu_a: &[f64], mu_b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(domain(format!("interpolation weight {alpha} outside [0,1]")));
    }
    if mu_a.len() != mu_b.len() {
        return Err(domain("latent dimension mismatch"));
    }
    Ok(mu_a.iter().zip(mu_b).map(|(&a, &b)| (1.0 - alpha) * a + alpha * b).collect())
}

/// Hashed bag-of-words text encoder plus a trainable 2-layer head mapping
/// the pooled embedding to a latent mean.
#[derive(Debug, Clone)]
pub struct PromptProjector {
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Frozen token table, vocab_size x embed_dim, derived from the seed.
    pub embedding: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// FNV-1a over the token bytes; stable across runs and platforms.
pub fn token_hash(token: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl PromptProjector {
    pub fn new(latent_dim: usize, embed_dim: usize, hidden: usize, vocab_size: usize, seed: u64) -> PromptProjector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<f64> =
            (0..vocab_size * embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a1 = (6.0 / (embed_dim + hidden) as f64).sqrt();
        let w1: Vec<f64> = (0..embed_dim * hidden).map(|_| rng.gen_range(-a1..a1)).collect();
        let a2 = (6.0 / (hidden + latent_dim) as f64).sqrt();
        let w2: Vec<f64> = (0..hidden * latent_dim).map(|_| rng.gen_range(-a2..a2)).collect();
        PromptProjector {
            embed_dim,
            vocab_size,
            latent_dim,
            hidden,
            seed,
            embedding: Tensor::new(vocab_size, embed_dim, table),
            w1: Tensor::new(embed_dim, hidden, w1),
            b1: Tensor::new(1, hidden, vec![0.0; hidden]),
            w2: Tensor::new(hidden, latent_dim, w2),
            b2: Tensor::new(1, latent_dim, vec![0.0; latent_dim]),
        }
    }

    /// Mean-pooled token embedding; order-invariant by construction.
    pub fn pool(&self, tokens: &[String]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(domain("empty prompt"));
        }
        let mut pooled = vec![0.0; self.embed_dim];
        for tok in tokens {
            let row = (token_hash(tok) % self.vocab_size as u64) as usize;
            for (p, e) in pooled.iter_mut().zip(self.embedding.row(row)) {
                *p += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);
        Ok(pooled)
    }

    pub fn project(&self, tokens: &[String]) -> Result<Vec<f64>> {
        let pooled = self.pool(tokens)?;
        let mut tape = Tape::new();
        let (w1, b1) = (tape.leaf(self.w1.clone()), tape.leaf(self.b1.clone()));
        let (w2, b2) = (tape.leaf(self.w2.clone()), tape.leaf(self.b2.clone()));
        let x = tape.leaf(Tensor::new(1, self.embed_dim, pooled));
        let out = self.head_vars(&mut tape, x, w1, b1, w2, b2);
        Ok(tape.value(out).data.clone())
    }

    /// The trainable head on tape; `pooled` is 1 x E.
    pub fn head_vars(&self, tape: &mut Tape, pooled: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
        let l1 = tape.matmul(pooled, w1);
        let p1 = tape.add_row_broadcast(l1, b1);
        let h = tape.relu(p1);
        let l2 = tape.matmul(h, w2);
        tape.add_row_broadcast(l2, b2)
    }
}

/// Single-file binary container: one JSON header line (shapes and arbitrary
/// metadata), then the arrays as little-endian f32 in header order.
pub fn write_array_container(
    path: &Path,
    meta: serde_json::Value,
    arrays: &[(&str, usize, usize, &[f64])],
) -> Result<()> {
    let index: Vec<serde_json::Value> = arrays
        .iter()
        .map(|(name, rows, cols, _)| serde_json::json!({"name": name, "rows": rows, "cols": cols}))
        .collect();
    let header = serde_json::json!({"meta": meta, "arrays": index});
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        for (name, rows, cols, data) in arrays {
            if data.len() != rows * cols {
                return Err(domain(format!("array {name}: shape/data mismatch")));
            }
            for &v in *data {
                f.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    // Atomic on the same filesystem; readers never see a torn file.
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct ArrayContainer {
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, Tensor>,
}

pub fn read_array_container(path: &Path) -> Result<ArrayContainer> {
    let bytes = std::fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("container missing header line".into()))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[..nl])?;
    let meta = header["meta"].clone();
    let index = header["arrays"]
        .as_array()
        .ok_or_else(|| Error::Format("container header lacks arrays index".into()))?;
    let mut cursor = &bytes[nl + 1..];
    let mut arrays = BTreeMap::new();
    for entry in index {
        let name = entry["name"]
            .as_str()
            .ok_or_else(|| Error::Format("array entry lacks name".into()))?;
        let rows = entry["rows"].as_u64().unwrap_or(0) as usize;
        let cols = entry["cols"].as_u64().unwrap_or(0) as usize;
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut buf = [0u8; 4];
            cursor
                .read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("container truncated in array {name}")))?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        arrays.insert(name.to_string(), Tensor::new(rows, cols, data));
    }
    Ok(ArrayContainer { meta, arrays })
}
