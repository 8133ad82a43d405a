//! The latent-variable neural process: a DeepSet encoder shared by the
//! conditional prior q(z|C) and the posterior q(z|C,T) (one parameter set),
//! diagonal-Gaussian latent heads, and a diagonal-Gaussian decoder.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{RngStream, Tape, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub x_dim: usize,
    pub y_dim: usize,
    pub z_dim: usize,
    pub hidden: usize,
    /// Latent std = floor + softplus(raw).
    pub latent_std_floor: f64,
    /// Decoder std = floor + scale * softplus(raw). The 0.1 floor pins the
    /// ~1.38 per-point context log-likelihood ceiling.
    pub decoder_std_floor: f64,
    pub decoder_std_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            x_dim: 1,
            y_dim: 1,
            z_dim: 32,
            hidden: 64,
            latent_std_floor: 1e-3,
            decoder_std_floor: 0.1,
            decoder_std_scale: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 hex digest; used to fingerprint configs in output artifacts.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

/// Diagonal Gaussian over the latent variable (value level).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-target-point predictive Gaussian (value level).
#[derive(Debug, Clone)]
pub struct PredictiveGaussian {
    pub mean: Tensor,
    pub std: Tensor,
}

const LAYER_NAMES: [&str; 16] = [
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "lat_mu_w", "lat_mu_b", "lat_sig_w", "lat_sig_b",
    "dec_w1", "dec_b1", "dec_w2", "dec_b2", "dec_mu_w", "dec_mu_b", "dec_sig_w", "dec_sig_b",
];

/// All trainable weights. The encoder is shared between prior and posterior
/// paths; there is a single parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct NPParams {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
}

fn he_uniform(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    use rand::Rng;
    let bound = (6.0 / rows as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

impl NPParams {
    /// Seed-keyed fan-in initialization.
    pub fn init(config: ModelConfig, root: &RngStream) -> Self {
        let (dx, dy, dz, h) = (config.x_dim, config.y_dim, config.z_dim, config.hidden);
        let shapes: [(usize, usize); 16] = [
            (dx + dy, h),
            (1, h),
            (h, h),
            (1, h),
            (h, dz),
            (1, dz),
            (h, dz),
            (1, dz),
            (dx + dz, h),
            (1, h),
            (h, h),
            (1, h),
            (h, dy),
            (1, dy),
            (h, dy),
            (1, dy),
        ];
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                if LAYER_NAMES[i].ends_with('b') || LAYER_NAMES[i].contains("_b") {
                    Tensor::zeros(r, c)
                } else {
                    he_uniform(&mut root.stream("init", i as u64), r, c)
                }
            })
            .collect();
        NPParams { config, tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn layer_names() -> &'static [&'static str] {
        &LAYER_NAMES
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Insert every parameter as a leaf on `tape`.
    pub fn vars(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            config: self.config.clone(),
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Tape handles for one forward pass.
pub struct ModelVars {
    pub config: ModelConfig,
    pub vars: Vec<Var>,
}

/// Latent-distribution nodes on the tape.
#[derive(Clone, Copy)]
pub struct LatentVars {
    pub mean: Var,
    pub std: Var,
}

/// Decoder output nodes: (K*N, Dy) means and stds, k-major row order.
#[derive(Clone, Copy)]
pub struct DecodedVars {
    pub mean: Var,
    pub std: Var,
    pub k: usize,
    pub n: usize,
}

impl ModelVars {
    fn v(&self, name: &str) -> Var {
        let i = LAYER_NAMES.iter().position(|&n| n == name).expect("known layer");
        self.vars[i]
    }

    /// Per-point embeddings h(x_p, y_p) for a stack of points, (P, hidden).
    pub fn encode_points(&self, tape: &mut Tape, xs: &Tensor, ys: &Tensor) -> Result<Var> {
        if xs.rows() == 0 {
            return Err(Error::Domain("encode_points: empty point set".into()));
        }
        if xs.rows() != ys.rows() {
            return Err(Error::Contract("encode_points: x/y row mismatch".into()));
        }
        let x = tape.leaf(xs.clone());
        let y = tape.leaf(ys.clone());
        let input = tape.concat_cols(x, y);
        let pre1 = tape.matmul(input, self.v("enc_w1"));
        let pre1 = tape.add_row(pre1, self.v("enc_b1"));
        let h1 = tape.relu(pre1);
        let pre2 = tape.matmul(h1, self.v("enc_w2"));
        let pre2 = tape.add_row(pre2, self.v("enc_b2"));
        Ok(tape.relu(pre2))
    }

    /// DeepSet embedding: mean over per-point embeddings, (1, hidden).
    pub fn encode_set(&self, tape: &mut Tape, xs: &Tensor, ys: &Tensor) -> Result<Var> {
        let h = self.encode_points(tape, xs, ys)?;
        Ok(tape.mean_rows_range(h, 0, xs.rows()))
    }

    /// Latent heads on an embedding: mean = g_mu(e), std = floor + softplus.
    pub fn latent_dist(&self, tape: &mut Tape, embedding: Var) -> Result<LatentVars> {
        let mean = tape.matmul(embedding, self.v("lat_mu_w"));
        let mean = tape.add_row(mean, self.v("lat_mu_b"));
        let raw = tape.matmul(embedding, self.v("lat_sig_w"));
        let raw = tape.add_row(raw, self.v("lat_sig_b"));
        let sp = tape.softplus(raw);
        let std = tape.add_scalar(sp, self.config.latent_std_floor);
        for v in [mean, std] {
            if !tape.value(v).all_finite() {
                return Err(Error::Numeric("latent head produced non-finite values".into()));
            }
        }
        Ok(LatentVars { mean, std })
    }

    /// z = mean + std * eps for a stack of K draws; differentiable in the
    /// distribution parameters.
    pub fn reparam_sample(&self, tape: &mut Tape, dist: LatentVars, eps: &Tensor) -> Var {
        let e = tape.leaf(eps.clone());
        let scaled = tape.mul_row(e, dist.std);
        tape.add_row(scaled, dist.mean)
    }

    /// Decode all (target point, z sample) pairs in one pass. Row order is
    /// k-major: sample k covers rows [k*N, (k+1)*N).
    pub fn decode(&self, tape: &mut Tape, x_tgt: &Tensor, z: Var) -> Result<DecodedVars> {
        let n = x_tgt.rows();
        let k = tape.value(z).rows();
        let x = tape.leaf(x_tgt.clone());
        let x_rep = tape.tile_all(x, k);
        let z_rep = tape.repeat_each_row(z, n);
        let input = tape.concat_cols(x_rep, z_rep);
        let pre1 = tape.matmul(input, self.v("dec_w1"));
        let pre1 = tape.add_row(pre1, self.v("dec_b1"));
        let h1 = tape.relu(pre1);
        let pre2 = tape.matmul(h1, self.v("dec_w2"));
        let pre2 = tape.add_row(pre2, self.v("dec_b2"));
        let h2 = tape.relu(pre2);
        let mean = tape.matmul(h2, self.v("dec_mu_w"));
        let mean = tape.add_row(mean, self.v("dec_mu_b"));
        let raw = tape.matmul(h2, self.v("dec_sig_w"));
        let raw = tape.add_row(raw, self.v("dec_sig_b"));
        let sp = tape.softplus(raw);
        let sp = tape.scale(sp, self.config.decoder_std_scale);
        let std = tape.add_scalar(sp, self.config.decoder_std_floor);
        for v in [mean, std] {
            if !tape.value(v).all_finite() {
                return Err(Error::Numeric("decoder produced non-finite values".into()));
            }
        }
        Ok(DecodedVars { mean, std, k, n })
    }

    /// Joint target log-likelihood per sample: (K, 1). Factorizes over
    /// points and output dimensions.
    pub fn joint_log_lik(&self, tape: &mut Tape, dec: DecodedVars, y_tgt: &Tensor) -> Var {
        let per_point = self.per_point_log_lik(tape, dec, y_tgt);
        tape.sum_rows(per_point)
    }

    /// Per-(sample, point) log-likelihood matrix: (K, N).
    pub fn per_point_log_lik(&self, tape: &mut Tape, dec: DecodedVars, y_tgt: &Tensor) -> Var {
        let y = tape.leaf(y_tgt.clone());
        let y_rep = tape.tile_all(y, dec.k);
        let lp_rows = gaussian_log_pdf_rows(tape, y_rep, dec.mean, dec.std); // (K*N, 1)
        tape.reshape(lp_rows, dec.k, dec.n)
    }

    /// log q(z_k) under a diagonal Gaussian, per sample: (K, 1).
    pub fn latent_log_pdf(&self, tape: &mut Tape, dist: LatentVars, z: Var) -> Var {
        let neg_mean = tape.neg(dist.mean);
        let centered = tape.add_row(z, neg_mean);
        let ones = tape.leaf(Tensor::new(1, tape.value(dist.std).cols(), vec![1.0; tape.value(dist.std).cols()]));
        let inv_std = tape.div(ones, dist.std);
        let standardized = tape.mul_row(centered, inv_std);
        let sq = tape.square(standardized);
        let half_sq = tape.scale(sq, 0.5);
        let ln_std = tape.ln(dist.std);
        let with_ln = tape.add_row(half_sq, ln_std);
        let with_const = tape.add_scalar(with_ln, 0.5 * crate::numkit::LN_2PI);
        let neg = tape.neg(with_const);
        tape.sum_rows(neg)
    }

    /// Value-level latent distribution from an embedding node.
    pub fn latent_dist_value(&self, tape: &mut Tape, embedding: Var) -> Result<DiagGaussian> {
        let lat = self.latent_dist(tape, embedding)?;
        Ok(DiagGaussian {
            mean: tape.value(lat.mean).data().to_vec(),
            std: tape.value(lat.std).data().to_vec(),
        })
    }

    /// Value-level predictive distribution for one z sample row.
    pub fn predictive(&self, tape: &mut Tape, x_tgt: &Tensor, z: Var) -> Result<PredictiveGaussian> {
        let dec = self.decode(tape, x_tgt, z)?;
        Ok(PredictiveGaussian {
            mean: tape.value(dec.mean).clone(),
            std: tape.value(dec.std).clone(),
        })
    }
}

/// Row-wise Gaussian log-density summed over output dimensions: (R, 1).
fn gaussian_log_pdf_rows(tape: &mut Tape, y: Var, mean: Var, std: Var) -> Var {
    let diff = tape.sub(y, mean);
    let sq = tape.square(diff);
    let var2 = tape.square(std);
    let var2 = tape.scale(var2, 2.0);
    let quad = tape.div(sq, var2);
    let ln_std = tape.ln(std);
    let sum = tape.add(ln_std, quad);
    let sum = tape.add_scalar(sum, 0.5 * crate::numkit::LN_2PI);
    let neg = tape.neg(sum);
    tape.sum_rows(neg)
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic, JSON manifest (layer names + shapes + config +
// config hash + seed), then raw little-endian f64s in manifest order.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"RNPCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    config_hash: String,
    seed: u64,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save_checkpoint(params: &NPParams, seed: u64, path: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        config: params.config.clone(),
        config_hash: params.config.hash(),
        seed,
        layers: LAYER_NAMES
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| LayerEntry { name: name.to_string(), rows: t.rows(), cols: t.cols() })
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_json)?;
    for t in params.tensors() {
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NPParams, u64)> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Integrity("bad checkpoint magic".into()));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let mut manifest_json = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut manifest_json)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_json)?;
    if manifest.config_hash != manifest.config.hash() {
        return Err(Error::Integrity("config hash mismatch".into()));
    }
    if manifest.layers.len() != LAYER_NAMES.len() {
        return Err(Error::Integrity(format!(
            "expected {} layers, manifest lists {}",
            LAYER_NAMES.len(),
            manifest.layers.len()
        )));
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    let expected: usize = manifest.layers.iter().map(|l| l.rows * l.cols).sum();
    if rest.len() != expected * 8 {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes, manifest shapes require {}",
            rest.len(),
            expected * 8
        )));
    }
    let mut tensors = Vec::with_capacity(LAYER_NAMES.len());
    let mut offset = 0;
    for (entry, name) in manifest.layers.iter().zip(LAYER_NAMES) {
        if entry.name != name {
            return Err(Error::Integrity(format!(
                "layer '{}' where '{name}' was expected",
                entry.name
            )));
        }
        let count = entry.rows * entry.cols;
        let data: Vec<f64> = rest[offset..offset + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += count * 8;
        tensors.push(Tensor::new(entry.rows, entry.cols, data));
    }
    let params = NPParams { config: manifest.config, tensors };
    // shape sanity against the config
    let fresh = NPParams::init(params.config.clone(), &RngStream::new(0));
    for (a, b) in params.tensors().iter().zip(fresh.tensors()) {
        if a.shape() != b.shape() {
            return Err(Error::Integrity("layer shape disagrees with config".into()));
        }
    }
    Ok((params, manifest.seed))
}
