//! Sparse autoencoders over residual-stream vectors.
//!
//! Pre-activations subtract the decoder bias from the input before the
//! encoder (`(x - b_dec) W_enc + b_enc`). Two gates are supported: a plain
//! ReLU trained with an L1 penalty, and JumpReLU with learned per-feature
//! thresholds whose gradients come from a rectangle-kernel straight-through
//! estimator of bandwidth `ste_bandwidth`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, dot, l2_norm, matmul, matmul_at, matmul_bt, AdamConfig, AdamState, Matrix, Rng,
};

pub const SAE_FORMAT_VERSION: u32 = 1;
pub const INITIAL_THRESHOLD: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaeVariant {
    ReluL1,
    JumpRelu,
}

impl std::str::FromStr for SaeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu_l1" | "relu" => Ok(Self::ReluL1),
            "jump_relu" | "jumprelu" => Ok(Self::JumpRelu),
            other => Err(Error::invalid(format!("unknown SAE variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub d_model: usize,
    pub d_features: usize,
    /// `d_model × d_features`
    pub w_enc: Matrix,
    pub b_enc: Vec<f64>,
    /// `d_features × d_model`; each row is one feature direction.
    pub w_dec: Matrix,
    pub b_dec: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub variant: SaeVariant,
}

impl SaeParams {
    /// Decoder rows are random unit vectors, the encoder is their transpose,
    /// biases start at zero and JumpReLU thresholds at 0.001.
    pub fn init(d_model: usize, d_features: usize, variant: SaeVariant, rng: &mut Rng) -> Self {
        let mut w_dec = Matrix::zeros(d_features, d_model);
        for j in 0..d_features {
            let u = rng.unit_vector(d_model);
            w_dec.row_mut(j).copy_from_slice(&u);
        }
        let w_enc = w_dec.transpose();
        let theta = match variant {
            SaeVariant::ReluL1 => 0.0,
            SaeVariant::JumpRelu => INITIAL_THRESHOLD,
        };
        Self {
            d_model,
            d_features,
            w_enc,
            b_enc: vec![0.0; d_features],
            w_dec,
            b_dec: vec![0.0; d_model],
            thresholds: vec![theta; d_features],
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (m, f) = (self.d_model, self.d_features);
        if self.w_enc.shape() != (m, f) {
            return Err(Error::Shape {
                op: "sae w_enc",
                left: self.w_enc.shape(),
                right: (m, f),
            });
        }
        if self.w_dec.shape() != (f, m) {
            return Err(Error::Shape {
                op: "sae w_dec",
                left: self.w_dec.shape(),
                right: (f, m),
            });
        }
        for (name, len, want) in [
            ("b_enc", self.b_enc.len(), f),
            ("b_dec", self.b_dec.len(), m),
            ("thresholds", self.thresholds.len(), f),
        ] {
            if len != want {
                return Err(Error::invalid(format!("{name} has length {len}, expected {want}")));
            }
        }
        if let Some(j) = self.thresholds.iter().position(|t| !(*t >= 0.0)) {
            return Err(Error::invalid(format!("threshold {j} is negative or NaN")));
        }
        if self.variant == SaeVariant::ReluL1 && self.thresholds.iter().any(|t| *t != 0.0) {
            return Err(Error::invalid("ReLU SAE must have zero thresholds"));
        }
        Ok(())
    }

    #[inline]
    fn gate_value(&self, j: usize, pre: f64) -> f64 {
        let theta = match self.variant {
            SaeVariant::ReluL1 => 0.0,
            SaeVariant::JumpRelu => self.thresholds[j],
        };
        if pre > theta {
            pre
        } else {
            0.0
        }
    }

    pub fn pre_activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_model {
            return Err(Error::Length {
                op: "sae encode",
                left: x.len(),
                right: self.d_model,
            });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "sae encode input",
                index,
            });
        }
        let mut pre = self.b_enc.clone();
        for (i, (&xi, &bi)) in x.iter().zip(&self.b_dec).enumerate() {
            let c = xi - bi;
            if c == 0.0 {
                continue;
            }
            for (p, w) in pre.iter_mut().zip(self.w_enc.row(i)) {
                *p += c * w;
            }
        }
        Ok(pre)
    }

    /// Feature activations for one input vector.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut pre = self.pre_activations(x)?;
        for (j, p) in pre.iter_mut().enumerate() {
            *p = self.gate_value(j, *p);
        }
        Ok(pre)
    }

    /// Encodes every row of `x`.
    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix> {
        let pre = self.batch_pre_activations(x)?;
        Ok(self.apply_gate(&pre))
    }

    fn batch_pre_activations(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_model {
            return Err(Error::Shape {
                op: "sae encode_batch",
                left: x.shape(),
                right: (x.rows(), self.d_model),
            });
        }
        let mut centered = x.clone();
        for r in 0..centered.rows() {
            for (v, b) in centered.row_mut(r).iter_mut().zip(&self.b_dec) {
                *v -= b;
            }
        }
        let mut pre = matmul(&centered, &self.w_enc)?;
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&self.b_enc) {
                *v += b;
            }
        }
        Ok(pre)
    }

    fn apply_gate(&self, pre: &Matrix) -> Matrix {
        let mut f = pre.clone();
        for r in 0..f.rows() {
            for (j, v) in f.row_mut(r).iter_mut().enumerate() {
                *v = self.gate_value(j, *v);
            }
        }
        f
    }

    /// `fᵀ W_dec + b_dec`.
    pub fn decode(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.d_features {
            return Err(Error::Length {
                op: "sae decode",
                left: f.len(),
                right: self.d_features,
            });
        }
        if let Some(index) = f.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "sae decode features (must be finite and >= 0)",
                index,
            });
        }
        let mut out = self.b_dec.clone();
        for (j, &fj) in f.iter().enumerate() {
            if fj == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.w_dec.row(j)) {
                *o += fj * w;
            }
        }
        Ok(out)
    }

    pub fn decode_batch(&self, f: &Matrix) -> Result<Matrix> {
        let mut out = matmul(f, &self.w_dec)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.b_dec) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Renormalises every decoder row to unit L2 norm.
    pub fn normalize_decoder(&mut self) {
        for j in 0..self.d_features {
            let row = self.w_dec.row_mut(j);
            let n = l2_norm(row);
            if n > 1e-12 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    pub fn decoder_row_norms(&self) -> Vec<f64> {
        (0..self.d_features).map(|j| l2_norm(self.w_dec.row(j))).collect()
    }

    pub fn save(&self, path: &Path, train_config: Option<&SaeTrainConfig>) -> Result<()> {
        let ckpt = SaeCheckpoint {
            format_version: SAE_FORMAT_VERSION,
            d_model: self.d_model,
            d_features: self.d_features,
            variant: self.variant,
            w_enc: self.w_enc.data().to_vec(),
            b_enc: self.b_enc.clone(),
            w_dec: self.w_dec.data().to_vec(),
            b_dec: self.b_dec.clone(),
            thresholds: self.thresholds.clone(),
            train_config: train_config.cloned(),
        };
        let text = serde_json::to_string(&ckpt)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: SaeCheckpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(ckpt)
    }

    pub fn from_checkpoint(ckpt: SaeCheckpoint) -> Result<Self> {
        if ckpt.format_version != SAE_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported SAE format_version {}",
                ckpt.format_version
            )));
        }
        let params = Self {
            d_model: ckpt.d_model,
            d_features: ckpt.d_features,
            w_enc: Matrix::from_vec(ckpt.d_model, ckpt.d_features, ckpt.w_enc)?,
            b_enc: ckpt.b_enc,
            w_dec: Matrix::from_vec(ckpt.d_features, ckpt.d_model, ckpt.w_dec)?,
            b_dec: ckpt.b_dec,
            thresholds: ckpt.thresholds,
            variant: ckpt.variant,
        };
        params.validate()?;
        Ok(params)
    }
}

/// On-disk SAE layout. Matrices are flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeCheckpoint {
    pub format_version: u32,
    pub d_model: usize,
    pub d_features: usize,
    pub variant: SaeVariant,
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    pub w_dec: Vec<f64>,
    pub b_dec: Vec<f64>,
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub train_config: Option<SaeTrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeTrainConfig {
    pub variant: SaeVariant,
    pub d_features: usize,
    /// Weight on the sparsity term (L1 for ReLU, L0 for JumpReLU).
    pub sparsity_coefficient: f64,
    /// JumpReLU only: penalise `(L0 - target)^2` instead of `L0`.
    pub target_l0: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub ste_bandwidth: f64,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            variant: SaeVariant::JumpRelu,
            d_features: 512,
            sparsity_coefficient: 0.1,
            target_l0: Some(16.0),
            batch_size: 64,
            steps: 3000,
            learning_rate: 3e-3,
            ste_bandwidth: 0.1,
            seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("SAE training needs steps >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("SAE training needs batch_size >= 1"));
        }
        if self.d_features == 0 {
            return Err(Error::invalid("SAE needs d_features >= 1"));
        }
        if !(self.sparsity_coefficient >= 0.0) {
            return Err(Error::invalid("sparsity_coefficient must be >= 0"));
        }
        if !(self.ste_bandwidth > 0.0) {
            return Err(Error::invalid("ste_bandwidth must be > 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if let Some(t) = self.target_l0 {
            if !(t >= 0.0) {
                return Err(Error::invalid("target_l0 must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaeStepLog {
    pub step: usize,
    /// Mean squared error per element.
    pub mse: f64,
    pub mean_l0: f64,
}

#[derive(Debug, Clone)]
pub struct SaeTrainOutput {
    pub params: SaeParams,
    pub log: Vec<SaeStepLog>,
}

/// Rectangle kernel: 1 on `(-1/2, 1/2)`, 0 elsewhere.
#[inline]
fn rectangle(u: f64) -> f64 {
    if u.abs() < 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Trains an SAE on the rows of `activations`.
///
/// The objective per batch of size `B` is
/// `(1/B) Σ ||x̂ - x||² + λ · S`, where `S` is the batch-mean L1 of the
/// features (ReLU) or the batch-mean L0 (JumpReLU; `(L0 - target)²` when a
/// target is set). Heaviside gradients reach the thresholds only, through
/// `∂H(z - θ)/∂θ ≈ -K((z - θ)/ε)/ε`. Decoder rows are renormalised after
/// every step. Batches are drawn from a seeded shuffle of the rows.
pub fn train_sae(activations: &Matrix, cfg: &SaeTrainConfig) -> Result<SaeTrainOutput> {
    cfg.validate()?;
    if activations.rows() == 0 || activations.cols() == 0 {
        return Err(Error::invalid("SAE training needs at least one non-empty activation"));
    }
    if let Some(index) = activations.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "SAE training activations",
            index,
        });
    }

    let d = activations.cols();
    let m = cfg.d_features;
    let mut rng = Rng::new(cfg.seed);
    let mut sae = SaeParams::init(d, m, cfg.variant, &mut rng);
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut st_w_enc = AdamState::for_matrix(&sae.w_enc, adam)?;
    let mut st_w_dec = AdamState::for_matrix(&sae.w_dec, adam)?;
    let mut st_b_enc = AdamState::for_vector(&sae.b_enc, adam)?;
    let mut st_b_dec = AdamState::for_vector(&sae.b_dec, adam)?;
    let mut st_theta = AdamState::for_vector(&sae.thresholds, adam)?;

    let n = activations.rows();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0;

    let eps = cfg.ste_bandwidth;
    let lambda = cfg.sparsity_coefficient;
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut x = Matrix::zeros(bs, d);
        for r in 0..bs {
            if cursor == n {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            x.row_mut(r).copy_from_slice(activations.row(order[cursor]));
            cursor += 1;
        }
        let b = bs as f64;

        let mut centered = x.clone();
        for r in 0..bs {
            for (v, bd) in centered.row_mut(r).iter_mut().zip(&sae.b_dec) {
                *v -= bd;
            }
        }
        let mut pre = matmul(&centered, &sae.w_enc)?;
        for r in 0..bs {
            for (v, be) in pre.row_mut(r).iter_mut().zip(&sae.b_enc) {
                *v += be;
            }
        }
        let f = sae.apply_gate(&pre);
        let recon = sae.decode_batch(&f)?;

        let mut d_recon = recon.clone();
        let mut sq = 0.0;
        for (g, xv) in d_recon.data_mut().iter_mut().zip(x.data()) {
            let e = *g - xv;
            sq += e * e;
            *g = 2.0 * e / b;
        }
        let active = f.data().iter().filter(|v| **v > 0.0).count();
        let mean_l0 = active as f64 / b;
        log.push(SaeStepLog {
            step,
            mse: sq / (b * d as f64),
            mean_l0,
        });

        let g_w_dec = matmul_at(&f, &d_recon)?;
        let mut g_b_dec: Vec<f64> = (0..d)
            .map(|c| (0..bs).map(|r| d_recon.get(r, c)).sum())
            .collect();
        let mut d_f = matmul_bt(&d_recon, &sae.w_dec)?;

        let mut g_theta = vec![0.0; m];
        match cfg.variant {
            SaeVariant::ReluL1 => {
                // ∂(λ/B Σ f)/∂f on the active set; the mask below zeroes the rest
                for v in d_f.data_mut() {
                    *v += lambda / b;
                }
            }
            SaeVariant::JumpRelu => {
                let l0_scale = match cfg.target_l0 {
                    Some(t) => 2.0 * lambda * (mean_l0 - t),
                    None => lambda,
                };
                for r in 0..bs {
                    for j in 0..m {
                        let theta = sae.thresholds[j];
                        let z = pre.get(r, j);
                        let k = rectangle((z - theta) / eps);
                        if k == 0.0 {
                            continue;
                        }
                        // ∂f/∂θ = -(θ/ε)K and ∂L0/∂θ = -(1/(Bε))K
                        g_theta[j] += d_f.get(r, j) * (-theta / eps) * k;
                        g_theta[j] += l0_scale * (-k / (b * eps));
                    }
                }
            }
        }

        // ∂f/∂z is 1 on the open gate and 0 elsewhere
        for r in 0..bs {
            for j in 0..m {
                if f.get(r, j) <= 0.0 {
                    d_f.set(r, j, 0.0);
                }
            }
        }
        let d_pre = d_f;
        let g_w_enc = matmul_at(&centered, &d_pre)?;
        let g_b_enc: Vec<f64> = (0..m)
            .map(|j| (0..bs).map(|r| d_pre.get(r, j)).sum())
            .collect();
        let d_centered = matmul_bt(&d_pre, &sae.w_enc)?;
        for (c, g) in g_b_dec.iter_mut().enumerate() {
            *g -= (0..bs).map(|r| d_centered.get(r, c)).sum::<f64>();
        }

        adam_step(&mut sae.w_enc, &g_w_enc, &mut st_w_enc)?;
        adam_step(&mut sae.w_dec, &g_w_dec, &mut st_w_dec)?;
        st_b_enc.update(&mut sae.b_enc, &g_b_enc)?;
        st_b_dec.update(&mut sae.b_dec, &g_b_dec)?;
        if cfg.variant == SaeVariant::JumpRelu {
            st_theta.update(&mut sae.thresholds, &g_theta)?;
            for t in &mut sae.thresholds {
                *t = t.max(0.0);
            }
        }
        sae.normalize_decoder();

        if !sae.w_enc.is_finite() || !sae.w_dec.is_finite() {
            return Err(Error::NonFinite {
                context: "SAE parameters after step",
                index: step,
            });
        }
    }

    Ok(SaeTrainOutput { params: sae, log })
}

/// Mean count of strictly positive features per input row.
pub fn mean_l0(sae: &SaeParams, activations: &Matrix) -> Result<f64> {
    if activations.rows() == 0 {
        return Err(Error::invalid("mean_l0 needs a non-empty batch"));
    }
    let f = sae.encode_batch(activations)?;
    let active = f.data().iter().filter(|v| **v > 0.0).count();
    Ok(active as f64 / activations.rows() as f64)
}

/// Per-element reconstruction MSE over a batch.
pub fn reconstruction_mse(sae: &SaeParams, activations: &Matrix) -> Result<f64> {
    let f = sae.encode_batch(activations)?;
    let recon = sae.decode_batch(&f)?;
    let sq: f64 = recon
        .data()
        .iter()
        .zip(activations.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / activations.data().len().max(1) as f64)
}

/// Samples drawn from a known non-negative sparse code over random unit atoms.
#[derive(Debug, Clone)]
pub struct SyntheticDictionaryData {
    /// `n_atoms × d_model`, unit rows.
    pub dictionary: Matrix,
    /// `n_samples × d_model`.
    pub samples: Matrix,
}

/// Each sample sums `active_per_sample` distinct atoms with coefficients
/// uniform in `[0.5, 1.5]`.
pub fn make_synthetic_dictionary_data(
    n_atoms: usize,
    d_model: usize,
    active_per_sample: usize,
    n_samples: usize,
    seed: u64,
) -> Result<SyntheticDictionaryData> {
    if active_per_sample > n_atoms || n_atoms == 0 || d_model == 0 {
        return Err(Error::invalid("bad synthetic dictionary dimensions"));
    }
    let mut rng = Rng::new(seed);
    let mut dictionary = Matrix::zeros(n_atoms, d_model);
    for a in 0..n_atoms {
        let u = rng.unit_vector(d_model);
        dictionary.row_mut(a).copy_from_slice(&u);
    }
    let mut samples = Matrix::zeros(n_samples, d_model);
    let mut atoms: Vec<usize> = (0..n_atoms).collect();
    for s in 0..n_samples {
        rng.shuffle(&mut atoms);
        for &a in &atoms[..active_per_sample] {
            let c = rng.uniform_range(0.5, 1.5);
            let atom = dictionary.row(a).to_vec();
            for (v, w) in samples.row_mut(s).iter_mut().zip(atom) {
                *v += c * w;
            }
        }
    }
    Ok(SyntheticDictionaryData {
        dictionary,
        samples,
    })
}

/// Mean over true atoms of the best cosine against any learned decoder row.
pub fn dictionary_recovery(learned: &Matrix, truth: &Matrix) -> f64 {
    let mut total = 0.0;
    for a in 0..truth.rows() {
        let t = truth.row(a);
        let tn = l2_norm(t);
        let best = (0..learned.rows())
            .map(|j| {
                let l = learned.row(j);
                let ln = l2_norm(l);
                if ln == 0.0 || tn == 0.0 {
                    0.0
                } else {
                    dot(t, l) / (tn * ln)
                }
            })
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    total / truth.rows().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_sae(theta: f64, variant: SaeVariant) -> SaeParams {
        SaeParams {
            d_model: 2,
            d_features: 2,
            w_enc: Matrix::identity(2),
            b_enc: vec![0.0; 2],
            w_dec: Matrix::identity(2),
            b_dec: vec![0.0; 2],
            thresholds: vec![theta; 2],
            variant,
        }
    }

    fn random_sae(seed: u64, d: usize, m: usize, variant: SaeVariant) -> SaeParams {
        let mut rng = Rng::new(seed);
        let mut s = SaeParams::init(d, m, variant, &mut rng);
        s.w_enc = Matrix::random_normal(d, m, 0.5, &mut rng);
        s.b_enc = (0..m).map(|_| 0.1 * rng.normal()).collect();
        s.b_dec = (0..d).map(|_| 0.1 * rng.normal()).collect();
        if variant == SaeVariant::JumpRelu {
            s.thresholds = (0..m).map(|_| 0.3 * rng.uniform()).collect();
        }
        s
    }

    #[test]
    fn jumprelu_hand_example() {
        let sae = identity_sae(0.2, SaeVariant::JumpRelu);
        assert_eq!(sae.encode(&[0.5, -0.3]).unwrap(), vec![0.5, 0.0]);
        // below threshold but positive is zeroed as well
        assert_eq!(sae.encode(&[0.15, 0.25]).unwrap(), vec![0.0, 0.25]);
    }

    #[test]
    fn zero_threshold_jumprelu_equals_relu() {
        let mut rng = Rng::new(3);
        let mut relu = random_sae(9, 5, 12, SaeVariant::ReluL1);
        let mut jump = relu.clone();
        jump.variant = SaeVariant::JumpRelu;
        relu.thresholds = vec![0.0; 12];
        jump.thresholds = vec![0.0; 12];
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            assert_eq!(relu.encode(&x).unwrap(), jump.encode(&x).unwrap());
        }
    }

    #[test]
    fn encode_matches_per_feature_scalar_loop() {
        let sae = random_sae(21, 6, 10, SaeVariant::JumpRelu);
        let mut rng = Rng::new(22);
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let got = sae.encode(&x).unwrap();
        for j in 0..10 {
            let mut z = sae.b_enc[j];
            for i in 0..6 {
                z += (x[i] - sae.b_dec[i]) * sae.w_enc.get(i, j);
            }
            let want = if z > sae.thresholds[j] { z } else { 0.0 };
            assert!((got[j] - want).abs() <= 1e-12);
        }
        let batch = Matrix::from_rows(&[x.clone()]).unwrap();
        let gb = sae.encode_batch(&batch).unwrap();
        for j in 0..10 {
            assert!((gb.get(0, j) - got[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn decode_examples() {
        let mut sae = random_sae(4, 3, 4, SaeVariant::ReluL1);
        sae.normalize_decoder();
        assert_eq!(sae.decode(&[0.0; 4]).unwrap(), sae.b_dec);
        let out = sae.decode(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        for i in 0..3 {
            assert!((out[i] - (sae.b_dec[i] + sae.w_dec.get(1, i))).abs() < 1e-15);
        }
        let f = vec![0.3, 0.0, 1.7, 0.2];
        let out = sae.decode(&f).unwrap();
        for i in 0..3 {
            let mut want = sae.b_dec[i];
            for j in 0..4 {
                want += f[j] * sae.w_dec.get(j, i);
            }
            assert!((out[i] - want).abs() <= 1e-12);
        }
        assert!(sae.decode(&[1.0]).is_err());
        assert!(sae.encode(&[1.0]).is_err());
    }

    #[test]
    fn mean_l0_arithmetic() {
        let sae = SaeParams {
            d_model: 6,
            d_features: 6,
            w_enc: Matrix::identity(6),
            b_enc: vec![0.0; 6],
            w_dec: Matrix::identity(6),
            b_dec: vec![0.0; 6],
            thresholds: vec![0.0; 6],
            variant: SaeVariant::ReluL1,
        };
        let zeros = Matrix::zeros(4, 6);
        assert_eq!(mean_l0(&sae, &zeros).unwrap(), 0.0);
        let batch = Matrix::from_rows(&[
            vec![1.0, 1.0, 1.0, 0.0, -1.0, 0.0],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, -1.0],
        ])
        .unwrap();
        assert_eq!(mean_l0(&sae, &batch).unwrap(), 4.0);
        assert!(mean_l0(&sae, &Matrix::zeros(0, 6)).is_err());
    }

    #[test]
    fn steps_zero_is_rejected() {
        let cfg = SaeTrainConfig {
            steps: 0,
            ..SaeTrainConfig::default()
        };
        assert!(train_sae(&Matrix::zeros(4, 3), &cfg).is_err());
        let cfg = SaeTrainConfig::default();
        assert!(train_sae(&Matrix::zeros(0, 3), &cfg).is_err());
        let mut bad = Matrix::zeros(2, 2);
        bad.data_mut()[1] = f64::NAN;
        assert!(train_sae(&bad, &cfg).is_err());
    }

    #[test]
    fn identity_recoverable_data_reaches_low_mse() {
        // non-negative data is exactly representable by an identity ReLU SAE
        let mut rng = Rng::new(8);
        let data = Matrix::from_vec(
            512,
            8,
            (0..512 * 8).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let cfg = SaeTrainConfig {
            variant: SaeVariant::ReluL1,
            d_features: 8,
            sparsity_coefficient: 0.0,
            target_l0: None,
            batch_size: 64,
            steps: 3000,
            learning_rate: 5e-3,
            ste_bandwidth: 1e-3,
            seed: 1,
        };
        let out = train_sae(&data, &cfg).unwrap();
        let mse = reconstruction_mse(&out.params, &data).unwrap();
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn decoder_rows_stay_unit_norm_every_step() {
        let data = make_synthetic_dictionary_data(8, 6, 2, 128, 2).unwrap();
        for variant in [SaeVariant::ReluL1, SaeVariant::JumpRelu] {
            let mut cfg = SaeTrainConfig {
                variant,
                d_features: 16,
                sparsity_coefficient: 1e-2,
                batch_size: 16,
                steps: 1,
                learning_rate: 1e-2,
                ste_bandwidth: 0.05,
                ..SaeTrainConfig::default()
            };
            for steps in [1, 2, 5, 20] {
                cfg.steps = steps;
                let out = train_sae(&data.samples, &cfg).unwrap();
                for n in out.params.decoder_row_norms() {
                    assert!((n - 1.0).abs() <= 1e-6);
                }
                assert!(out.params.thresholds.iter().all(|t| *t >= 0.0));
                if variant == SaeVariant::ReluL1 {
                    assert!(out.params.thresholds.iter().all(|t| *t == 0.0));
                }
                assert_eq!(out.log.len(), steps);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let sae = random_sae(31, 4, 6, SaeVariant::JumpRelu);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.json");
        sae.save(&path, Some(&SaeTrainConfig::default())).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"format_version\":1"));
        assert_eq!(SaeParams::load(&path).unwrap(), sae);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest};

        proptest! {
            #[test]
            fn encode_is_non_negative(seed in any::<u64>()) {
                for variant in [SaeVariant::ReluL1, SaeVariant::JumpRelu] {
                    let sae = random_sae(seed, 5, 9, variant);
                    let mut rng = Rng::new(seed ^ 0xabc);
                    let x: Vec<f64> = (0..5).map(|_| 3.0 * rng.normal()).collect();
                    prop_assert!(sae.encode(&x).unwrap().iter().all(|v| *v >= 0.0));
                }
            }

            #[test]
            fn relu_path_is_positively_homogeneous(seed in any::<u64>(), c in 0.1f64..10.0) {
                let mut sae = random_sae(seed, 4, 7, SaeVariant::JumpRelu);
                sae.b_enc = vec![0.0; 7];
                sae.b_dec = vec![0.0; 4];
                sae.thresholds = vec![0.0; 7];
                let mut rng = Rng::new(seed.wrapping_add(1));
                let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                let x2: Vec<f64> = x.iter().map(|v| 2.0 * c * v).collect();
                let xc: Vec<f64> = x.iter().map(|v| c * v).collect();
                let a = sae.encode(&xc).unwrap();
                let b = sae.encode(&x2).unwrap();
                for (u, v) in a.iter().zip(&b) {
                    prop_assert!((2.0 * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
                }
            }
        }
    }
}
