//! GPT-2 style decoder: checkpoint loading and a forward pass that honours
//! a caller-supplied binary attention mask on top of the causal constraint.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, Tensor, WEIGHTS_MAGIC};
use crate::error::{Error, Result};

/// Additive logit for excluded keys. Half the most negative finite `f32`
/// keeps `score + fill` finite, so max-subtraction never sees `-inf - -inf`.
pub const MASK_FILL: f32 = 0.5 * f32::MIN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub layernorm_epsilon: f32,
}

impl ModelConfig {
    /// The published 124M-parameter GPT-2 shape.
    pub fn gpt2_small() -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            vocab_size: 50257,
            max_positions: 1024,
            layernorm_epsilon: 1e-5,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.vocab_size,
            self.max_positions,
        ];
        if dims.contains(&0) {
            return Err(Error::Format(format!("config has a zero dimension: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Format(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layernorm_epsilon > 0.0 && self.layernorm_epsilon.is_finite()) {
            return Err(Error::Format("layernorm_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Linear weights are stored `[in, out]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_qkv_weight: Vec<f32>,
    pub attn_qkv_bias: Vec<f32>,
    pub attn_out_weight: Vec<f32>,
    pub attn_out_bias: Vec<f32>,
    pub mlp_in_weight: Vec<f32>,
    pub mlp_in_bias: Vec<f32>,
    pub mlp_out_weight: Vec<f32>,
    pub mlp_out_bias: Vec<f32>,
    pub ln1_gamma: Vec<f32>,
    pub ln1_beta: Vec<f32>,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
}

const LAYER_TENSORS: [&str; 12] = [
    "attn_qkv_weight",
    "attn_qkv_bias",
    "attn_out_weight",
    "attn_out_bias",
    "mlp_in_weight",
    "mlp_in_bias",
    "mlp_out_weight",
    "mlp_out_bias",
    "ln1_gamma",
    "ln1_beta",
    "ln2_gamma",
    "ln2_beta",
];

fn layer_shape(config: &ModelConfig, name: &str) -> Vec<usize> {
    let d = config.d_model;
    let m = config.d_mlp();
    match name {
        "attn_qkv_weight" => vec![d, 3 * d],
        "attn_qkv_bias" => vec![3 * d],
        "attn_out_weight" => vec![d, d],
        "mlp_in_weight" => vec![d, m],
        "mlp_in_bias" => vec![m],
        "mlp_out_weight" => vec![m, d],
        _ => vec![d],
    }
}

impl LayerWeights {
    fn get(&self, name: &str) -> &Vec<f32> {
        match name {
            "attn_qkv_weight" => &self.attn_qkv_weight,
            "attn_qkv_bias" => &self.attn_qkv_bias,
            "attn_out_weight" => &self.attn_out_weight,
            "attn_out_bias" => &self.attn_out_bias,
            "mlp_in_weight" => &self.mlp_in_weight,
            "mlp_in_bias" => &self.mlp_in_bias,
            "mlp_out_weight" => &self.mlp_out_weight,
            "mlp_out_bias" => &self.mlp_out_bias,
            "ln1_gamma" => &self.ln1_gamma,
            "ln1_beta" => &self.ln1_beta,
            "ln2_gamma" => &self.ln2_gamma,
            "ln2_beta" => &self.ln2_beta,
            _ => unreachable!("unknown layer tensor {name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub token_embedding: Vec<f32>,
    pub position_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub lnf_gamma: Vec<f32>,
    pub lnf_beta: Vec<f32>,
    pub(crate) hash: HashCache,
}

/// Lazily computed content hash; ignored by equality.
#[derive(Debug, Clone, Default)]
pub(crate) struct HashCache(OnceLock<String>);

impl PartialEq for HashCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

fn take(c: &mut Container, name: &str, expected: Vec<usize>) -> Result<Vec<f32>> {
    let t = c.take_tensor(name)?;
    if t.shape != expected {
        return Err(Error::Shape {
            name: name.to_owned(),
            expected,
            actual: t.shape,
        });
    }
    Ok(t.data)
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path, WEIGHTS_MAGIC)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(c.field("config")?.clone())
            .map_err(|e| Error::Format(format!("config object: {e}")))?;
        config.validate()?;
        let d = config.d_model;
        let token_embedding = take(&mut c, "token_embedding", vec![config.vocab_size, d])?;
        let position_embedding = take(&mut c, "position_embedding", vec![config.max_positions, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut get = |name: &str| take(&mut c, &format!("layers.{l}.{name}"), layer_shape(&config, name));
            layers.push(LayerWeights {
                attn_qkv_weight: get("attn_qkv_weight")?,
                attn_qkv_bias: get("attn_qkv_bias")?,
                attn_out_weight: get("attn_out_weight")?,
                attn_out_bias: get("attn_out_bias")?,
                mlp_in_weight: get("mlp_in_weight")?,
                mlp_in_bias: get("mlp_in_bias")?,
                mlp_out_weight: get("mlp_out_weight")?,
                mlp_out_bias: get("mlp_out_bias")?,
                ln1_gamma: get("ln1_gamma")?,
                ln1_beta: get("ln1_beta")?,
                ln2_gamma: get("ln2_gamma")?,
                ln2_beta: get("ln2_beta")?,
            });
        }
        let lnf_gamma = take(&mut c, "lnf_gamma", vec![d])?;
        let lnf_beta = take(&mut c, "lnf_beta", vec![d])?;
        Ok(Checkpoint {
            config,
            token_embedding,
            position_embedding,
            layers,
            lnf_gamma,
            lnf_beta,
            hash: HashCache::default(),
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let cfg = &self.config;
        let mut c = Container::new(WEIGHTS_MAGIC);
        c.insert_field(
            "config",
            serde_json::to_value(cfg).expect("config serializes"),
        );
        let d = cfg.d_model;
        c.insert_tensor(
            "token_embedding",
            Tensor::new(vec![cfg.vocab_size, d], self.token_embedding.clone())?,
        );
        c.insert_tensor(
            "position_embedding",
            Tensor::new(vec![cfg.max_positions, d], self.position_embedding.clone())?,
        );
        for (l, layer) in self.layers.iter().enumerate() {
            for name in LAYER_TENSORS {
                c.insert_tensor(
                    format!("layers.{l}.{name}"),
                    Tensor::new(layer_shape(cfg, name), layer.get(name).clone())?,
                );
            }
        }
        c.insert_tensor("lnf_gamma", Tensor::new(vec![d], self.lnf_gamma.clone())?);
        c.insert_tensor("lnf_beta", Tensor::new(vec![d], self.lnf_beta.clone())?);
        Ok(c)
    }

    /// SHA-256 of the serialized container, hex encoded. Computed once.
    pub fn content_hash(&self) -> Result<String> {
        if let Some(h) = self.hash.0.get() {
            return Ok(h.clone());
        }
        let h = hex::encode(Sha256::digest(self.to_container()?.to_bytes()?));
        Ok(self.hash.0.get_or_init(|| h).clone())
    }

    pub fn forward(
        &self,
        token_ids: &[u32],
        positions: &[usize],
        mask: &AttentionMask,
    ) -> Result<HiddenStates> {
        self.run(token_ids, positions, mask, None)
    }

    /// Forward pass that also returns the attention probabilities of every
    /// layer and head.
    pub fn forward_traced(
        &self,
        token_ids: &[u32],
        positions: &[usize],
        mask: &AttentionMask,
    ) -> Result<(HiddenStates, Vec<Vec<AttentionProbs>>)> {
        let mut trace = Vec::with_capacity(self.config.n_layers);
        let h = self.run(token_ids, positions, mask, Some(&mut trace))?;
        Ok((h, trace))
    }

    fn check_inputs(&self, token_ids: &[u32], positions: &[usize], mask: &AttentionMask) -> Result<()> {
        let n = token_ids.len();
        if n == 0 {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if positions.len() != n || mask.len() != n {
            return Err(Error::Argument(format!(
                "length mismatch: {n} tokens, {} positions, {} mask entries",
                positions.len(),
                mask.len()
            )));
        }
        if let Some(&id) = token_ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Range(format!(
                "token id {id} >= vocab size {}",
                self.config.vocab_size
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_positions) {
            return Err(Error::Range(format!(
                "position {p} >= max positions {}",
                self.config.max_positions
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("positions must be strictly increasing".into()));
        }
        Ok(())
    }

    fn run(
        &self,
        token_ids: &[u32],
        positions: &[usize],
        mask: &AttentionMask,
        mut trace: Option<&mut Vec<Vec<AttentionProbs>>>,
    ) -> Result<HiddenStates> {
        self.check_inputs(token_ids, positions, mask)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let n = token_ids.len();

        let mut x = vec![0.0f32; n * d];
        for (i, (&id, &pos)) in token_ids.iter().zip(positions).enumerate() {
            let te = &self.token_embedding[id as usize * d..][..d];
            let pe = &self.position_embedding[pos * d..][..d];
            for ((o, a), b) in x[i * d..][..d].iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers + 1);
        layers.push(x.clone());
        for (l, w) in self.layers.iter().enumerate() {
            let h = layer_norm(&x, d, &w.ln1_gamma, &w.ln1_beta, cfg.layernorm_epsilon);
            let qkv = linear(&h, d, &w.attn_qkv_weight, &w.attn_qkv_bias);
            let (ctx, probs) = attend(&qkv, n, d, cfg.n_heads, mask, trace.is_some());
            if let Some(t) = trace.as_deref_mut() {
                t.push(probs);
            }
            let attn = linear(&ctx, d, &w.attn_out_weight, &w.attn_out_bias);
            add_assign(&mut x, &attn);

            let h = layer_norm(&x, d, &w.ln2_gamma, &w.ln2_beta, cfg.layernorm_epsilon);
            let mut hidden = linear(&h, d, &w.mlp_in_weight, &w.mlp_in_bias);
            hidden.iter_mut().for_each(|v| *v = gelu(*v));
            let mlp = linear(&hidden, cfg.d_mlp(), &w.mlp_out_weight, &w.mlp_out_bias);
            add_assign(&mut x, &mlp);

            if l + 1 < cfg.n_layers {
                layers.push(x.clone());
            }
        }
        layers.push(layer_norm(&x, d, &self.lnf_gamma, &self.lnf_beta, cfg.layernorm_epsilon));

        if let Some(bad) = layers.iter().position(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite hidden state at layer {bad}")));
        }
        Ok(HiddenStates {
            seq_len: n,
            d_model: d,
            layers,
        })
    }
}

/// Binary attention mask: `true` where the token may be attended to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask(Vec<bool>);

impl AttentionMask {
    /// Build from a 0/1 vector; at least one entry must be 1.
    pub fn from_binary(allowed: &[u8]) -> Result<Self> {
        if let Some(v) = allowed.iter().find(|&&v| v > 1) {
            return Err(Error::Argument(format!("mask entry {v} is not 0 or 1")));
        }
        Self::from_bools(allowed.iter().map(|&v| v == 1).collect())
    }

    pub fn from_bools(allowed: Vec<bool>) -> Result<Self> {
        if !allowed.contains(&true) {
            return Err(Error::Argument("attention mask allows no token".into()));
        }
        Ok(AttentionMask(allowed))
    }

    pub fn all_ones(len: usize) -> Self {
        AttentionMask(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn allows(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn to_binary(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b)).collect()
    }
}

/// Row-major `[seq_len × seq_len]` attention probabilities of one head;
/// entries above the diagonal are zero.
pub type AttentionProbs = Vec<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub seq_len: usize,
    pub d_model: usize,
    /// `n_layers + 1` matrices: index 0 is the embedding sum, the last one
    /// has the final layer norm applied.
    pub layers: Vec<Vec<f32>>,
}

impl HiddenStates {
    pub fn n_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn extract_layer(&self, layer: usize, token_index: usize) -> Result<Vec<f32>> {
        self.row(layer, token_index).map(<[f32]>::to_vec)
    }

    pub fn row(&self, layer: usize, token_index: usize) -> Result<&[f32]> {
        let m = self.layers.get(layer).ok_or_else(|| {
            Error::Range(format!("layer {layer} outside 0..={}", self.n_layers()))
        })?;
        if token_index >= self.seq_len {
            return Err(Error::Range(format!(
                "token index {token_index} outside sequence of length {}",
                self.seq_len
            )));
        }
        Ok(&m[token_index * self.d_model..][..self.d_model])
    }
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

/// `x [rows × in] · w [in × out] + b`.
fn linear(x: &[f32], d_in: usize, w: &[f32], b: &[f32]) -> Vec<f32> {
    let d_out = b.len();
    let rows = x.len() / d_in;
    let mut out = Vec::with_capacity(rows * d_out);
    for row in x.chunks_exact(d_in) {
        let mut acc = b.to_vec();
        for (k, &xk) in row.iter().enumerate() {
            let wk = &w[k * d_out..][..d_out];
            acc.iter_mut().zip(wk).for_each(|(a, &wv)| *a += xk * wv);
        }
        out.extend_from_slice(&acc);
    }
    out
}

/// Tanh approximation used by GPT-2.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn kahan_sum(values: impl Iterator<Item = f32>) -> f32 {
    let mut sum = 0.0f32;
    let mut comp = 0.0f32;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Zero-mean, unit-variance normalisation of one row, before the affine step.
/// Statistics and centering run in `f64`: rows with a large common offset
/// would otherwise lose the mean to `f32` rounding.
pub fn normalize_row(row: &[f32], eps: f32) -> Vec<f32> {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + f64::from(eps)).sqrt();
    row.iter().map(|&v| ((f64::from(v) - mean) * inv) as f32).collect()
}

fn layer_norm(x: &[f32], d: usize, gamma: &[f32], beta: &[f32], eps: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let normed = normalize_row(row, eps);
        out.extend(normed.iter().zip(gamma).zip(beta).map(|((v, g), b)| v * g + b));
    }
    out
}

/// Masked causal softmax attention over a fused `[n × 3d]` q|k|v buffer.
fn attend(
    qkv: &[f32],
    n: usize,
    d: usize,
    n_heads: usize,
    mask: &AttentionMask,
    keep_probs: bool,
) -> (Vec<f32>, Vec<AttentionProbs>) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut ctx = vec![0.0f32; n * d];
    let mut all_probs = Vec::new();
    let mut scores = vec![0.0f32; n];
    for head in 0..n_heads {
        let mut probs_matrix = if keep_probs { vec![0.0f32; n * n] } else { Vec::new() };
        for i in 0..n {
            let q = &qkv[i * 3 * d + head * dh..][..dh];
            let row = &mut scores[..=i];
            for (j, s) in row.iter_mut().enumerate() {
                let k = &qkv[j * 3 * d + d + head * dh..][..dh];
                let dot: f32 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                *s = dot * scale + if mask.allows(j) { 0.0 } else { MASK_FILL };
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            row.iter_mut().for_each(|s| *s = (*s - max).exp());
            let total = kahan_sum(row.iter().copied());
            row.iter_mut().for_each(|s| *s /= total);

            let out = &mut ctx[i * d + head * dh..][..dh];
            for (j, &p) in row.iter().enumerate() {
                let v = &qkv[j * 3 * d + 2 * d + head * dh..][..dh];
                out.iter_mut().zip(v).for_each(|(o, &vv)| *o += p * vv);
            }
            if keep_probs {
                probs_matrix[i * n..][..=i].copy_from_slice(row);
            }
        }
        if keep_probs {
            all_probs.push(probs_matrix);
        }
    }
    (ctx, all_probs)
}
