//! Decoder-only language model descriptions, footprints, and seeded
//! synthetic FP16 parameters.

use std::collections::BTreeMap;
use std::fmt;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::FP16_BYTES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncoding {
    Learned,
    Rotary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub pos_encoding: PosEncoding,
    pub norm_kind: NormKind,
    pub activation: Activation,
    /// LM head reuses the token embedding matrix.
    #[serde(default = "yes")]
    pub tie_embeddings: bool,
    /// Projections and FFN layers carry bias vectors.
    #[serde(default = "yes")]
    pub biases: bool,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "{}: d_model {} not divisible by num_heads {}",
                self.name, self.d_model, self.num_heads
            )));
        }
        if self.d_model == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::InvalidConfig(format!("{}: zero-sized dimension", self.name)));
        }
        if self.pos_encoding == PosEncoding::Rotary && !self.head_dim().is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "{}: rotary embedding needs an even head_dim",
                self.name
            )));
        }
        Ok(())
    }

    /// Width of one normalization parameter vector (gamma, plus beta for layernorm).
    pub fn norm_width(&self) -> usize {
        match self.norm_kind {
            NormKind::LayerNorm => 2 * self.d_model,
            NormKind::RmsNorm => self.d_model,
        }
    }
}

/// What a parameter tensor is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Embed,
    Pos,
    Norm1,
    Q,
    QBias,
    K,
    KBias,
    V,
    VBias,
    O,
    OBias,
    Norm2,
    Fc1,
    Fc1Bias,
    Fc2,
    Fc2Bias,
    FinalNorm,
    LmHead,
}

impl Role {
    pub const ALL: [Role; 18] = [
        Role::Embed,
        Role::Pos,
        Role::Norm1,
        Role::Q,
        Role::QBias,
        Role::K,
        Role::KBias,
        Role::V,
        Role::VBias,
        Role::O,
        Role::OBias,
        Role::Norm2,
        Role::Fc1,
        Role::Fc1Bias,
        Role::Fc2,
        Role::Fc2Bias,
        Role::FinalNorm,
        Role::LmHead,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Role> {
        Role::ALL.get(i as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Embed => "embed",
            Role::Pos => "pos",
            Role::Norm1 => "norm1",
            Role::Q => "q",
            Role::QBias => "q_bias",
            Role::K => "k",
            Role::KBias => "k_bias",
            Role::V => "v",
            Role::VBias => "v_bias",
            Role::O => "o",
            Role::OBias => "o_bias",
            Role::Norm2 => "norm2",
            Role::Fc1 => "fc1",
            Role::Fc1Bias => "fc1_bias",
            Role::Fc2 => "fc2",
            Role::Fc2Bias => "fc2_bias",
            Role::FinalNorm => "final_norm",
            Role::LmHead => "lmhead",
        }
    }

    /// Weight matrices streamed through the SXE as `in x out` tiles.
    pub fn is_matrix(self) -> bool {
        matches!(
            self,
            Role::Q | Role::K | Role::V | Role::O | Role::Fc1 | Role::Fc2 | Role::LmHead
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TensorId {
    pub layer: Option<u32>,
    pub role: Role,
}

impl TensorId {
    pub fn global(role: Role) -> Self {
        Self { layer: None, role }
    }

    pub fn layer(layer: usize, role: Role) -> Self {
        Self {
            layer: Some(layer as u32),
            role,
        }
    }
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "l{l}.{}", self.role.name()),
            None => f.write_str(self.role.name()),
        }
    }
}

/// Logical shape of a tensor: `rows x cols`. Matrices are stored `in x out`
/// so a vector-matrix product reads `y = x . W`; vectors are `1 x n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// Every parameter tensor of the model with its shape, in a fixed order.
pub fn tensor_shapes(config: &ModelConfig) -> Vec<(TensorId, Shape)> {
    let d = config.d_model;
    let f = config.ffn_dim;
    let mut out = vec![(TensorId::global(Role::Embed), Shape::new(config.vocab_size, d))];
    if config.pos_encoding == PosEncoding::Learned {
        out.push((TensorId::global(Role::Pos), Shape::new(config.max_seq, d)));
    }
    for l in 0..config.num_layers {
        let t = |role| TensorId::layer(l, role);
        out.push((t(Role::Norm1), Shape::new(1, config.norm_width())));
        for (w, b) in [(Role::Q, Role::QBias), (Role::K, Role::KBias), (Role::V, Role::VBias)] {
            out.push((t(w), Shape::new(d, d)));
            if config.biases {
                out.push((t(b), Shape::new(1, d)));
            }
        }
        out.push((t(Role::O), Shape::new(d, d)));
        if config.biases {
            out.push((t(Role::OBias), Shape::new(1, d)));
        }
        out.push((t(Role::Norm2), Shape::new(1, config.norm_width())));
        out.push((t(Role::Fc1), Shape::new(d, f)));
        if config.biases {
            out.push((t(Role::Fc1Bias), Shape::new(1, f)));
        }
        out.push((t(Role::Fc2), Shape::new(f, d)));
        if config.biases {
            out.push((t(Role::Fc2Bias), Shape::new(1, d)));
        }
    }
    out.push((TensorId::global(Role::FinalNorm), Shape::new(1, config.norm_width())));
    if !config.tie_embeddings {
        out.push((TensorId::global(Role::LmHead), Shape::new(d, config.vocab_size)));
    }
    out
}

pub fn param_count(config: &ModelConfig) -> u64 {
    tensor_shapes(config).iter().map(|(_, s)| s.numel() as u64).sum()
}

/// FP16 footprint of the parameters.
pub fn model_bytes(config: &ModelConfig) -> u64 {
    param_count(config) * FP16_BYTES
}

/// FP16 footprint of the Key and Value caches at `seq_len` tokens.
pub fn kv_bytes(config: &ModelConfig, seq_len: usize) -> u64 {
    config.num_layers as u64 * 2 * seq_len as u64 * config.d_model as u64 * FP16_BYTES
}

/// Shape and location of the KV cache for a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvCacheSpec {
    pub num_layers: usize,
    pub max_seq: usize,
    pub d_model: usize,
}

impl KvCacheSpec {
    pub fn for_model(config: &ModelConfig) -> Self {
        Self {
            num_layers: config.num_layers,
            max_seq: config.max_seq,
            d_model: config.d_model,
        }
    }

    pub fn bytes(&self) -> u64 {
        self.num_layers as u64 * 2 * self.max_seq as u64 * self.d_model as u64 * FP16_BYTES
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub id: TensorId,
    pub shape: Shape,
    /// Row-major FP16 payload.
    pub data: Vec<f16>,
}

impl Tensor {
    pub fn at(&self, row: usize, col: usize) -> f16 {
        self.data[row * self.shape.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f16] {
        &self.data[row * self.shape.cols..(row + 1) * self.shape.cols]
    }
}

/// All parameters of one model, keyed by tensor id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub config: ModelConfig,
    tensors: BTreeMap<TensorId, Tensor>,
}

impl ParamStore {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.tensors.get(&id)
    }

    pub fn tensor(&self, id: TensorId) -> Result<&Tensor> {
        self.get(id).ok_or_else(|| Error::UnmappedTensor(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }

    /// Element `(row, col)` of the `d x vocab` LM head, whether tied or not.
    pub fn lm_head_at(&self, row: usize, col: usize) -> f16 {
        if self.config.tie_embeddings {
            self.tensors[&TensorId::global(Role::Embed)].at(col, row)
        } else {
            self.tensors[&TensorId::global(Role::LmHead)].at(row, col)
        }
    }

    pub fn total_elements(&self) -> u64 {
        self.tensors.values().map(|t| t.data.len() as u64).sum()
    }
}

/// Largest magnitude produced by [`synth_params`].
pub const SYNTH_MAX_ABS: f32 = 0.25;

/// Deterministic synthetic FP16 parameters. Norm gains are drawn positive so
/// normalized activations keep a usable range; everything stays within
/// `+-SYNTH_MAX_ABS`.
pub fn synth_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (id, shape) in tensor_shapes(config) {
        let n = shape.numel();
        let data: Vec<f16> = match id.role {
            Role::Norm1 | Role::Norm2 | Role::FinalNorm => {
                let d = config.d_model;
                (0..n)
                    .map(|i| {
                        if i < d {
                            f16::from_f32(rng.gen_range(0.15f32..=SYNTH_MAX_ABS))
                        } else {
                            f16::from_f32(rng.gen_range(-0.05f32..=0.05))
                        }
                    })
                    .collect()
            }
            _ => (0..n)
                .map(|_| f16::from_f32(rng.gen_range(-SYNTH_MAX_ABS..=SYNTH_MAX_ABS)))
                .collect(),
        };
        tensors.insert(id, Tensor { id, shape, data });
    }
    Ok(ParamStore {
        config: config.clone(),
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn zero_layer_model_is_embeddings_only() {
        let mut c = presets::model("tiny-2l").unwrap();
        c.num_layers = 0;
        let d = c.d_model as u64;
        let expect = c.vocab_size as u64 * d + c.max_seq as u64 * d + 2 * d;
        assert_eq!(param_count(&c), expect);
        c.tie_embeddings = false;
        assert_eq!(param_count(&c), expect + d * c.vocab_size as u64);
    }

    #[test]
    fn kv_bytes_zero_and_linear() {
        let c = presets::model("opt-1.3b").unwrap();
        assert_eq!(kv_bytes(&c, 0), 0);
        assert_eq!(kv_bytes(&c, 200), 2 * kv_bytes(&c, 100));
        assert_eq!(KvCacheSpec::for_model(&c).bytes(), kv_bytes(&c, c.max_seq));
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let c = presets::model("tiny-2l").unwrap();
        let a = synth_params(&c, 7).unwrap();
        let b = synth_params(&c, 7).unwrap();
        let other = synth_params(&c, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        for t in a.iter() {
            assert_eq!(t.data.len(), t.shape.numel());
            for x in &t.data {
                assert!(x.is_finite());
                assert!(x.to_f32().abs() <= SYNTH_MAX_ABS);
            }
        }
        assert_eq!(a.total_elements(), param_count(&c));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = presets::model("tiny-2l").unwrap();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }
}
