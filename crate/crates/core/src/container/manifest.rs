use serde::{Deserialize, Serialize};

use crate::error::{LuqError, Result};

/// Architecture hyper-parameters of a layer stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    /// Add sinusoidal position encodings to the input embeddings.
    pub positions: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LuqError::Manifest(m.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1");
        }
        if self.hidden_dim == 0 || self.ff_dim == 0 || self.vocab_size == 0 {
            return bad("hidden_dim, ff_dim and vocab_size must be >= 1");
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad("heads must divide hidden_dim");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// `[out, in]` shape of each of the six per-layer linears, in storage order.
    pub fn linear_shapes(&self) -> [(&'static str, [usize; 2]); 6] {
        let (d, f) = (self.hidden_dim, self.ff_dim);
        [
            ("attn.q", [d, d]),
            ("attn.k", [d, d]),
            ("attn.v", [d, d]),
            ("attn.o", [d, d]),
            ("mlp.up", [f, d]),
            ("mlp.down", [d, f]),
        ]
    }

    pub fn params_per_layer(&self) -> usize {
        self.linear_shapes().iter().map(|(_, s)| s[0] * s[1]).sum()
    }

    /// Parameters outside the quantized backbone (embedding + output head).
    pub fn non_backbone_params(&self) -> usize {
        2 * self.vocab_size * self.hidden_dim
    }
}

/// Storage format of a layer's linears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantTag {
    Fp32,
    Rtn4,
    Gptq4,
    Bin,
}

/// Grid / block parameters needed to decode a quantized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub group_size: usize,
    pub block_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub tag: QuantTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qparams: Option<QuantParams>,
    /// Base tensor names of q, k, v, o, up, down.
    pub linears: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    #[serde(flatten)]
    pub config: ModelConfig,
    pub embed: String,
    pub head: String,
    pub layers: Vec<LayerEntry>,
}

impl ModelManifest {
    /// Manifest for a full-precision stack with canonical tensor names.
    pub fn dense(config: ModelConfig) -> Self {
        let layers = (0..config.num_layers)
            .map(|i| LayerEntry {
                tag: QuantTag::Fp32,
                qparams: None,
                linears: config
                    .linear_shapes()
                    .iter()
                    .map(|(n, _)| format!("layers.{i}.{n}"))
                    .collect(),
            })
            .collect();
        Self { config, embed: "embed".into(), head: "head".into(), layers }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.num_layers {
            return Err(LuqError::Manifest(format!(
                "{} layer entries for num_layers = {}",
                self.layers.len(),
                self.config.num_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.linears.len() != 6 {
                return Err(LuqError::Manifest(format!("layer {i} lists {} linears", l.linears.len())));
            }
            if l.tag != QuantTag::Fp32 && l.qparams.is_none() {
                return Err(LuqError::Manifest(format!("layer {i} is quantized but has no qparams")));
            }
        }
        Ok(())
    }
}

/// Header of a `kind = "calib"` container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibHeader {
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Per-sequence modality in set order; indexes into the text / mm tensors.
    pub modality: Vec<crate::calib::Modality>,
}
