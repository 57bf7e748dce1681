//! Desk-scale MoE decoder.
//!
//! Weights use the `x · W` convention: every linear is stored `d_in × d_out`
//! and applied to row-vector activations. A layer is pre-norm causal
//! multi-head attention followed by a pre-norm routed-expert FFN, both added
//! to the residual stream.

mod container;
mod forward;
mod synth;

use std::collections::BTreeMap;
use std::fmt;

pub use container::{
    inspect, load_model, model_from_bytes, model_to_bytes, save_model, DType, Manifest, TensorInfo,
};
pub use forward::{
    forward, layer_forward, rmsnorm, rmsnorm_rows, silu, softmax, top_k_indices, ActQuant,
    ActivationTrace, LayerTrace, RMS_EPS,
};
pub use forward::route;
pub(crate) use forward::expert_hidden;
pub use synth::{
    calibration_splits, calibration_splits_with, generate_calibration, generate_calibration_with,
    generate_synthetic_model,
    CalibRecipe,
};

use crate::accf::Codebook;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quant::RtnWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub n_layers: usize,
    pub n_calib: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_ff: 128,
            n_experts: 4,
            top_k: 2,
            n_layers: 2,
            n_calib: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("n_calib", self.n_calib),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k {} exceeds expert count {}",
                self.top_k, self.n_experts
            )));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }

    /// `(key, value)` pairs under the `model.` prefix, for config files and
    /// the container header.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("model.d_ff".into(), self.d_ff.to_string()),
            ("model.d_head".into(), self.d_head.to_string()),
            ("model.d_model".into(), self.d_model.to_string()),
            ("model.n_calib".into(), self.n_calib.to_string()),
            ("model.n_experts".into(), self.n_experts.to_string()),
            ("model.n_heads".into(), self.n_heads.to_string()),
            ("model.n_layers".into(), self.n_layers.to_string()),
            ("model.seed".into(), self.seed.to_string()),
            ("model.top_k".into(), self.top_k.to_string()),
        ]
    }

    /// Applies one `model.*` key; returns `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: `{v}` is not a count")))
        };
        match key {
            "model.d_model" => self.d_model = parse(value)?,
            "model.n_heads" => self.n_heads = parse(value)?,
            "model.d_head" => self.d_head = parse(value)?,
            "model.d_ff" => self.d_ff = parse(value)?,
            "model.n_experts" => self.n_experts = parse(value)?,
            "model.top_k" => self.top_k = parse(value)?,
            "model.n_layers" => self.n_layers = parse(value)?,
            "model.n_calib" => self.n_calib = parse(value)?,
            "model.seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: `{value}` is not a seed")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Linear sites of a decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Q,
    K,
    V,
    Out,
    Router,
    Gate,
    Up,
    Down,
}

impl Site {
    pub const ALL: [Site; 8] = [
        Site::Q,
        Site::K,
        Site::V,
        Site::Out,
        Site::Router,
        Site::Gate,
        Site::Up,
        Site::Down,
    ];
    pub const ATTENTION: [Site; 4] = [Site::Q, Site::K, Site::V, Site::Out];
    pub const EXPERT: [Site; 3] = [Site::Gate, Site::Up, Site::Down];

    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "wq",
            Site::K => "wk",
            Site::V => "wv",
            Site::Out => "wo",
            Site::Router => "router",
            Site::Gate => "gate",
            Site::Up => "up",
            Site::Down => "down",
        }
    }

    pub fn is_expert(self) -> bool {
        matches!(self, Site::Gate | Site::Up | Site::Down)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifies one weight matrix in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteId {
    pub layer: usize,
    pub expert: Option<usize>,
    pub site: Site,
}

impl SiteId {
    pub fn attn(layer: usize, site: Site) -> Self {
        Self {
            layer,
            expert: None,
            site,
        }
    }

    pub fn expert(layer: usize, expert: usize, site: Site) -> Self {
        Self {
            layer,
            expert: Some(expert),
            site,
        }
    }

    /// Tensor base name, `layer{L}.{site}` or `layer{L}.expert{e}.{site}`.
    pub fn tensor_name(&self) -> String {
        match self.expert {
            Some(e) => format!("layer{}.expert{}.{}", self.layer, e, self.site),
            None => format!("layer{}.{}", self.layer, self.site),
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tensor_name())
    }
}

/// How a linear's weights are stored for deployment.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightRepr {
    Dense,
    Clustered(Codebook),
    Rtn(RtnWeights),
}

/// A linear layer. `weight` is always the dense matrix the forward pass
/// uses; for compressed representations it is the reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub repr: WeightRepr,
}

impl Linear {
    pub fn dense(weight: Matrix) -> Self {
        Self {
            weight,
            repr: WeightRepr::Dense,
        }
    }

    pub fn clustered(codebook: Codebook) -> Self {
        Self {
            weight: codebook.reconstruct(),
            repr: WeightRepr::Clustered(codebook),
        }
    }

    pub fn rtn(q: RtnWeights) -> Self {
        Self {
            weight: q.reconstruct(),
            repr: WeightRepr::Rtn(q),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.repr, WeightRepr::Dense)
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        match &self.repr {
            WeightRepr::Clustered(cb) => Some(cb),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl ExpertWeights {
    pub fn get(&self, site: Site) -> &Linear {
        match site {
            Site::Gate => &self.gate,
            Site::Up => &self.up,
            Site::Down => &self.down,
            other => panic!("{other} is not an expert site"),
        }
    }

    pub fn get_mut(&mut self, site: Site) -> &mut Linear {
        match site {
            Site::Gate => &mut self.gate,
            Site::Up => &mut self.up,
            Site::Down => &mut self.down,
            other => panic!("{other} is not an expert site"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerWeights {
    /// Gain of the norm feeding attention.
    pub attn_norm: Vec<f64>,
    /// Gain of the norm feeding the router and experts.
    pub moe_norm: Vec<f64>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub router: Linear,
    pub experts: Vec<ExpertWeights>,
}

impl DecoderLayerWeights {
    pub fn attn(&self, site: Site) -> &Linear {
        match site {
            Site::Q => &self.wq,
            Site::K => &self.wk,
            Site::V => &self.wv,
            Site::Out => &self.wo,
            Site::Router => &self.router,
            other => panic!("{other} is an expert site"),
        }
    }

    pub fn attn_mut(&mut self, site: Site) -> &mut Linear {
        match site {
            Site::Q => &mut self.wq,
            Site::K => &mut self.wk,
            Site::V => &mut self.wv,
            Site::Out => &mut self.wo,
            Site::Router => &mut self.router,
            other => panic!("{other} is an expert site"),
        }
    }
}

/// Metadata key recording that a pipeline stage has been folded in.
pub const STAGE_NORM_FOLD: &str = "stage.norm_fold";
pub const STAGE_AOS: &str = "stage.aos";
pub const STAGE_POG: &str = "stage.pog";
pub const STAGE_ACCF: &str = "stage.accf";
pub const STAGE_RTN: &str = "stage.rtn";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub layers: Vec<DecoderLayerWeights>,
    pub metadata: BTreeMap<String, String>,
    /// Residual-stream rotation folded into the weights, if any. Inputs must
    /// be right-multiplied by it before the forward pass.
    pub input_rotation: Option<Matrix>,
}

impl ModelWeights {
    pub fn get(&self, id: SiteId) -> &Linear {
        let layer = &self.layers[id.layer];
        match id.expert {
            Some(e) => layer.experts[e].get(id.site),
            None => layer.attn(id.site),
        }
    }

    pub fn get_mut(&mut self, id: SiteId) -> &mut Linear {
        let layer = &mut self.layers[id.layer];
        match id.expert {
            Some(e) => layer.experts[e].get_mut(id.site),
            None => layer.attn_mut(id.site),
        }
    }

    /// Every linear site, in layer order; attention sites (incl. router) before experts.
    pub fn site_ids(&self) -> Vec<SiteId> {
        let mut ids = Vec::new();
        for l in 0..self.layers.len() {
            for s in [Site::Q, Site::K, Site::V, Site::Out, Site::Router] {
                ids.push(SiteId::attn(l, s));
            }
            for e in 0..self.layers[l].experts.len() {
                for s in Site::EXPERT {
                    ids.push(SiteId::expert(l, e, s));
                }
            }
        }
        ids
    }

    pub fn has_stage(&self, key: &str) -> bool {
        self.metadata.contains_key(key)
    }

    /// Records `key` as applied; errors if it already was.
    pub fn mark_stage(&mut self, key: &'static str, value: impl Into<String>) -> Result<()> {
        if self.has_stage(key) {
            return Err(Error::StageApplied(key));
        }
        self.metadata.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn require_unapplied(&self, key: &'static str) -> Result<()> {
        if self.has_stage(key) {
            return Err(Error::StageApplied(key));
        }
        Ok(())
    }

    /// Errors unless every linear is still dense; folds are only defined on
    /// full-precision weights.
    pub fn require_dense(&self, what: &str) -> Result<()> {
        for id in self.site_ids() {
            if !self.get(id).is_dense() {
                return Err(Error::Precondition(format!(
                    "{what} needs dense weights but {id} is compressed"
                )));
            }
        }
        Ok(())
    }

    /// Checks every tensor shape against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.n_layers {
            return Err(Error::shape(
                "ModelWeights",
                format!("{} layers, config says {}", self.layers.len(), c.n_layers),
            ));
        }
        let check = |id: SiteId, lin: &Linear, want: (usize, usize)| -> Result<()> {
            if lin.weight.shape() != want {
                return Err(Error::shape(
                    "ModelWeights",
                    format!("{id} is {:?}, expected {want:?}", lin.weight.shape()),
                ));
            }
            if !lin.weight.is_finite() {
                return Err(Error::NonFinite(id.to_string()));
            }
            Ok(())
        };
        let d = c.d_model;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.attn_norm.len() != d || layer.moe_norm.len() != d {
                return Err(Error::shape("ModelWeights", format!("layer{l} norm gains")));
            }
            for s in Site::ATTENTION {
                check(SiteId::attn(l, s), layer.attn(s), (d, d))?;
            }
            check(SiteId::attn(l, Site::Router), &layer.router, (d, c.n_experts))?;
            if layer.experts.len() != c.n_experts {
                return Err(Error::shape(
                    "ModelWeights",
                    format!("layer{l} has {} experts", layer.experts.len()),
                ));
            }
            for (e, ex) in layer.experts.iter().enumerate() {
                check(SiteId::expert(l, e, Site::Gate), &ex.gate, (d, c.d_ff))?;
                check(SiteId::expert(l, e, Site::Up), &ex.up, (d, c.d_ff))?;
                check(SiteId::expert(l, e, Site::Down), &ex.down, (c.d_ff, d))?;
            }
        }
        if let Some(r) = &self.input_rotation {
            if r.shape() != (d, d) {
                return Err(Error::shape("ModelWeights", "input_rotation"));
            }
        }
        Ok(())
    }
}
