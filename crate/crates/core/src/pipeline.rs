//! End-to-end runs: generate a planted-outlier model, compress it in one of
//! four modes, and compare it against the full-precision model on held-out
//! tokens.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::accf::{calibrate_model, ACCFConfig, CalibrationReport, SiteReport};
use crate::aos::{
    fold_norm_gains, fold_rotation, optimize_rotation, rotation_calibration, AOSConfig, AOSResult, RotationInit,
};
use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, Matrix};
use crate::model::{
    calibration_splits_with, forward, generate_synthetic_model, ActQuant, ActivationTrace, CalibRecipe, Linear,
    ModelConfig, ModelWeights, STAGE_RTN,
};
use crate::pog::{fold_pog, plan_model_pog, LayerPlans, PermutationPlan, PogTarget};
use crate::quant::{quantize_weights_rtn, Granularity, QuantSpec};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    CodeQuant,
    Rtn,
    RandomRotRtn,
    KMeansOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::CodeQuant => "codequant",
            Mode::Rtn => "rtn",
            Mode::RandomRotRtn => "random-rot-rtn",
            Mode::KMeansOnly => "kmeans-only",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "codequant" => Mode::CodeQuant,
            "rtn" => Mode::Rtn,
            "random-rot-rtn" => Mode::RandomRotRtn,
            "kmeans-only" => Mode::KMeansOnly,
            _ => return Err(Error::Config(format!("unknown mode `{s}`"))),
        })
    }
}

/// Grouping of weight values along the input dimension, shared by the
/// codebooks and the RTN baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightGranularity {
    EmbeddingWise,
    BlockWise(usize),
}

impl WeightGranularity {
    pub fn group(self) -> Option<usize> {
        match self {
            WeightGranularity::EmbeddingWise => None,
            WeightGranularity::BlockWise(g) => Some(g),
        }
    }

    fn name(self) -> String {
        match self {
            WeightGranularity::EmbeddingWise => "embedding-wise".into(),
            WeightGranularity::BlockWise(g) => format!("block-wise({g})"),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        if s == "embedding-wise" {
            return Ok(WeightGranularity::EmbeddingWise);
        }
        s.strip_prefix("block-wise(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|g| g.trim().parse().ok())
            .filter(|&g: &usize| g > 0)
            .map(WeightGranularity::BlockWise)
            .ok_or_else(|| Error::Config(format!("granularity `{s}` is not embedding-wise or block-wise(g)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PogConfig {
    pub enabled: bool,
    /// Defaults to the block size.
    pub g: Option<usize>,
    /// Defaults to `g / 8`.
    pub g_s: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub mode: Mode,
    pub granularity: WeightGranularity,
    pub abits: u8,
    pub k: usize,
    /// RTN weight bits; defaults to `log2(k)`.
    pub rtn_bits: Option<u8>,
    pub outlier_channels: usize,
    pub outlier_scale: f64,
    pub calib: CalibRecipe,
    pub aos: AOSConfig,
    pub pog: PogConfig,
    pub accf: ACCFConfig,
    pub eval_seeds: Vec<u64>,
    pub eval_tokens: usize,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mode: Mode::CodeQuant,
            granularity: WeightGranularity::EmbeddingWise,
            abits: 4,
            k: 16,
            rtn_bits: None,
            outlier_channels: 4,
            outlier_scale: 5.0,
            calib: CalibRecipe::default(),
            aos: AOSConfig::default(),
            pog: PogConfig {
                enabled: false,
                g: None,
                g_s: None,
            },
            accf: ACCFConfig::default(),
            eval_seeds: vec![0, 1, 2, 3, 4],
            eval_tokens: 256,
            out: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: `{v}` is not a boolean"))),
    }
}

impl PipelineConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if self.model.set(key, v)? {
            return Ok(());
        }
        match key {
            "mode" => self.mode = Mode::parse(v)?,
            "granularity" => self.granularity = WeightGranularity::parse(v)?,
            "abits" => self.abits = parse_num(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "rtn.bits" => self.rtn_bits = Some(parse_num(key, v)?),
            "synth.outlier_channels" => self.outlier_channels = parse_num(key, v)?,
            "synth.outlier_scale" => self.outlier_scale = parse_num(key, v)?,
            "calib.outlier_channels" => self.calib.outlier_channels = parse_num(key, v)?,
            "calib.channel_offset" => self.calib.channel_offset = parse_num(key, v)?,
            "calib.massive_fraction" => self.calib.massive_fraction = parse_num(key, v)?,
            "calib.massive_scale" => self.calib.massive_scale = parse_num(key, v)?,
            "aos.iterations" => self.aos.iterations = parse_num(key, v)?,
            "aos.calib_tokens" => self.aos.calib_tokens = parse_num(key, v)?,
            "aos.bits" => self.aos.bits = parse_num(key, v)?,
            "aos.step" => self.aos.step = parse_num(key, v)?,
            "aos.momentum" => self.aos.momentum = parse_num(key, v)?,
            "aos.init" => {
                self.aos.init = match v {
                    "identity" => RotationInit::Identity,
                    "random-orthogonal" => RotationInit::RandomOrthogonal,
                    _ => return Err(Error::Config(format!("aos.init: unknown `{v}`"))),
                }
            }
            "pog.enabled" => self.pog.enabled = parse_bool(key, v)?,
            "pog.g" => self.pog.g = Some(parse_num(key, v)?),
            "pog.g_s" => self.pog.g_s = Some(parse_num(key, v)?),
            "accf.iterations" => self.accf.iterations = parse_num(key, v)?,
            "accf.calib_tokens" => self.accf.calib_tokens = parse_num(key, v)?,
            "accf.lambda" => self.accf.lambda = parse_num(key, v)?,
            "accf.step" => self.accf.step = parse_num(key, v)?,
            "accf.momentum" => self.accf.momentum = parse_num(key, v)?,
            "accf.reassign_every" => self.accf.reassign_every = parse_num(key, v)?,
            "accf.kmeans_iters" => self.accf.kmeans.max_iters = parse_num(key, v)?,
            "eval.seeds" => {
                self.eval_seeds = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "eval.tokens" => self.eval_tokens = parse_num(key, v)?,
            "paths.out" => self.out = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn rtn_bits(&self) -> u8 {
        self.rtn_bits
            .unwrap_or_else(|| (usize::BITS - 1 - self.k.leading_zeros()) as u8)
    }

    /// POG group and subgroup sizes after defaults.
    pub fn pog_sizes(&self) -> Option<(usize, usize)> {
        let g = self.pog.g.or(self.granularity.group())?;
        Some((g, self.pog.g_s.unwrap_or((g / 8).max(1))))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if ![4, 8].contains(&self.abits) {
            return Err(Error::Config(format!("abits = {} not in {{4, 8}}", self.abits)));
        }
        if ![4, 8, 16].contains(&self.k) {
            return Err(Error::Config(format!("k = {} not in {{4, 8, 16}}", self.k)));
        }
        if !(2..=8).contains(&self.rtn_bits()) {
            return Err(Error::Config(format!("rtn.bits = {} not in 2..=8", self.rtn_bits())));
        }
        if let Some(g) = self.granularity.group() {
            for (what, dim) in [("model.d_model", self.model.d_model), ("model.d_ff", self.model.d_ff)] {
                if dim % g != 0 {
                    return Err(Error::Config(format!("block size {g} does not divide {what} = {dim}")));
                }
            }
        }
        if self.pog.enabled {
            if self.granularity == WeightGranularity::EmbeddingWise {
                return Err(Error::Config(
                    "pog.enabled needs block-wise granularity; whole-row codebooks are order-invariant".into(),
                ));
            }
            let (g, g_s) = self.pog_sizes().expect("block-wise has a group");
            if g_s == 0 || g % g_s != 0 || self.model.d_ff % g != 0 {
                return Err(Error::Config(format!("pog.g = {g}, pog.g_s = {g_s} do not tile d_ff")));
            }
        }
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("eval.seeds is empty".into()));
        }
        if self.eval_tokens == 0 {
            return Err(Error::Config("eval.tokens must be at least 1".into()));
        }
        self.aos.validate()?;
        self.accf_config().validate()
    }

    pub fn accf_config(&self) -> ACCFConfig {
        ACCFConfig {
            iterations: if self.mode == Mode::KMeansOnly { 0 } else { self.accf.iterations },
            k: self.k,
            group: self.granularity.group(),
            abits: Some(self.abits),
            ..self.accf
        }
    }

    /// Every setting as sorted `(key, value)` pairs.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let opt = |v: Option<usize>| v.map_or("default".to_string(), |v| v.to_string());
        let mut pairs: Vec<(String, String)> = self.model.to_pairs();
        let seeds: Vec<String> = self.eval_seeds.iter().map(u64::to_string).collect();
        let init = match self.aos.init {
            RotationInit::Identity => "identity",
            RotationInit::RandomOrthogonal => "random-orthogonal",
        };
        pairs.extend(
            [
                ("mode", self.mode.name().to_string()),
                ("granularity", self.granularity.name()),
                ("abits", self.abits.to_string()),
                ("k", self.k.to_string()),
                ("rtn.bits", self.rtn_bits().to_string()),
                ("synth.outlier_channels", self.outlier_channels.to_string()),
                ("synth.outlier_scale", self.outlier_scale.to_string()),
                ("calib.outlier_channels", self.calib.outlier_channels.to_string()),
                ("calib.channel_offset", self.calib.channel_offset.to_string()),
                ("calib.massive_fraction", self.calib.massive_fraction.to_string()),
                ("calib.massive_scale", self.calib.massive_scale.to_string()),
                ("aos.iterations", self.aos.iterations.to_string()),
                ("aos.calib_tokens", self.aos.calib_tokens.to_string()),
                ("aos.bits", self.aos.bits.to_string()),
                ("aos.step", self.aos.step.to_string()),
                ("aos.momentum", self.aos.momentum.to_string()),
                ("aos.init", init.to_string()),
                ("pog.enabled", self.pog.enabled.to_string()),
                ("pog.g", opt(self.pog.g)),
                ("pog.g_s", opt(self.pog.g_s)),
                ("accf.iterations", self.accf.iterations.to_string()),
                ("accf.calib_tokens", self.accf.calib_tokens.to_string()),
                ("accf.lambda", self.accf.lambda.to_string()),
                ("accf.step", self.accf.step.to_string()),
                ("accf.momentum", self.accf.momentum.to_string()),
                ("accf.reassign_every", self.accf.reassign_every.to_string()),
                ("accf.kmeans_iters", self.accf.kmeans.max_iters.to_string()),
                ("eval.seeds", seeds.join(",")),
                ("eval.tokens", self.eval_tokens.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        pairs.sort();
        pairs
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.model.seed = seed;
        cfg
    }
}

/// Per layer, the fraction of each token's reference top-k set missing from
/// the compressed model's selection, averaged over tokens.
pub fn router_change_rate(reference: &ActivationTrace, quant: &ActivationTrace, top_k: usize) -> Result<Vec<f64>> {
    if reference.layers.len() != quant.layers.len() {
        return Err(Error::shape("router_change_rate", "traces have different depths"));
    }
    reference
        .layers
        .iter()
        .zip(&quant.layers)
        .map(|(r, q)| {
            if r.selected.len() != q.selected.len() {
                return Err(Error::shape("router_change_rate", "traces cover different tokens"));
            }
            let changed: usize = r
                .selected
                .iter()
                .zip(&q.selected)
                .map(|(a, b)| a.iter().filter(|e| !b.contains(e)).count())
                .sum();
            Ok(changed as f64 / (top_k * r.selected.len().max(1)) as f64)
        })
        .collect()
}

/// Relative Frobenius error of every layer output.
pub fn layer_output_error(reference: &ActivationTrace, quant: &ActivationTrace) -> Result<Vec<f64>> {
    if reference.layers.len() != quant.layers.len() {
        return Err(Error::shape("layer_output_error", "traces have different depths"));
    }
    reference
        .layers
        .iter()
        .zip(&quant.layers)
        .map(|(r, q)| q.output.rel_error(&r.output))
        .collect()
}

pub fn final_hidden_error(reference: &ActivationTrace, quant: &ActivationTrace) -> Result<f64> {
    quant.final_hidden.rel_error(&reference.final_hidden)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AosSummary {
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub trajectory: Vec<f64>,
}

impl From<&AOSResult> for AosSummary {
    fn from(r: &AOSResult) -> Self {
        Self {
            initial_loss: r.initial_loss(),
            best_loss: r.best_loss(),
            best_iteration: r.best_iteration,
            trajectory: r.trajectory.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub mode: Mode,
    pub layer_errors: Vec<f64>,
    pub final_error: f64,
    pub router_change: Vec<f64>,
    pub aos: Option<AosSummary>,
    pub pog: Vec<LayerPlans>,
    pub sites: Vec<SiteReport>,
}

impl EvalReport {
    pub fn router_change_mean(&self) -> f64 {
        self.router_change.iter().sum::<f64>() / self.router_change.len().max(1) as f64
    }

    /// Sum over layers of the best MoE-block clustering loss.
    pub fn moe_block_loss(&self) -> Option<f64> {
        let blocks: Vec<f64> = self
            .sites
            .iter()
            .filter(|s| s.name.ends_with(".moe"))
            .map(SiteReport::best)
            .collect();
        (!blocks.is_empty()).then(|| blocks.iter().sum())
    }

    pub fn is_finite(&self) -> bool {
        self.final_error.is_finite()
            && self.layer_errors.iter().all(|v| v.is_finite())
            && self.router_change.iter().all(|v| v.is_finite())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "mode = {}", self.mode.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "\n[config]");
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[metrics]");
        let _ = writeln!(s, "final_hidden_error = {:e}", self.final_error);
        for (l, e) in self.layer_errors.iter().enumerate() {
            let _ = writeln!(s, "layer{l}.output_error = {e:e}");
        }
        for (l, r) in self.router_change.iter().enumerate() {
            let _ = writeln!(s, "layer{l}.router_change = {r:e}");
        }
        let _ = writeln!(s, "router_change_mean = {:e}", self.router_change_mean());
        if let Some(loss) = self.moe_block_loss() {
            let _ = writeln!(s, "moe_block_loss = {loss:e}");
        }
        if let Some(a) = &self.aos {
            let _ = writeln!(s, "\n[aos]");
            let _ = writeln!(s, "initial_loss = {:e}", a.initial_loss);
            let _ = writeln!(s, "best_loss = {:e}", a.best_loss);
            let _ = writeln!(s, "best_iteration = {}", a.best_iteration);
            let _ = writeln!(s, "iter,loss");
            for (i, l) in a.trajectory.iter().enumerate() {
                let _ = writeln!(s, "{i},{l:e}");
            }
        }
        if !self.pog.is_empty() {
            let _ = writeln!(s, "\n[pog]");
            let _ = writeln!(s, "layer,expert,perm");
            for (l, lp) in self.pog.iter().enumerate() {
                for p in lp.experts.iter().chain(&lp.heads) {
                    let target = match p.target {
                        PogTarget::Expert(e) => e.to_string(),
                        PogTarget::Head(h) => format!("head{h}"),
                    };
                    let perm: Vec<String> = p.perm.iter().map(usize::to_string).collect();
                    let _ = writeln!(s, "{l},{target},{}", perm.join(" "));
                }
            }
        }
        if !self.sites.is_empty() {
            let _ = writeln!(s, "\n[accf]");
            let _ = writeln!(s, "site,iter,loss");
            for site in &self.sites {
                for (i, l) in site.trajectory.iter().enumerate() {
                    let _ = writeln!(s, "{},{i},{l:e}", site.name);
                }
            }
        }
        s
    }
}

fn rtn_all(w: &ModelWeights, cfg: &PipelineConfig) -> Result<ModelWeights> {
    let granularity = match cfg.granularity {
        WeightGranularity::EmbeddingWise => Granularity::WholeRow,
        WeightGranularity::BlockWise(g) => Granularity::PerGroup(g),
    };
    let spec = QuantSpec {
        bits: cfg.rtn_bits(),
        granularity,
    };
    let mut out = w.clone();
    for id in w.site_ids() {
        if id.site == crate::model::Site::Router {
            continue;
        }
        let mut q = quantize_weights_rtn(&w.get(id).weight, spec)?;
        q.round_scales_to_f32();
        *out.get_mut(id) = Linear::rtn(q);
    }
    out.mark_stage(STAGE_RTN, format!("bits={} granularity={}", spec.bits, cfg.granularity.name()))?;
    Ok(out)
}

fn first_rows(x: &Matrix, n: usize) -> Matrix {
    if n == 0 || n >= x.rows() {
        x.clone()
    } else {
        x.select_rows(&(0..n).collect::<Vec<_>>())
    }
}

/// Identity plans for heads the block size does not tile.
fn pog_plans(w: &ModelWeights, g: usize, g_s: usize) -> Result<Vec<LayerPlans>> {
    let d_head = w.config.d_head;
    if d_head % g == 0 {
        return plan_model_pog(w, g, g_s);
    }
    w
        .layers
        .iter()
        .map(|layer| {
            let experts = layer
                .experts
                .iter()
                .enumerate()
                .map(|(e, ex)| {
                    let mut p = crate::pog::pog_order(&ex.down.weight.transpose(), g, g_s)?;
                    p.target = PogTarget::Expert(e);
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?;
            let heads = (0..w.config.n_heads)
                .map(|h| PermutationPlan::identity(d_head, g, g_s, PogTarget::Head(h)))
                .collect();
            Ok(LayerPlans { experts, heads })
        })
        .collect()
}

/// Compresses a freshly generated model and evaluates it. Returns the
/// report and the compressed model.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(EvalReport, ModelWeights)> {
    cfg.validate()?;
    let mc = cfg.model;
    let rng = RngState::new(mc.seed);
    let original = generate_synthetic_model(&mc, cfg.outlier_channels, cfg.outlier_scale)?;
    let (calib, held) = calibration_splits_with(&mc, &cfg.calib, mc.n_calib, cfg.eval_tokens);
    let base = fold_norm_gains(&original)?;

    let mut aos = None;
    let mut pog = Vec::new();
    let mut sites = Vec::new();
    let compressed = match cfg.mode {
        Mode::Rtn => rtn_all(&base, cfg)?,
        Mode::RandomRotRtn => {
            let r = random_orthogonal(mc.d_model, &rng.derive("random-rotation", 0));
            rtn_all(&fold_rotation(&base, &r, "random")?, cfg)?
        }
        Mode::CodeQuant | Mode::KMeansOnly => {
            let x_rot = rotation_calibration(&base, &first_rows(&calib, cfg.aos.calib_tokens))?;
            let aos_cfg = AOSConfig {
                bits: cfg.aos.bits,
                ..cfg.aos
            };
            let res = optimize_rotation(&x_rot, &aos_cfg, &rng.derive("aos", 0))?;
            aos = Some(AosSummary::from(&res));
            let mut w = fold_rotation(&base, &res.params.r, "optimized")?;
            if cfg.pog.enabled {
                let (g, g_s) = cfg.pog_sizes().expect("validated");
                pog = pog_plans(&w, g, g_s)?;
                w = fold_pog(&w, &pog)?;
            }
            let (w, CalibrationReport { sites: s }) =
                calibrate_model(&w, &w.prepare_input(&calib)?, &cfg.accf_config(), &rng.derive("accf", 0))?;
            sites = s;
            w
        }
    };

    let (_, reference) = forward(&original, &held, true, None)?;
    let reference = reference.expect("trace requested");
    let (_, quant) = forward(&compressed, &compressed.prepare_input(&held)?, true, Some(ActQuant::new(cfg.abits)))?;
    let mut quant = quant.expect("trace requested");
    for layer in &mut quant.layers {
        layer.output = compressed.restore_output(&layer.output)?;
    }
    quant.final_hidden = compressed.restore_output(&quant.final_hidden)?;

    let report = EvalReport {
        seed: mc.seed,
        config: cfg.to_pairs(),
        mode: cfg.mode,
        layer_errors: layer_output_error(&reference, &quant)?,
        final_error: final_hidden_error(&reference, &quant)?,
        router_change: router_change_rate(&reference, &quant, mc.top_k)?,
        aos,
        pog,
        sites,
    };
    if !report.is_finite() {
        return Err(Error::NonFinite("evaluation metrics".into()));
    }
    Ok((report, compressed))
}

/// Runs every seed in `eval.seeds`.
pub fn evaluate_seeds(cfg: &PipelineConfig) -> Result<Vec<EvalReport>> {
    cfg.eval_seeds
        .iter()
        .map(|&s| run_pipeline(&cfg.with_seed(s)).map(|(r, _)| r))
        .collect()
}

/// Per-seed metric lines and their means.
pub fn summary_text(cfg: &PipelineConfig, reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[config]");
    for (k, v) in cfg.to_pairs() {
        if k != "model.seed" {
            let _ = writeln!(s, "{k} = {v}");
        }
    }
    let _ = writeln!(s, "\n[seeds]");
    let _ = writeln!(s, "seed,final_hidden_error,router_change_mean,moe_block_loss");
    for r in reports {
        let moe = r.moe_block_loss().map_or("none".to_string(), |v| format!("{v:e}"));
        let _ = writeln!(s, "{},{:e},{:e},{moe}", r.seed, r.final_error, r.router_change_mean());
    }
    let n = reports.len().max(1) as f64;
    let _ = writeln!(s, "\n[mean]");
    let _ = writeln!(
        s,
        "final_hidden_error = {:e}",
        reports.iter().map(|r| r.final_error).sum::<f64>() / n
    );
    let _ = writeln!(
        s,
        "router_change_mean = {:e}",
        reports.iter().map(EvalReport::router_change_mean).sum::<f64>() / n
    );
    s
}
