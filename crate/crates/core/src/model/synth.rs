//! Synthetic weights and calibration activations with planted outliers.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DecoderLayerWeights, ExpertWeights, Linear, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::RngState;

/// Random model: i.i.d. `N(0, 1/d_model)` weights where, in each matrix,
/// `outlier_channels` input channels (rows in the `x · W` layout) are
/// multiplied by `outlier_scale`. Norm gains are drawn from `[0.5, 1.5)`.
pub fn generate_synthetic_model(
    cfg: &ModelConfig,
    outlier_channels: usize,
    outlier_scale: f64,
) -> Result<ModelWeights> {
    cfg.validate()?;
    if outlier_channels >= cfg.d_model || (outlier_channels > 0 && outlier_channels >= cfg.d_ff) {
        return Err(Error::Config(format!(
            "outlier_channels {outlier_channels} must be below d_model {} and d_ff {}",
            cfg.d_model, cfg.d_ff
        )));
    }
    if !(outlier_scale.is_finite() && outlier_scale > 0.0) {
        return Err(Error::Config(format!("outlier_scale {outlier_scale} must be positive")));
    }
    let rng = RngState::new(cfg.seed);
    let std = 1.0 / (cfg.d_model as f64).sqrt();
    let mut counter = 0u64;
    let mut draw = |d_in: usize, d_out: usize| {
        let idx = counter;
        counter += 1;
        let mut w = Matrix::gaussian(d_in, d_out, std, &rng, "weight", idx);
        let mut pick = rng.stream("weight-outliers", idx);
        for r in sample(&mut pick, d_in, outlier_channels) {
            for v in w.row_mut(r) {
                *v *= outlier_scale;
            }
        }
        Linear::dense(w)
    };
    let d = cfg.d_model;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut gains = rng.stream("norm-gain", l as u64);
        let attn_norm = (0..d).map(|_| gains.random_range(0.5..1.5)).collect();
        let moe_norm = (0..d).map(|_| gains.random_range(0.5..1.5)).collect();
        let wq = draw(d, d);
        let wk = draw(d, d);
        let wv = draw(d, d);
        let wo = draw(d, d);
        let router = draw(d, cfg.n_experts);
        let experts = (0..cfg.n_experts)
            .map(|_| ExpertWeights {
                gate: draw(d, cfg.d_ff),
                up: draw(d, cfg.d_ff),
                down: draw(cfg.d_ff, d),
            })
            .collect();
        layers.push(DecoderLayerWeights {
            attn_norm,
            moe_norm,
            wq,
            wk,
            wv,
            wo,
            router,
            experts,
        });
    }
    let mut metadata = BTreeMap::new();
    metadata.insert(
        "provenance".to_string(),
        format!("synthetic outlier_channels={outlier_channels} outlier_scale={outlier_scale}"),
    );
    Ok(ModelWeights {
        config: *cfg,
        layers,
        metadata,
        input_rotation: None,
    })
}

/// Shape of the synthetic activation distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibRecipe {
    /// Channels carrying a large signed offset on every token.
    pub outlier_channels: usize,
    pub channel_offset: f64,
    /// Fraction of rows multiplied by `massive_scale` (at least one row).
    pub massive_fraction: f64,
    pub massive_scale: f64,
}

impl Default for CalibRecipe {
    fn default() -> Self {
        Self {
            outlier_channels: 4,
            channel_offset: 12.0,
            massive_fraction: 0.02,
            massive_scale: 50.0,
        }
    }
}

pub fn generate_calibration(cfg: &ModelConfig, n_tokens: usize, rng: &RngState) -> Matrix {
    generate_calibration_with(cfg, &CalibRecipe::default(), n_tokens, rng)
}

/// `n_tokens × d_model` activations. Which channels are outliers (and their
/// signs and magnitudes) is fixed by the model seed so every split shares
/// them; the per-token noise and massive rows come from `rng`.
pub fn generate_calibration_with(
    cfg: &ModelConfig,
    recipe: &CalibRecipe,
    n_tokens: usize,
    rng: &RngState,
) -> Matrix {
    let d = cfg.d_model;
    let mut chan_rng = RngState::new(cfg.seed).stream("calib-channels", 0);
    let n_out = recipe.outlier_channels.min(d);
    let channels: Vec<(usize, f64)> = sample(&mut chan_rng, d, n_out)
        .into_iter()
        .map(|c| {
            let sign = if chan_rng.random::<bool>() { 1.0 } else { -1.0 };
            (c, sign * recipe.channel_offset * chan_rng.random_range(0.75..1.25))
        })
        .collect();

    let mut x = Matrix::zeros(n_tokens, d);
    for t in 0..n_tokens {
        let mut r = rng.stream("calib-row", t as u64);
        let row = x.row_mut(t);
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut r);
        }
        for &(c, off) in &channels {
            row[c] += off;
        }
    }
    if n_tokens > 0 && recipe.massive_fraction > 0.0 {
        let m = ((n_tokens as f64 * recipe.massive_fraction).round() as usize).clamp(1, n_tokens);
        let mut r = rng.stream("calib-massive", n_tokens as u64);
        for t in sample(&mut r, n_tokens, m) {
            for v in x.row_mut(t) {
                *v *= recipe.massive_scale;
            }
        }
    }
    x
}

/// Calibration and held-out matrices drawn from independent streams.
pub fn calibration_splits(cfg: &ModelConfig, n_calib: usize, n_heldout: usize) -> (Matrix, Matrix) {
    calibration_splits_with(cfg, &CalibRecipe::default(), n_calib, n_heldout)
}

pub fn calibration_splits_with(
    cfg: &ModelConfig,
    recipe: &CalibRecipe,
    n_calib: usize,
    n_heldout: usize,
) -> (Matrix, Matrix) {
    let base = RngState::new(cfg.seed).derive("calibration", 0);
    let calib = generate_calibration_with(cfg, recipe, n_calib, &base);
    let held = generate_calibration_with(cfg, recipe, n_heldout, &base.derive("heldout", 0));
    (calib, held)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Site;

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    fn row_norms(w: &Matrix) -> Vec<f64> {
        w.row_iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    #[test]
    fn planted_channels_are_scaled() {
        let w = generate_synthetic_model(&ModelConfig::default(), 4, 20.0).unwrap();
        for id in w.site_ids() {
            if w.get(id).weight.cols() < 16 {
                // Four-column router rows are too noisy for a ratio check.
                continue;
            }
            let norms = row_norms(&w.get(id).weight);
            let med = median(norms.clone());
            let big = norms.iter().filter(|&&n| n > 8.0 * med).count();
            assert_eq!(big, 4, "{id}");
            for n in norms.iter().filter(|&&n| n > 8.0 * med) {
                let ratio = n / med;
                assert!((10.0..40.0).contains(&ratio), "{id}: ratio {ratio}");
            }
        }
    }

    #[test]
    fn unit_scale_has_no_outliers() {
        let w = generate_synthetic_model(&ModelConfig::default(), 4, 1.0).unwrap();
        let norms = row_norms(&w.layers[0].wq.weight);
        let med = median(norms.clone());
        assert!(norms.iter().all(|&n| n < 3.0 * med));
        let all: Vec<f64> = w.layers[0].experts[0].gate.weight.as_slice().to_vec();
        let var = all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64;
        assert!((var * 64.0 - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn rejects_bad_counts() {
        let cfg = ModelConfig::default();
        assert!(generate_synthetic_model(&cfg, 64, 20.0).is_err());
        assert!(generate_synthetic_model(&cfg, 4, 0.0).is_err());
        let bad = ModelConfig { top_k: 5, ..cfg };
        assert!(generate_synthetic_model(&bad, 4, 20.0).is_err());
    }

    #[test]
    fn same_seed_same_model() {
        let cfg = ModelConfig::default();
        let a = generate_synthetic_model(&cfg, 4, 20.0).unwrap();
        let b = generate_synthetic_model(&cfg, 4, 20.0).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_model(&ModelConfig { seed: 1, ..cfg }, 4, 20.0).unwrap();
        assert_ne!(a.layers[0].attn(Site::Q), c.layers[0].attn(Site::Q));
    }

    #[test]
    fn calibration_statistics() {
        let cfg = ModelConfig::default();
        let one = generate_calibration(&cfg, 1, &RngState::new(0));
        assert_eq!(one.shape(), (1, 64));

        let (calib, held) = calibration_splits(&cfg, 512, 256);
        let abs: Vec<f64> = calib.as_slice().iter().map(|v| v.abs()).collect();
        let ratio = calib.max_abs() / median(abs);
        assert!(ratio > 20.0, "{ratio}");
        for t in 0..held.rows() {
            assert!(calib.row_iter().all(|r| r != held.row(t)));
        }
    }
}
