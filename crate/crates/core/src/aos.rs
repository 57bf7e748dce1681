//! Learned residual-stream rotation for activation smoothing.
//!
//! The rotation is parameterized through the Cayley map
//! `R = (I − S)(I + S)⁻¹`, `S = (M − Mᵀ)/2`, so every iterate is exactly
//! orthogonal and can be folded into the weights without changing the
//! model function.

use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, Matrix};
use crate::model::{ModelWeights, Site, STAGE_AOS, STAGE_NORM_FOLD};
use crate::quant::{fake_quant, QuantSpec};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct RotationParams {
    pub m: Matrix,
    pub s: Matrix,
    pub r: Matrix,
    /// `(I + S)⁻¹`, kept for the gradient.
    inv: Matrix,
}

impl RotationParams {
    pub fn from_m(m: Matrix) -> Result<Self> {
        let (rows, cols) = m.shape();
        if rows != cols {
            return Err(Error::shape("cayley", format!("M is {rows}x{cols}")));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite("rotation parameter M".into()));
        }
        let s = m.sub(&m.transpose())?.scale(0.5);
        let eye = Matrix::identity(rows);
        let inv = eye.add(&s)?.inverse()?;
        let r = eye.sub(&s)?.matmul(&inv)?;
        Ok(Self { m, s, r, inv })
    }
}

pub fn cayley(m: &Matrix) -> Result<Matrix> {
    Ok(RotationParams::from_m(m.clone())?.r)
}

fn check_width(x: &Matrix, d: usize) -> Result<()> {
    if x.cols() != d {
        return Err(Error::shape("aos", format!("activations have {} columns, rotation is {d}", x.cols())));
    }
    Ok(())
}

/// `‖XR − Q(XR)‖²_F` with per-token symmetric quantization.
pub fn aos_loss(r: &Matrix, x: &Matrix, bits: u8) -> Result<f64> {
    check_width(x, r.rows())?;
    let xr = x.matmul(r)?;
    Ok(xr.sub(&fake_quant(&xr, QuantSpec::per_token(bits))?)?.frobenius_sq())
}

/// Gradient of `‖X·cayley(M) − T‖²` with respect to `M`, for fixed `T`.
pub fn aos_grad_with_target(p: &RotationParams, x: &Matrix, target: &Matrix) -> Result<Matrix> {
    check_width(x, p.r.rows())?;
    let resid = x.matmul(&p.r)?.sub(target)?;
    let g_r = x.t_matmul(&resid)?.scale(2.0);
    let eye = Matrix::identity(p.r.rows());
    let g_s = eye.add(&p.r)?.t_matmul(&g_r)?.matmul(&p.inv.transpose())?.scale(-1.0);
    Ok(g_s.sub(&g_s.transpose())?.scale(0.5))
}

/// Gradient of the quantization loss with the quantized tensor held fixed
/// at its current value.
pub fn aos_grad(m: &Matrix, x: &Matrix, bits: u8) -> Result<Matrix> {
    let p = RotationParams::from_m(m.clone())?;
    check_width(x, p.r.rows())?;
    let target = fake_quant(&x.matmul(&p.r)?, QuantSpec::per_token(bits))?;
    aos_grad_with_target(&p, x, &target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationInit {
    Identity,
    RandomOrthogonal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AOSConfig {
    pub iterations: usize,
    pub calib_tokens: usize,
    pub bits: u8,
    pub step: f64,
    pub momentum: f64,
    pub init: RotationInit,
}

impl Default for AOSConfig {
    fn default() -> Self {
        Self {
            iterations: 128,
            calib_tokens: 1024,
            bits: 4,
            step: 1e-3,
            momentum: 0.9,
            init: RotationInit::RandomOrthogonal,
        }
    }
}

impl AOSConfig {
    pub fn validate(&self) -> Result<()> {
        QuantSpec::per_token(self.bits).validate()?;
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("aos.step {} must be > 0", self.step)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("aos.momentum {} not in [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Starting `M` whose Cayley image is a random rotation.
pub fn initial_m(d: usize, init: RotationInit, rng: &RngState) -> Result<Matrix> {
    match init {
        RotationInit::Identity => Ok(Matrix::zeros(d, d)),
        RotationInit::RandomOrthogonal => {
            let mut r0 = random_orthogonal(d, &rng.derive("aos-init", 0));
            if r0.determinant()? < 0.0 {
                // The Cayley image has determinant +1; flip one axis.
                for i in 0..d {
                    r0[(i, 0)] = -r0[(i, 0)];
                }
            }
            let eye = Matrix::identity(d);
            let s = eye.sub(&r0)?.matmul(&eye.add(&r0)?.inverse()?)?;
            Ok(s.sub(&s.transpose())?.scale(0.5))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AOSResult {
    pub params: RotationParams,
    /// Calibration loss per iterate, starting with the initialization.
    pub trajectory: Vec<f64>,
    pub best_iteration: usize,
}

impl AOSResult {
    pub fn initial_loss(&self) -> f64 {
        self.trajectory[0]
    }

    pub fn best_loss(&self) -> f64 {
        self.trajectory[self.best_iteration]
    }
}

/// Full-batch momentum descent on `M` using the normalized gradient
/// direction. Returns the lowest-loss iterate.
pub fn optimize_rotation(x: &Matrix, cfg: &AOSConfig, rng: &RngState) -> Result<AOSResult> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(Error::Precondition("empty calibration matrix".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("AOS calibration matrix".into()));
    }
    let d = x.cols();
    let spec = QuantSpec::per_token(cfg.bits);
    let mut p = RotationParams::from_m(initial_m(d, cfg.init, rng)?)?;
    let mut velocity = Matrix::zeros(d, d);
    let mut trajectory = Vec::with_capacity(cfg.iterations + 1);
    let mut best = (f64::INFINITY, p.clone(), 0);
    for it in 0..=cfg.iterations {
        let xr = x.matmul(&p.r)?;
        let target = fake_quant(&xr, spec)?;
        let loss = xr.sub(&target)?.frobenius_sq();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "aos".into(),
                iteration: it,
                loss,
            });
        }
        trajectory.push(loss);
        if loss < best.0 {
            best = (loss, p.clone(), it);
        }
        if it == cfg.iterations {
            break;
        }
        let g = aos_grad_with_target(&p, x, &target)?;
        let norm = g.frobenius();
        if norm == 0.0 {
            break;
        }
        velocity = velocity.scale(cfg.momentum).add(&g.scale(1.0 / norm))?;
        p = RotationParams::from_m(p.m.sub(&velocity.scale(cfg.step))?)?;
    }
    Ok(AOSResult {
        params: best.1,
        trajectory,
        best_iteration: best.2,
    })
}

fn scale_rows(w: &Matrix, gains: &[f64]) -> Matrix {
    let mut out = w.clone();
    for (j, &g) in gains.iter().enumerate() {
        for v in out.row_mut(j) {
            *v *= g;
        }
    }
    out
}

/// Absorbs each norm's gains into the linears reading from it and resets
/// the gains to one.
pub fn fold_norm_gains(w: &ModelWeights) -> Result<ModelWeights> {
    w.require_unapplied(STAGE_NORM_FOLD)?;
    w.require_dense("norm-gain folding")?;
    let mut out = w.clone();
    for layer in &mut out.layers {
        let a1 = std::mem::replace(&mut layer.attn_norm, vec![1.0; w.config.d_model]);
        let a2 = std::mem::replace(&mut layer.moe_norm, vec![1.0; w.config.d_model]);
        for s in [Site::Q, Site::K, Site::V] {
            let lin = layer.attn_mut(s);
            lin.weight = scale_rows(&lin.weight, &a1);
        }
        layer.router.weight = scale_rows(&layer.router.weight, &a2);
        for ex in &mut layer.experts {
            ex.gate.weight = scale_rows(&ex.gate.weight, &a2);
            ex.up.weight = scale_rows(&ex.up.weight, &a2);
        }
    }
    out.mark_stage(STAGE_NORM_FOLD, "1")?;
    Ok(out)
}

/// Rotates the residual stream by `R`. Feeding the result `X·R` gives final
/// hidden states `H(X)·R`.
pub fn fold_rotation(w: &ModelWeights, r: &Matrix, label: &str) -> Result<ModelWeights> {
    w.require_unapplied(STAGE_AOS)?;
    w.require_dense("rotation folding")?;
    let d = w.config.d_model;
    if r.shape() != (d, d) {
        return Err(Error::shape("fold_rotation", format!("R is {:?}, model width {d}", r.shape())));
    }
    let gains_are_one = w
        .layers
        .iter()
        .all(|l| l.attn_norm.iter().chain(&l.moe_norm).all(|&g| g == 1.0));
    if !gains_are_one {
        return Err(Error::Precondition("norm gains must be folded before rotating".into()));
    }
    let defect = r.orthogonality_defect()?;
    if !(defect < 1e-8) {
        return Err(Error::NotOrthogonal(defect));
    }
    let rt = r.transpose();
    let mut out = w.clone();
    for id in w.site_ids() {
        let lin = out.get_mut(id);
        lin.weight = match id.site {
            Site::Out | Site::Down => lin.weight.matmul(r)?,
            _ => rt.matmul(&lin.weight)?,
        };
    }
    out.input_rotation = Some(match &w.input_rotation {
        Some(prev) => prev.matmul(r)?,
        None => r.clone(),
    });
    out.mark_stage(STAGE_AOS, label)?;
    Ok(out)
}

/// Stacks the normed inputs of every attention and MoE block, i.e. the
/// activations the shared rotation acts on.
pub fn rotation_calibration(w: &ModelWeights, x: &Matrix) -> Result<Matrix> {
    let (_, trace) = crate::model::forward(w, x, true, None)?;
    let trace = trace.expect("trace requested");
    let parts: Vec<&Matrix> = trace
        .layers
        .iter()
        .flat_map(|l| [&l.attn_in, &l.moe_in])
        .collect();
    if parts.is_empty() {
        return Ok(crate::model::rmsnorm_rows(x, &vec![1.0; x.cols()]));
    }
    Matrix::vstack(&parts)
}
