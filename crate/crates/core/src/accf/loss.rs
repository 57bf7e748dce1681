//! Output-aware clustering objectives and their gradients.

use rayon::prelude::*;

use super::Codebook;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::silu;

/// `‖X·W − X̃·W_c‖²_F`.
pub fn accf_loss_local(x: &Matrix, x_tilde: &Matrix, w: &Matrix, cb: &Codebook) -> Result<f64> {
    Ok(x.matmul(w)?.sub(&x_tilde.matmul(&cb.reconstruct())?)?.frobenius_sq())
}

/// Local objective with the products that do not depend on the codebook
/// precomputed.
#[derive(Debug, Clone)]
pub struct LocalObjective {
    x_tilde: Matrix,
    target: Matrix,
    gram: Matrix,
    cross: Matrix,
}

impl LocalObjective {
    pub fn new(x: &Matrix, x_tilde: &Matrix, w: &Matrix) -> Result<Self> {
        if x.shape() != x_tilde.shape() {
            return Err(Error::shape("LocalObjective", "clean and quantized inputs differ in shape"));
        }
        let target = x.matmul(w)?;
        Ok(Self {
            gram: x_tilde.t_matmul(x_tilde)?,
            cross: x_tilde.t_matmul(&target)?,
            x_tilde: x_tilde.clone(),
            target,
        })
    }

    pub fn loss(&self, cb: &Codebook) -> Result<f64> {
        Ok(self.target.sub(&self.x_tilde.matmul(&cb.reconstruct())?)?.frobenius_sq())
    }

    /// `∇_{W_c} = 2 X̃ᵀX̃ W_c − 2 X̃ᵀX W`.
    pub fn weight_grad(&self, wc: &Matrix) -> Result<Matrix> {
        Ok(self.gram.matmul(wc)?.sub(&self.cross)?.scale(2.0))
    }

    /// Gradient with respect to each centroid (ids fixed).
    pub fn centroid_grad(&self, cb: &Codebook) -> Result<Vec<f64>> {
        Ok(cb.scatter(&self.weight_grad(&cb.reconstruct())?))
    }
}

/// Reference and quantized-path data for one MoE block.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeBlockCalib {
    /// Block input on the quantized path, `N × d`.
    pub x_tilde: Matrix,
    /// Reference weighted expert sum from the full-precision model.
    pub y: Matrix,
    /// Reference router probabilities over all experts.
    pub pi: Matrix,
    /// Router probabilities on the quantized path.
    pub pi_tilde: Matrix,
    /// Selection on the quantized path, held fixed.
    pub selected: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

/// Dense `(gate, up, down)` weights of one expert.
pub type ExpertMats = (Matrix, Matrix, Matrix);

impl MoeBlockCalib {
    pub fn n_experts(&self) -> usize {
        self.pi.cols()
    }

    /// `(tokens, routing weights)` for expert `e`, tokens ascending.
    pub fn routed(&self, e: usize) -> (Vec<usize>, Vec<f64>) {
        let mut tokens = Vec::new();
        let mut w = Vec::new();
        for (t, (sel, wt)) in self.selected.iter().zip(&self.weights).enumerate() {
            if let Some(p) = sel.iter().position(|&s| s == e) {
                tokens.push(t);
                w.push(wt[p]);
            }
        }
        (tokens, w)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x_tilde.rows();
        if self.y.rows() != n
            || self.pi.rows() != n
            || self.pi_tilde.shape() != self.pi.shape()
            || self.selected.len() != n
            || self.weights.len() != n
        {
            return Err(Error::shape("MoeBlockCalib", "row counts disagree"));
        }
        for (name, p) in [("reference", &self.pi), ("quantized", &self.pi_tilde)] {
            for (t, row) in p.row_iter().enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                    return Err(Error::Precondition(format!(
                        "{name} router probabilities for token {t} sum to {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mean over tokens of `KL(Π̃_t ‖ Π_t)`.
    pub fn kl(&self) -> f64 {
        let n = self.pi.rows();
        if n == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for t in 0..n {
            for (&q, &p) in self.pi_tilde.row(t).iter().zip(self.pi.row(t)) {
                if q > 0.0 {
                    total += q * (q / p).ln();
                }
            }
        }
        total / n as f64
    }

    /// Per expert: routed tokens, their weights, inputs, and the
    /// `(SiLU(a), b, a)` intermediates.
    fn expert_pass(&self, e: usize, m: &ExpertMats) -> Result<ExpertPass> {
        let (tokens, w) = self.routed(e);
        let x = self.x_tilde.select_rows(&tokens);
        let a = x.matmul(&m.0)?;
        let b = x.matmul(&m.1)?;
        let h = Matrix::new(
            a.rows(),
            a.cols(),
            a.as_slice().iter().zip(b.as_slice()).map(|(&p, &q)| silu(p) * q).collect(),
        )?;
        let out = h.matmul(&m.2)?;
        Ok(ExpertPass { tokens, w, x, a, b, h, out })
    }

    /// Residual `Σ_e w·expert_e(X̃) − Y`.
    fn residual(&self, passes: &[ExpertPass]) -> Result<Matrix> {
        let mut r = self.y.scale(-1.0);
        for p in passes {
            for (row, (&t, &wt)) in p.tokens.iter().zip(&p.w).enumerate() {
                for (o, v) in r.row_mut(t).iter_mut().zip(p.out.row(row)) {
                    *o += wt * v;
                }
            }
        }
        Ok(r)
    }

    fn passes(&self, experts: &[ExpertMats]) -> Result<Vec<ExpertPass>> {
        if experts.len() != self.n_experts() {
            return Err(Error::shape("MoeBlockCalib", "expert count"));
        }
        experts
            .par_iter()
            .enumerate()
            .map(|(e, m)| self.expert_pass(e, m))
            .collect()
    }

    /// `‖Y − Σ w·expert(X̃)‖² + λ·KL`.
    pub fn loss(&self, experts: &[ExpertMats], lambda: f64) -> Result<f64> {
        let r = self.residual(&self.passes(experts)?)?;
        Ok(r.frobenius_sq() + lambda * self.kl())
    }

    /// Gradients of the loss with respect to each expert's dense weights.
    /// Routing is fixed and the router is not clustered, so the KL term
    /// contributes nothing here.
    pub fn weight_grads(&self, experts: &[ExpertMats]) -> Result<Vec<ExpertMats>> {
        let passes = self.passes(experts)?;
        let r = self.residual(&passes)?;
        passes
            .par_iter()
            .zip(experts)
            .map(|(p, m)| {
                let d_out = Matrix::from_fn(p.tokens.len(), r.cols(), |row, c| {
                    2.0 * p.w[row] * r[(p.tokens[row], c)]
                });
                let g_down = p.h.t_matmul(&d_out)?;
                let d_h = d_out.matmul(&m.2.transpose())?;
                let n = d_h.as_slice().len();
                let (mut d_a, mut d_b) = (vec![0.0; n], vec![0.0; n]);
                for idx in 0..n {
                    let (a, b, dh) = (p.a.as_slice()[idx], p.b.as_slice()[idx], d_h.as_slice()[idx]);
                    let s = 1.0 / (1.0 + (-a).exp());
                    d_b[idx] = dh * a * s;
                    d_a[idx] = dh * b * s * (1.0 + a * (1.0 - s));
                }
                let d_a = Matrix::new(p.a.rows(), p.a.cols(), d_a)?;
                let d_b = Matrix::new(p.b.rows(), p.b.cols(), d_b)?;
                Ok((p.x.t_matmul(&d_a)?, p.x.t_matmul(&d_b)?, g_down))
            })
            .collect()
    }
}

struct ExpertPass {
    tokens: Vec<usize>,
    w: Vec<f64>,
    x: Matrix,
    a: Matrix,
    b: Matrix,
    h: Matrix,
    out: Matrix,
}

/// Codebooks for one expert's `(gate, up, down)`.
pub type ExpertCodebooks = (Codebook, Codebook, Codebook);

fn reconstruct_all(cbs: &[ExpertCodebooks]) -> Vec<ExpertMats> {
    cbs.iter()
        .map(|(g, u, d)| (g.reconstruct(), u.reconstruct(), d.reconstruct()))
        .collect()
}

/// MoE-block objective evaluated on clustered experts.
pub fn accf_loss_moe(calib: &MoeBlockCalib, cbs: &[ExpertCodebooks], lambda: f64) -> Result<f64> {
    calib.validate()?;
    calib.loss(&reconstruct_all(cbs), lambda)
}

/// Centroid gradients of the MoE-block objective, per expert `(gate, up, down)`.
pub fn moe_centroid_grads(calib: &MoeBlockCalib, cbs: &[ExpertCodebooks]) -> Result<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>> {
    let grads = calib.weight_grads(&reconstruct_all(cbs))?;
    Ok(cbs
        .iter()
        .zip(&grads)
        .map(|((g, u, d), (gg, gu, gd))| (g.scatter(gg), u.scatter(gu), d.scatter(gd)))
        .collect())
}
