use rayon::prelude::*;

use super::{DecoderLayerWeights, ModelConfig, ModelWeights, Site, SiteId};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quant::{fake_quant, QuantSpec};

pub const RMS_EPS: f64 = 1e-6;

/// Activation fake-quant applied to the input of every linear site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActQuant {
    pub bits: u8,
}

impl ActQuant {
    pub fn new(bits: u8) -> Self {
        Self { bits }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        fake_quant(x, QuantSpec::per_token(self.bits))
    }
}

fn maybe_fq(x: Matrix, quant: Option<ActQuant>) -> Result<Matrix> {
    match quant {
        Some(q) => q.apply(&x),
        None => Ok(x),
    }
}

/// Everything the calibration and evaluation code needs from one layer.
/// Site inputs are recorded after fake-quant, i.e. exactly what the
/// product consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Residual stream entering the layer.
    pub input: Matrix,
    /// Input of `wq`, `wk`, `wv`.
    pub attn_in: Matrix,
    /// Concatenated head outputs, the input of `wo`.
    pub out_in: Matrix,
    /// Residual stream after attention.
    pub mid: Matrix,
    /// Input of the router and of every expert's `gate`/`up`.
    pub moe_in: Matrix,
    pub router_logits: Matrix,
    /// Softmax over all `E` logits.
    pub router_probs: Matrix,
    /// Per token, the selected experts in descending-logit order.
    pub selected: Vec<Vec<usize>>,
    /// Per token, routing weights aligned with `selected`.
    pub routing_weights: Vec<Vec<f64>>,
    /// Per expert, the input of `down` (`N × d_ff`, zero rows for tokens not
    /// routed to that expert).
    pub down_in: Vec<Matrix>,
    /// Weighted expert sum before the residual add.
    pub moe_out: Matrix,
    pub output: Matrix,
}

impl LayerTrace {
    /// Tokens routed to expert `e`, ascending.
    pub fn tokens_for(&self, e: usize) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, sel)| sel.contains(&e))
            .map(|(t, _)| t)
            .collect()
    }

    /// The matrix fed to a site (for expert sites, all `N` rows; rows of
    /// unrouted tokens are zero for `down`).
    pub fn site_input(&self, site: Site, expert: Option<usize>) -> &Matrix {
        match site {
            Site::Q | Site::K | Site::V => &self.attn_in,
            Site::Out => &self.out_in,
            Site::Router | Site::Gate | Site::Up => &self.moe_in,
            Site::Down => &self.down_in[expert.expect("down is per expert")],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
    pub final_hidden: Matrix,
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn rmsnorm(x: &[f64], gains: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gains).map(|(v, g)| g * v * inv).collect()
}

pub fn rmsnorm_rows(x: &Matrix, gains: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        out.row_mut(t).copy_from_slice(&rmsnorm(x.row(t), gains));
    }
    out
}

/// Indices of the `k` largest entries, largest first; equal values keep the
/// lower index first.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx.truncate(k);
    idx
}

fn product(x: &Matrix, w: &Matrix, id: SiteId) -> Result<Matrix> {
    let y = x.matmul(w)?;
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("output of {id}")));
    }
    Ok(y)
}

/// Causal softmax attention over `n_heads` heads of width `d_head`.
pub(crate) fn attention_heads(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &ModelConfig) -> Matrix {
    let (n, d) = q.shape();
    let dh = cfg.d_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(n, d);
    out.as_mut_slice()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(t, row)| {
            let mut scores = vec![0.0; t + 1];
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qt = &q.row(t)[cols.clone()];
                for (s, score) in scores.iter_mut().enumerate() {
                    let ks = &k.row(s)[cols.clone()];
                    *score = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let p = softmax(&scores);
                let o = &mut row[cols.clone()];
                for (s, ps) in p.iter().enumerate() {
                    let vs = &v.row(s)[cols.clone()];
                    for (oj, vj) in o.iter_mut().zip(vs) {
                        *oj += ps * vj;
                    }
                }
            }
        });
    out
}

/// `SiLU(x·W_gate) ⊙ (x·W_up)`.
pub(crate) fn expert_hidden(x: &Matrix, gate: &Matrix, up: &Matrix, layer: usize, e: usize) -> Result<Matrix> {
    let a = product(x, gate, SiteId::expert(layer, e, Site::Gate))?;
    let b = product(x, up, SiteId::expert(layer, e, Site::Up))?;
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&ga, &ub)| silu(ga) * ub)
        .collect();
    Matrix::new(a.rows(), a.cols(), data)
}

/// Routing decision for one token: selected experts and their weights.
pub fn route(logits: &[f64], top_k: usize) -> (Vec<usize>, Vec<f64>) {
    let sel = top_k_indices(logits, top_k);
    let picked: Vec<f64> = sel.iter().map(|&e| logits[e]).collect();
    (sel, softmax(&picked))
}

/// One decoder layer applied to residual stream `h`.
pub fn layer_forward(
    layer: &DecoderLayerWeights,
    cfg: &ModelConfig,
    index: usize,
    h: &Matrix,
    quant: Option<ActQuant>,
    trace: bool,
) -> Result<(Matrix, Option<LayerTrace>)> {
    let n = h.rows();
    let attn_in = maybe_fq(rmsnorm_rows(h, &layer.attn_norm), quant)?;
    let q = product(&attn_in, &layer.wq.weight, SiteId::attn(index, Site::Q))?;
    let k = product(&attn_in, &layer.wk.weight, SiteId::attn(index, Site::K))?;
    let v = product(&attn_in, &layer.wv.weight, SiteId::attn(index, Site::V))?;
    let out_in = maybe_fq(attention_heads(&q, &k, &v, cfg), quant)?;
    let attn_out = product(&out_in, &layer.wo.weight, SiteId::attn(index, Site::Out))?;
    let mid = h.add(&attn_out)?;

    let moe_in = maybe_fq(rmsnorm_rows(&mid, &layer.moe_norm), quant)?;
    let logits = product(&moe_in, &layer.router.weight, SiteId::attn(index, Site::Router))?;
    let (selected, weights): (Vec<_>, Vec<_>) =
        logits.row_iter().map(|row| route(row, cfg.top_k)).unzip();

    let per_expert: Vec<(Vec<usize>, Matrix, Matrix)> = (0..layer.experts.len())
        .into_par_iter()
        .map(|e| -> Result<_> {
            let ex = &layer.experts[e];
            let tokens: Vec<usize> = (0..n).filter(|&t| selected[t].contains(&e)).collect();
            let x = moe_in.select_rows(&tokens);
            let hid = maybe_fq(expert_hidden(&x, &ex.gate.weight, &ex.up.weight, index, e)?, quant)?;
            let y = product(&hid, &ex.down.weight, SiteId::expert(index, e, Site::Down))?;
            Ok((tokens, hid, y))
        })
        .collect::<Result<_>>()?;

    let d = h.cols();
    let mut moe_out = Matrix::zeros(n, d);
    for (e, (tokens, _, y)) in per_expert.iter().enumerate() {
        for (r, &t) in tokens.iter().enumerate() {
            let pos = selected[t].iter().position(|&s| s == e).unwrap();
            let wgt = weights[t][pos];
            for (o, yv) in moe_out.row_mut(t).iter_mut().zip(y.row(r)) {
                *o += wgt * yv;
            }
        }
    }
    let output = mid.add(&moe_out)?;
    if !output.is_finite() {
        return Err(Error::NonFinite(format!("layer{index} output")));
    }

    let tr = trace.then(|| {
        let router_probs = Matrix::from_rows(
            &logits.row_iter().map(softmax).collect::<Vec<_>>(),
        );
        let down_in = per_expert
            .into_iter()
            .map(|(tokens, hid, _)| {
                let mut full = Matrix::zeros(n, cfg.d_ff);
                for (r, &t) in tokens.iter().enumerate() {
                    full.row_mut(t).copy_from_slice(hid.row(r));
                }
                full
            })
            .collect();
        LayerTrace {
            input: h.clone(),
            attn_in,
            out_in,
            mid,
            moe_in,
            router_probs,
            router_logits: logits,
            selected,
            routing_weights: weights,
            down_in,
            moe_out,
            output: output.clone(),
        }
    });
    Ok((output, tr))
}

/// Runs the full model on `x`. If `w.input_rotation` is set the caller is
/// expected to have already multiplied `x` by it (see
/// [`ModelWeights::prepare_input`]).
pub fn forward(
    w: &ModelWeights,
    x: &Matrix,
    trace: bool,
    quant: Option<ActQuant>,
) -> Result<(Matrix, Option<ActivationTrace>)> {
    if x.cols() != w.config.d_model {
        return Err(Error::shape(
            "forward",
            format!("input has {} columns, model width is {}", x.cols(), w.config.d_model),
        ));
    }
    if let Some(q) = quant {
        QuantSpec::per_token(q.bits).validate()?;
    }
    let mut h = x.clone();
    let mut layers = Vec::new();
    for (l, layer) in w.layers.iter().enumerate() {
        let (next, tr) = layer_forward(layer, &w.config, l, &h, quant, trace)?;
        if let Some(tr) = tr {
            layers.push(tr);
        }
        h = next;
    }
    let tr = trace.then(|| ActivationTrace {
        layers,
        final_hidden: h.clone(),
    });
    Ok((h, tr))
}

impl ModelWeights {
    /// Maps raw inputs into the frame the weights expect.
    pub fn prepare_input(&self, x: &Matrix) -> Result<Matrix> {
        match &self.input_rotation {
            Some(r) => x.matmul(r),
            None => Ok(x.clone()),
        }
    }

    /// Maps hidden states back to the original frame.
    pub fn restore_output(&self, h: &Matrix) -> Result<Matrix> {
        match &self.input_rotation {
            Some(r) => h.matmul(&r.transpose()),
            None => Ok(h.clone()),
        }
    }
}
