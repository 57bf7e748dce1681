//! Alternating centroid descent and assignment refinement, driven site by
//! site through the model with quantized-path inputs.

use rayon::prelude::*;

use super::loss::{ExpertCodebooks, ExpertMats, LocalObjective, MoeBlockCalib};
use super::{kmeans_init, Codebook, KMeansConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    expert_hidden, forward, layer_forward, ActQuant, Linear, ModelWeights, Site, SiteId, STAGE_ACCF,
};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ACCFConfig {
    pub iterations: usize,
    pub calib_tokens: usize,
    /// Weight of the router KL term in the MoE objective.
    pub lambda: f64,
    /// Centroid step, relative to the RMS of the weight being clustered.
    pub step: f64,
    pub momentum: f64,
    pub reassign_every: usize,
    pub k: usize,
    /// Group length along the input dimension; `None` spans the whole row.
    pub group: Option<usize>,
    pub kmeans: KMeansConfig,
    /// Activation fake-quant bits on the quantized path; `None` disables it.
    pub abits: Option<u8>,
}

impl Default for ACCFConfig {
    fn default() -> Self {
        Self {
            iterations: 64,
            calib_tokens: 512,
            lambda: 1.0,
            step: 0.01,
            momentum: 0.9,
            reassign_every: 1,
            k: 16,
            group: None,
            kmeans: KMeansConfig::default(),
            abits: Some(4),
        }
    }
}

impl ACCFConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("accf.lambda {} must be >= 0", self.lambda)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("accf.step {} must be > 0", self.step)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("accf.momentum {} not in [0, 1)", self.momentum)));
        }
        if self.reassign_every == 0 {
            return Err(Error::Config("accf.reassign_every must be at least 1".into()));
        }
        if self.k == 0 || self.k > 16 {
            return Err(Error::Config(format!("K = {} not in 1..=16", self.k)));
        }
        if self.group == Some(0) {
            return Err(Error::Config("group size must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonals of `X̃ᵀX̃` and `X̃ᵀX`, one entry per input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentScales {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

pub fn assignment_scales(x_tilde: &Matrix, x: &Matrix) -> Result<AssignmentScales> {
    if x_tilde.shape() != x.shape() {
        return Err(Error::shape("assignment_scales", "inputs differ in shape"));
    }
    let mut d1 = vec![0.0; x.cols()];
    let mut d2 = vec![0.0; x.cols()];
    for (rt, r) in x_tilde.row_iter().zip(x.row_iter()) {
        for j in 0..r.len() {
            d1[j] += rt[j] * rt[j];
            d2[j] += rt[j] * r[j];
        }
    }
    Ok(AssignmentScales { d1, d2 })
}

/// Reassigns every weight to the centroid minimizing
/// `(D1_j·C_k − D2_j·W_ij)²`, lower `k` on ties. Channels with `D1_j = 0`
/// fall back to the nearest centroid.
pub fn reassign(w: &Matrix, cb: &Codebook, scales: &AssignmentScales) -> Result<Codebook> {
    if w.shape() != (cb.d_in, cb.d_out) || scales.d1.len() != cb.d_in || scales.d2.len() != cb.d_in {
        return Err(Error::shape("reassign", "weight, codebook and scales disagree"));
    }
    let mut out = cb.clone();
    for i in 0..cb.d_out {
        for j in 0..cb.d_in {
            let cents = cb.group_centroids(i, j / cb.group);
            let wij = w[(j, i)];
            let (d1, d2) = (scales.d1[j], scales.d2[j]);
            let cost = |c: f64| {
                if d1 == 0.0 {
                    (c - wij).abs()
                } else {
                    let e = d1 * c - d2 * wij;
                    e * e
                }
            };
            let mut best = 0;
            let mut best_cost = cost(cents[0]);
            for (k, &c) in cents.iter().enumerate().skip(1) {
                let v = cost(c);
                if v < best_cost {
                    best = k;
                    best_cost = v;
                }
            }
            out.ids[i * cb.d_in + j] = best as u8;
        }
    }
    Ok(out)
}

/// Momentum step with per-centroid second-moment normalization.
#[derive(Debug, Clone)]
pub struct CentroidOptimizer {
    lr: f64,
    beta1: f64,
    beta2: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl CentroidOptimizer {
    pub fn new(len: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            beta1: momentum,
            beta2: 0.999,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One update of the centroids along `grad`, assignments unchanged.
pub fn centroid_step(cb: &Codebook, grad: &[f64], opt: &mut CentroidOptimizer) -> Codebook {
    let mut out = cb.clone();
    opt.t += 1;
    let c1 = 1.0 - opt.beta1.powi(opt.t);
    let c2 = 1.0 - opt.beta2.powi(opt.t);
    for (idx, c) in out.centroids.iter_mut().enumerate() {
        let g = grad[idx];
        opt.m[idx] = opt.beta1 * opt.m[idx] + (1.0 - opt.beta1) * g;
        opt.v[idx] = opt.beta2 * opt.v[idx] + (1.0 - opt.beta2) * g * g;
        let denom = (opt.v[idx] / c2).sqrt();
        if denom > 0.0 {
            *c -= opt.lr * (opt.m[idx] / c1) / denom;
        }
    }
    out
}

fn rms(w: &Matrix) -> f64 {
    (w.frobenius_sq() / w.as_slice().len().max(1) as f64).sqrt()
}

/// Alternates centroid steps and reassignment over a set of codebooks that
/// share one objective, returning the lowest-loss iterate and the loss
/// trajectory (initial loss first).
fn alternate(
    stage: &str,
    init: Vec<Codebook>,
    targets: &[&Matrix],
    cfg: &ACCFConfig,
    loss: impl Fn(&[Codebook]) -> Result<f64>,
    grads: impl Fn(&[Codebook]) -> Result<Vec<Vec<f64>>>,
    scales: impl Fn(&[Codebook]) -> Result<Vec<AssignmentScales>>,
) -> Result<(Vec<Codebook>, Vec<f64>)> {
    let mut cbs = init;
    for cb in &mut cbs {
        cb.round_to_f32();
    }
    let l0 = loss(&cbs)?;
    if !l0.is_finite() {
        return Err(Error::Divergence {
            stage: stage.to_string(),
            iteration: 0,
            loss: l0,
        });
    }
    let mut trajectory = vec![l0];
    let mut best = (l0, cbs.clone());
    let mut opts: Vec<CentroidOptimizer> = cbs
        .iter()
        .zip(targets)
        .map(|(cb, w)| CentroidOptimizer::new(cb.centroids.len(), cfg.step * rms(w), cfg.momentum))
        .collect();
    for it in 0..cfg.iterations {
        let g = grads(&cbs)?;
        for ((cb, gi), opt) in cbs.iter_mut().zip(&g).zip(&mut opts) {
            *cb = centroid_step(cb, gi, opt);
            cb.round_to_f32();
        }
        if (it + 1) % cfg.reassign_every == 0 || it + 1 == cfg.iterations {
            let s = scales(&cbs)?;
            for ((cb, w), sc) in cbs.iter_mut().zip(targets).zip(&s) {
                *cb = reassign(w, cb, sc)?;
            }
        }
        let l = loss(&cbs)?;
        if !l.is_finite() {
            return Err(Error::Divergence {
                stage: stage.to_string(),
                iteration: it + 1,
                loss: l,
            });
        }
        trajectory.push(l);
        if l < best.0 {
            best = (l, cbs.clone());
        }
    }
    Ok((best.1, trajectory))
}

/// Clustering record for one objective (a single site or an MoE block).
#[derive(Debug, Clone, PartialEq)]
pub struct SiteReport {
    pub name: String,
    pub trajectory: Vec<f64>,
}

impl SiteReport {
    pub fn initial(&self) -> f64 {
        self.trajectory[0]
    }

    pub fn best(&self) -> f64 {
        self.trajectory.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Clusters one site under the local objective `‖X·W − X̃·W_c‖²`.
pub fn calibrate_layer(
    id: SiteId,
    w: &Matrix,
    x: &Matrix,
    x_tilde: &Matrix,
    cfg: &ACCFConfig,
    rng: &RngState,
) -> Result<(Codebook, SiteReport)> {
    cfg.validate()?;
    let obj = LocalObjective::new(x, x_tilde, w)?;
    let init = kmeans_init(w, cfg.group, cfg.k, &rng.derive(&id.tensor_name(), 0), cfg.kmeans)?;
    let name = id.tensor_name();
    let (mut cbs, trajectory) = alternate(
        &format!("accf {name}"),
        vec![init],
        &[w],
        cfg,
        |c| obj.loss(&c[0]),
        |c| Ok(vec![obj.centroid_grad(&c[0])?]),
        |_| Ok(vec![assignment_scales(x_tilde, x)?]),
    )?;
    Ok((cbs.remove(0), SiteReport { name, trajectory }))
}

/// Clusters every expert of one MoE block jointly under the block objective.
pub fn calibrate_moe_block(
    layer: usize,
    originals: &[ExpertMats],
    calib: &MoeBlockCalib,
    x_clean: &Matrix,
    cfg: &ACCFConfig,
    rng: &RngState,
) -> Result<(Vec<ExpertCodebooks>, SiteReport)> {
    cfg.validate()?;
    calib.validate()?;
    let mut init = Vec::with_capacity(originals.len() * 3);
    let mut targets: Vec<&Matrix> = Vec::with_capacity(originals.len() * 3);
    for (e, (g, u, d)) in originals.iter().enumerate() {
        for (site, w) in [(Site::Gate, g), (Site::Up, u), (Site::Down, d)] {
            let id = SiteId::expert(layer, e, site);
            init.push(kmeans_init(w, cfg.group, cfg.k, &rng.derive(&id.tensor_name(), 0), cfg.kmeans)?);
            targets.push(w);
        }
    }
    let routed: Vec<Vec<usize>> = (0..originals.len()).map(|e| calib.routed(e).0).collect();
    let clean_hidden: Vec<Matrix> = originals
        .iter()
        .enumerate()
        .map(|(e, (g, u, _))| expert_hidden(&x_clean.select_rows(&routed[e]), g, u, layer, e))
        .collect::<Result<_>>()?;

    let group = |c: &[Codebook]| -> Vec<ExpertCodebooks> {
        c.chunks(3).map(|t| (t[0].clone(), t[1].clone(), t[2].clone())).collect()
    };
    let name = format!("layer{layer}.moe");
    let (cbs, trajectory) = alternate(
        &format!("accf {name}"),
        init,
        &targets,
        cfg,
        |c| super::loss::accf_loss_moe(calib, &group(c), cfg.lambda),
        |c| {
            Ok(super::loss::moe_centroid_grads(calib, &group(c))?
                .into_iter()
                .flat_map(|(g, u, d)| [g, u, d])
                .collect())
        },
        |c| {
            (0..originals.len())
                .into_par_iter()
                .map(|e| {
                    let xt = calib.x_tilde.select_rows(&routed[e]);
                    let xc = x_clean.select_rows(&routed[e]);
                    let io = assignment_scales(&xt, &xc)?;
                    let (gc, uc) = (c[3 * e].reconstruct(), c[3 * e + 1].reconstruct());
                    let hid = expert_hidden(&xt, &gc, &uc, layer, e)?;
                    let down = assignment_scales(&hid, &clean_hidden[e])?;
                    Ok(vec![io.clone(), io, down])
                })
                .collect::<Result<Vec<_>>>()
                .map(|v| v.into_iter().flatten().collect())
        },
    )?;
    Ok((group(&cbs), SiteReport { name, trajectory }))
}

/// Everything recorded while clustering a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationReport {
    pub sites: Vec<SiteReport>,
}

fn select_calibration(x: &Matrix, n: usize) -> Matrix {
    if n == 0 || n >= x.rows() {
        x.clone()
    } else {
        x.select_rows(&(0..n).collect::<Vec<_>>())
    }
}

/// Clusters every attention projection and expert weight, front to back.
///
/// `x` must already be in the model's input frame. Reference activations
/// come from `w` itself without quantization. Each site sees inputs
/// produced by the already-clustered upstream weights with activation
/// fake-quant; the router stays full precision.
pub fn calibrate_model(
    w: &ModelWeights,
    x: &Matrix,
    cfg: &ACCFConfig,
    rng: &RngState,
) -> Result<(ModelWeights, CalibrationReport)> {
    cfg.validate()?;
    w.require_unapplied(STAGE_ACCF)?;
    w.require_dense("clustering")?;
    let x = select_calibration(x, cfg.calib_tokens);
    let quant = cfg.abits.map(ActQuant::new);
    let (_, reference) = forward(w, &x, true, None)?;
    let reference = reference.expect("trace requested");

    let mut cur = w.clone();
    let mut report = CalibrationReport::default();
    let mut h = x.clone();
    let mc = w.config;
    for l in 0..mc.n_layers {
        let rf = &reference.layers[l];
        let trace = |m: &ModelWeights, h: &Matrix| -> Result<_> {
            Ok(layer_forward(&m.layers[l], &mc, l, h, quant, true)?.1.expect("trace requested"))
        };

        let tr = trace(&cur, &h)?;
        let qkv: Vec<(Codebook, SiteReport)> = [Site::Q, Site::K, Site::V]
            .par_iter()
            .map(|&s| {
                let id = SiteId::attn(l, s);
                calibrate_layer(id, &w.get(id).weight, &rf.attn_in, &tr.attn_in, cfg, rng)
            })
            .collect::<Result<_>>()?;
        for (s, (cb, rep)) in [Site::Q, Site::K, Site::V].into_iter().zip(qkv) {
            *cur.get_mut(SiteId::attn(l, s)) = Linear::clustered(cb);
            report.sites.push(rep);
        }

        let tr = trace(&cur, &h)?;
        let id = SiteId::attn(l, Site::Out);
        let (cb, rep) = calibrate_layer(id, &w.get(id).weight, &rf.out_in, &tr.out_in, cfg, rng)?;
        *cur.get_mut(id) = Linear::clustered(cb);
        report.sites.push(rep);

        let tr = trace(&cur, &h)?;
        let calib = MoeBlockCalib {
            x_tilde: tr.moe_in.clone(),
            y: rf.moe_out.clone(),
            pi: rf.router_probs.clone(),
            pi_tilde: tr.router_probs.clone(),
            selected: tr.selected.clone(),
            weights: tr.routing_weights.clone(),
        };
        let originals: Vec<ExpertMats> = w.layers[l]
            .experts
            .iter()
            .map(|e| (e.gate.weight.clone(), e.up.weight.clone(), e.down.weight.clone()))
            .collect();
        let (cbs, rep) = calibrate_moe_block(l, &originals, &calib, &rf.moe_in, cfg, rng)?;
        for (e, (g, u, d)) in cbs.into_iter().enumerate() {
            *cur.get_mut(SiteId::expert(l, e, Site::Gate)) = Linear::clustered(g);
            *cur.get_mut(SiteId::expert(l, e, Site::Up)) = Linear::clustered(u);
            *cur.get_mut(SiteId::expert(l, e, Site::Down)) = Linear::clustered(d);
        }
        report.sites.push(rep);

        h = layer_forward(&cur.layers[l], &mc, l, &h, quant, false)?.0;
    }
    let group = cfg.group.map_or("row".to_string(), |g| g.to_string());
    cur.mark_stage(
        STAGE_ACCF,
        format!("k={} group={} iterations={} lambda={}", cfg.k, group, cfg.iterations, cfg.lambda),
    )?;
    Ok((cur, report))
}
