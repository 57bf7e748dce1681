//! Permutation-based outlier grouping.
//!
//! Columns of the downstream matrix are reordered so that every clustering
//! group of `g` columns mixes one high-variance subgroup with `n − 1`
//! low-variance ones. The permutation is folded into the adjacent weights,
//! which leaves the model function unchanged.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{DecoderLayerWeights, ModelWeights, STAGE_POG};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PogTarget {
    Expert(usize),
    Head(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPlan {
    /// `perm[j]` is the original index placed at position `j`.
    pub perm: Vec<usize>,
    pub g: usize,
    pub g_s: usize,
    pub target: PogTarget,
}

impl PermutationPlan {
    pub fn identity(len: usize, g: usize, g_s: usize, target: PogTarget) -> Self {
        Self {
            perm: (0..len).collect(),
            g,
            g_s,
            target,
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.len() / self.g
    }

    pub fn n_subgroups(&self) -> usize {
        self.len() / self.g_s
    }

    pub fn is_bijection(&self) -> bool {
        is_bijection(&self.perm)
    }
}

pub fn is_bijection(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupStats {
    /// Mean absolute value of each column.
    pub s: Vec<f64>,
    /// Column indices of each subgroup, in sorted-`s` order.
    pub groups: Vec<Vec<usize>>,
    /// Mean over rows of the within-subgroup standard deviation.
    pub v: Vec<f64>,
}

fn check_sizes(len: usize, g: usize, g_s: usize) -> Result<()> {
    if g == 0 || g_s == 0 {
        return Err(Error::Config("pog group sizes must be positive".into()));
    }
    if g % g_s != 0 {
        return Err(Error::Config(format!("pog.g_s = {g_s} does not divide pog.g = {g}")));
    }
    if len % g != 0 {
        return Err(Error::Config(format!("pog.g = {g} does not divide the permuted dimension {len}")));
    }
    Ok(())
}

/// Stable argsort; equal keys keep their original order.
fn argsort(keys: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = keys[a].total_cmp(&keys[b]);
        if descending {
            ord.reverse()
        } else {
            ord
        }
    });
    idx
}

/// Population standard deviation of `w[r, cols]` for one row.
fn row_std(w: &Matrix, r: usize, cols: &[usize]) -> f64 {
    let row = w.row(r);
    let n = cols.len() as f64;
    let mean = cols.iter().map(|&c| row[c]).sum::<f64>() / n;
    let var = cols.iter().map(|&c| (row[c] - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

fn mean_row_std(w: &Matrix, cols: &[usize]) -> f64 {
    (0..w.rows()).map(|r| row_std(w, r, cols)).sum::<f64>() / w.rows() as f64
}

pub fn subgroup_stats(w: &Matrix, g_s: usize) -> Result<SubgroupStats> {
    check_sizes(w.cols(), g_s, g_s)?;
    if w.rows() == 0 {
        return Err(Error::Precondition("pog statistics need at least one row".into()));
    }
    let rows = w.rows() as f64;
    let mut s = vec![0.0; w.cols()];
    for row in w.row_iter() {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v.abs();
        }
    }
    for v in &mut s {
        *v /= rows;
    }
    let order = argsort(&s, true);
    let groups: Vec<Vec<usize>> = order.chunks(g_s).map(<[usize]>::to_vec).collect();
    let v = groups.iter().map(|cols| mean_row_std(w, cols)).collect();
    Ok(SubgroupStats { s, groups, v })
}

/// Column order pairing each high-variance subgroup with the `n − 1`
/// lowest-variance subgroups not yet used.
pub fn pog_order(w: &Matrix, g: usize, g_s: usize) -> Result<PermutationPlan> {
    pog_order_for(w, g, g_s, PogTarget::Expert(0))
}

fn pog_order_for(w: &Matrix, g: usize, g_s: usize, target: PogTarget) -> Result<PermutationPlan> {
    check_sizes(w.cols(), g, g_s)?;
    let stats = subgroup_stats(w, g_s)?;
    let n_g = w.cols() / g;
    let n = g / g_s;
    let mut perm = Vec::with_capacity(w.cols());
    for group in subgroup_schedule(&stats.v, n_g, n) {
        for sub in group {
            perm.extend_from_slice(&stats.groups[sub]);
        }
    }
    Ok(PermutationPlan { perm, g, g_s, target })
}

/// Subgroup ids of each clustering group: the `i`-th largest variance
/// followed by the next `n − 1` smallest. The ascending pass only draws
/// from subgroups the descending pass did not take, so tied variances
/// cannot produce a repeated id.
fn subgroup_schedule(v: &[f64], n_g: usize, n: usize) -> Vec<Vec<usize>> {
    let desc = argsort(v, true);
    let leaders = &desc[..n_g];
    let asc: Vec<usize> = argsort(v, false)
        .into_iter()
        .filter(|sub| !leaders.contains(sub))
        .collect();
    leaders
        .iter()
        .enumerate()
        .map(|(i, &lead)| {
            let mut group = vec![lead];
            group.extend_from_slice(&asc[i * (n - 1)..(i + 1) * (n - 1)]);
            group
        })
        .collect()
}

/// `P[i][j] = 1` iff `i = perm[j]`, so `W·P` moves column `perm[j]` to `j`.
pub fn permutation_matrix(perm: &[usize]) -> Result<Matrix> {
    if !is_bijection(perm) {
        return Err(Error::Precondition("permutation is not a bijection".into()));
    }
    let n = perm.len();
    let mut p = Matrix::zeros(n, n);
    for (j, &i) in perm.iter().enumerate() {
        p[(i, j)] = 1.0;
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlans {
    pub experts: Vec<PermutationPlan>,
    pub heads: Vec<PermutationPlan>,
}

/// Plans for every expert's hidden dimension and every attention head.
pub fn plan_layer_pog(layer: &DecoderLayerWeights, d_head: usize, g: usize, g_s: usize) -> Result<LayerPlans> {
    let experts = layer
        .experts
        .par_iter()
        .enumerate()
        .map(|(e, ex)| pog_order_for(&ex.down.weight.transpose(), g, g_s, PogTarget::Expert(e)))
        .collect::<Result<Vec<_>>>()?;
    let out_t = layer.wo.weight.transpose();
    if out_t.cols() % d_head != 0 {
        return Err(Error::shape("plan_layer_pog", format!("{} attention columns, head width {d_head}", out_t.cols())));
    }
    let heads = (0..out_t.cols() / d_head)
        .into_par_iter()
        .map(|h| pog_order_for(&out_t.col_block(h * d_head, (h + 1) * d_head), g, g_s, PogTarget::Head(h)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerPlans { experts, heads })
}

pub fn plan_model_pog(w: &ModelWeights, g: usize, g_s: usize) -> Result<Vec<LayerPlans>> {
    w.require_dense("POG planning")?;
    w.layers
        .iter()
        .map(|l| plan_layer_pog(l, w.config.d_head, g, g_s))
        .collect()
}

fn permute_cols(w: &Matrix, offset: usize, perm: &[usize]) -> Matrix {
    let mut out = w.clone();
    for r in 0..w.rows() {
        let src = w.row(r);
        let dst = out.row_mut(r);
        for (j, &p) in perm.iter().enumerate() {
            dst[offset + j] = src[offset + p];
        }
    }
    out
}

fn permute_rows(w: &Matrix, offset: usize, perm: &[usize]) -> Matrix {
    let mut out = w.clone();
    for (j, &p) in perm.iter().enumerate() {
        out.row_mut(offset + j).copy_from_slice(w.row(offset + p));
    }
    out
}

fn check_plan(plan: &PermutationPlan, len: usize) -> Result<()> {
    if plan.len() != len || !plan.is_bijection() {
        return Err(Error::shape(
            "fold_pog",
            format!("plan for {:?} is not a bijection over {len} indices", plan.target),
        ));
    }
    Ok(())
}

/// Folds the plans: gate and up columns and down rows per expert, and the
/// per-head block of the value columns and output rows.
pub fn fold_pog(w: &ModelWeights, plans: &[LayerPlans]) -> Result<ModelWeights> {
    w.require_unapplied(STAGE_POG)?;
    w.require_dense("POG folding")?;
    let cfg = &w.config;
    if plans.len() != w.layers.len() {
        return Err(Error::shape("fold_pog", format!("{} plans for {} layers", plans.len(), w.layers.len())));
    }
    let mut out = w.clone();
    for (layer, lp) in out.layers.iter_mut().zip(plans) {
        if lp.experts.len() != layer.experts.len() || lp.heads.len() != cfg.n_heads {
            return Err(Error::shape(
                "fold_pog",
                format!("{} expert / {} head plans", lp.experts.len(), lp.heads.len()),
            ));
        }
        for (ex, plan) in layer.experts.iter_mut().zip(&lp.experts) {
            check_plan(plan, cfg.d_ff)?;
            ex.gate.weight = permute_cols(&ex.gate.weight, 0, &plan.perm);
            ex.up.weight = permute_cols(&ex.up.weight, 0, &plan.perm);
            ex.down.weight = permute_rows(&ex.down.weight, 0, &plan.perm);
        }
        for (h, plan) in lp.heads.iter().enumerate() {
            check_plan(plan, cfg.d_head)?;
            let off = h * cfg.d_head;
            layer.wv.weight = permute_cols(&layer.wv.weight, off, &plan.perm);
            layer.wo.weight = permute_rows(&layer.wo.weight, off, &plan.perm);
        }
    }
    let (g, g_s) = plans
        .iter()
        .flat_map(|p| p.experts.iter().chain(&p.heads))
        .map(|p| (p.g, p.g_s))
        .next()
        .unwrap_or((0, 0));
    out.mark_stage(STAGE_POG, format!("g={g} g_s={g_s}"))?;
    Ok(out)
}

/// Sum over clustering groups of the variance of the row-wise standard
/// deviation profile, with columns taken in `perm` order.
pub fn grouping_spread(w: &Matrix, perm: &[usize], g: usize) -> f64 {
    perm.chunks(g)
        .map(|cols| {
            let profile: Vec<f64> = (0..w.rows()).map(|r| row_std(w, r, cols)).collect();
            let n = profile.len() as f64;
            let mean = profile.iter().sum::<f64>() / n;
            profile.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accf::{clustering_error, kmeans_init, KMeansConfig};
    use crate::model::{forward, generate_calibration, generate_synthetic_model, ModelConfig};
    use crate::rng::RngState;
    use proptest::prelude::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            d_head: 16,
            d_ff: 64,
            n_experts: 3,
            top_k: 2,
            n_layers: 2,
            n_calib: 64,
            seed: 5,
        }
    }

    #[test]
    fn identical_columns_give_a_fixed_bijection() {
        let w = Matrix::from_fn(3, 8, |r, _| r as f64 + 1.0);
        let plan = pog_order(&w, 4, 2).unwrap();
        assert_eq!(plan.perm, vec![0, 1, 4, 5, 2, 3, 6, 7]);
        let single = pog_order(&w, 4, 1).unwrap();
        assert!(single.is_bijection());
    }

    #[test]
    fn planted_high_variance_subgroups_are_split() {
        // Columns 0,1 and 4,5 vary strongly along rows; 2,3 and 6,7 are flat.
        let w = Matrix::from_fn(6, 8, |r, c| match c {
            0 | 4 => 5.0 * (r as f64 - 2.5),
            1 | 5 => -5.0 * (r as f64 - 2.5),
            _ => 0.01 * c as f64,
        });
        let plan = pog_order(&w, 4, 2).unwrap();
        assert!(plan.is_bijection());
        for group in plan.perm.chunks(4) {
            let high = group.chunks(2).filter(|sub| mean_row_std(&w, sub) > 1.0).count();
            assert_eq!(high, 1, "group {group:?}");
        }
    }

    #[test]
    fn schedule_partitions_subgroups() {
        for (g, g_s) in [(4, 1), (4, 2), (8, 2), (8, 4), (16, 2), (4, 4)] {
            let w = Matrix::gaussian(5, 32, 1.0, &RngState::new(g as u64), "w", g_s as u64);
            let stats = subgroup_stats(&w, g_s).unwrap();
            let (n_g, n) = (32 / g, g / g_s);
            let schedule = subgroup_schedule(&stats.v, n_g, n);
            let mut used: Vec<usize> = schedule.iter().flatten().copied().collect();
            used.sort_unstable();
            assert_eq!(used, (0..32 / g_s).collect::<Vec<_>>());
            // Without ties this is exactly the descending head paired with
            // consecutive ascending slices.
            let mut sorted = stats.v.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).any(|p| p[0] == p[1]) {
                continue;
            }
            let desc = argsort(&stats.v, true);
            let asc = argsort(&stats.v, false);
            for (i, group) in schedule.iter().enumerate() {
                assert_eq!(group[0], desc[i]);
                assert_eq!(&group[1..], &asc[i * (n - 1)..(i + 1) * (n - 1)]);
            }
        }
        // All variances tied.
        let schedule = subgroup_schedule(&[0.0; 8], 2, 4);
        assert_eq!(schedule, vec![vec![0, 2, 3, 4], vec![1, 5, 6, 7]]);
    }

    #[test]
    fn permutation_matrix_definition() {
        assert_eq!(permutation_matrix(&[0, 1, 2]).unwrap(), Matrix::identity(3));
        let p = permutation_matrix(&[1, 2, 0]).unwrap();
        for (j, i) in [1, 2, 0].into_iter().enumerate() {
            for r in 0..3 {
                assert_eq!(p[(r, j)], if r == i { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(p.t_matmul(&p).unwrap(), Matrix::identity(3));
        assert!(permutation_matrix(&[0, 0, 1]).is_err());

        let w = Matrix::gaussian(4, 3, 1.0, &RngState::new(1), "w", 0);
        assert_eq!(w.matmul(&p).unwrap(), permute_cols(&w, 0, &[1, 2, 0]));
        let wt = w.transpose();
        assert_eq!(p.t_matmul(&wt).unwrap(), permute_rows(&wt, 0, &[1, 2, 0]));
    }

    #[test]
    fn divisibility_errors() {
        let w = Matrix::zeros(2, 12);
        assert!(pog_order(&w, 8, 2).is_err());
        assert!(pog_order(&w, 6, 4).is_err());
        assert!(pog_order(&w, 6, 3).is_ok());
    }

    #[test]
    fn layer_plans_structure() {
        let cfg = small_cfg();
        let w = generate_synthetic_model(&cfg, 2, 10.0).unwrap();
        let plans = plan_model_pog(&w, 8, 2).unwrap();
        assert_eq!(plans.len(), 2);
        for lp in &plans {
            assert_eq!(lp.experts.len(), 3);
            assert_eq!(lp.heads.len(), 2);
            assert!(lp.experts.iter().all(|p| p.len() == 64 && p.is_bijection()));
            assert!(lp.heads.iter().all(|p| p.len() == 16 && p.is_bijection()));
        }
        assert_eq!(plans, plan_model_pog(&w, 8, 2).unwrap());

        let single = ModelConfig { n_heads: 1, d_head: 32, ..cfg };
        let w1 = generate_synthetic_model(&single, 0, 1.0).unwrap();
        let lp = plan_layer_pog(&w1.layers[0], 32, 8, 2).unwrap();
        assert_eq!(lp.heads.len(), 1);
        assert_eq!(lp.heads[0].len(), 32);
    }

    fn folded_error(fault: bool) -> f64 {
        let cfg = small_cfg();
        let w = generate_synthetic_model(&cfg, 2, 10.0).unwrap();
        let x = generate_calibration(&cfg, 32, &RngState::new(1));
        let plans = plan_model_pog(&w, 8, 2).unwrap();
        let mut folded = fold_pog(&w, &plans).unwrap();
        if fault {
            folded.layers[0].experts[0].up.weight = w.layers[0].experts[0].up.weight.clone();
        }
        let (a, _) = forward(&w, &x, false, None).unwrap();
        let (b, _) = forward(&folded, &x, false, None).unwrap();
        b.rel_error(&a).unwrap()
    }

    #[test]
    fn fold_preserves_function() {
        assert!(folded_error(false) < 1e-9);
    }

    #[test]
    fn permuting_gate_without_up_breaks_function() {
        assert!(folded_error(true) > 1e-3);
    }

    #[test]
    fn identity_plans_are_noop_and_stage_is_recorded() {
        let cfg = small_cfg();
        let w = generate_synthetic_model(&cfg, 0, 1.0).unwrap();
        let plans: Vec<LayerPlans> = (0..cfg.n_layers)
            .map(|_| LayerPlans {
                experts: (0..3).map(|e| PermutationPlan::identity(64, 8, 2, PogTarget::Expert(e))).collect(),
                heads: (0..2).map(|h| PermutationPlan::identity(16, 8, 2, PogTarget::Head(h))).collect(),
            })
            .collect();
        let folded = fold_pog(&w, &plans).unwrap();
        assert_eq!(folded.layers, w.layers);
        assert!(folded.has_stage(STAGE_POG));
        assert!(matches!(fold_pog(&folded, &plans), Err(Error::StageApplied(_))));

        let mut bad = plans.clone();
        bad[0].experts[1].perm[0] = 1;
        assert!(fold_pog(&w, &bad).is_err());
    }

    #[test]
    fn whole_row_clustering_ignores_order() {
        let cfg = small_cfg();
        let w = generate_synthetic_model(&cfg, 2, 10.0).unwrap();
        let plans = plan_model_pog(&w, 8, 2).unwrap();
        let folded = fold_pog(&w, &plans).unwrap();
        let rng = RngState::new(11);
        for e in 0..3 {
            let before = &w.layers[0].experts[e].down.weight;
            let after = &folded.layers[0].experts[e].down.weight;
            let cb0 = kmeans_init(before, None, 8, &rng, KMeansConfig::default()).unwrap();
            let cb1 = kmeans_init(after, None, 8, &rng, KMeansConfig::default()).unwrap();
            let (e0, e1) = (clustering_error(before, &cb0), clustering_error(after, &cb1));
            assert!((e0 - e1).abs() <= 1e-12 * e0.max(1.0), "{e0} vs {e1}");
        }
    }

    #[test]
    fn planted_two_scale_grouping_improves() {
        // Columns 0..4 swing with the row index, 4..8 are nearly flat; the
        // natural order puts both high-variance subgroups in one group.
        let w = Matrix::from_fn(6, 8, |r, c| match c {
            0 | 2 => 5.0 * (r as f64 - 2.5),
            1 | 3 => -5.0 * (r as f64 - 2.5),
            _ => 0.01 * c as f64,
        });
        let natural: Vec<usize> = (0..8).collect();
        let plan = pog_order(&w, 4, 2).unwrap();
        let before = grouping_spread(&w, &natural, 4);
        let after = grouping_spread(&w, &plan.perm, 4);
        assert!(after <= before, "{after} > {before}");
    }

    proptest! {
        #[test]
        fn order_is_always_a_bijection(
            seed in 0u64..1000,
            rows in 1usize..6,
            (g, g_s) in prop_oneof![Just((4usize, 1usize)), Just((4, 2)), Just((8, 2)), Just((8, 8)), Just((6, 3))],
            groups in 1usize..5,
        ) {
            let w = Matrix::gaussian(rows, g * groups, 1.0, &RngState::new(seed), "w", 0);
            let plan = pog_order(&w, g, g_s).unwrap();
            prop_assert!(plan.is_bijection());
            prop_assert_eq!(plan.len(), g * groups);
        }
    }
}
