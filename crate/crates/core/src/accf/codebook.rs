use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::RngState;

/// Per-output-channel codebook over a `d_in × d_out` weight.
///
/// Output channel `i` is column `i` of the weight. Its input positions are
/// split into groups of `group` consecutive rows, each with `k` centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub d_in: usize,
    pub d_out: usize,
    pub group: usize,
    pub k: usize,
    /// `[out][group][k]`.
    pub centroids: Vec<f64>,
    /// `[out][in]`, each `< k`.
    pub ids: Vec<u8>,
}

impl Codebook {
    pub fn n_groups(&self) -> usize {
        self.d_in / self.group
    }

    pub fn centroid(&self, i: usize, grp: usize, c: usize) -> f64 {
        self.centroids[(i * self.n_groups() + grp) * self.k + c]
    }

    pub fn id(&self, i: usize, j: usize) -> u8 {
        self.ids[i * self.d_in + j]
    }

    /// Centroid slice of output channel `i`, group `grp`.
    pub fn group_centroids(&self, i: usize, grp: usize) -> &[f64] {
        let at = (i * self.n_groups() + grp) * self.k;
        &self.centroids[at..at + self.k]
    }

    pub fn validate(&self) -> Result<()> {
        if self.group == 0 || self.d_in % self.group != 0 {
            return Err(Error::Config(format!(
                "group {} does not divide input dimension {}",
                self.group, self.d_in
            )));
        }
        if self.k == 0 || self.k > 16 {
            return Err(Error::Config(format!("centroid count {} not in 1..=16", self.k)));
        }
        if self.centroids.len() != self.d_out * self.n_groups() * self.k
            || self.ids.len() != self.d_out * self.d_in
        {
            return Err(Error::shape("Codebook", "centroid or id buffer length"));
        }
        if self.ids.iter().any(|&a| usize::from(a) >= self.k) {
            return Err(Error::Precondition("assignment id beyond centroid count".into()));
        }
        Ok(())
    }

    /// `W_c[j, i] = C[i, j / g, A[i, j]]`.
    pub fn reconstruct(&self) -> Matrix {
        let ng = self.n_groups();
        Matrix::from_fn(self.d_in, self.d_out, |j, i| {
            self.centroids[(i * ng + j / self.group) * self.k + usize::from(self.ids[i * self.d_in + j])]
        })
    }

    /// Sums a dense `d_in × d_out` gradient into centroid slots.
    pub fn scatter(&self, grad_w: &Matrix) -> Vec<f64> {
        let ng = self.n_groups();
        let mut g = vec![0.0; self.centroids.len()];
        for j in 0..self.d_in {
            let row = grad_w.row(j);
            for (i, &v) in row.iter().enumerate() {
                g[(i * ng + j / self.group) * self.k + usize::from(self.ids[i * self.d_in + j])] += v;
            }
        }
        g
    }

    /// Rounds centroids to `f32`, the precision they are stored and served in.
    pub fn round_to_f32(&mut self) {
        for c in &mut self.centroids {
            *c = f64::from(*c as f32);
        }
    }
}

/// Result of 1-D k-means on one group.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans1d {
    pub centroids: Vec<f64>,
    pub assignments: Vec<u8>,
    pub objective: f64,
}

fn nearest(v: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, &m) in centroids.iter().enumerate() {
        let d = (v - m) * (v - m);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// k-means++ seeding then Lloyd iterations on scalars.
///
/// Values are sorted first, so the result depends only on the multiset of
/// `values` (and the generator), not on their order.
pub fn kmeans_1d(values: &[f64], k: usize, max_iters: usize, tol: f64, rng: &mut ChaCha20Rng) -> KMeans1d {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let pts: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let mut centroids = Vec::with_capacity(k);
    centroids.push(pts[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = pts.iter().map(|&p| (p - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            // Fewer distinct values than centroids; duplicates are allowed.
            0
        };
        let c = pts[pick];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(&pts) {
            *d = d.min((p - c).powi(2));
        }
    }

    let mut assign = vec![0usize; n];
    let mut prev = f64::INFINITY;
    let mut objective = f64::INFINITY;
    for _ in 0..max_iters.max(1) {
        for (a, &p) in assign.iter_mut().zip(&pts) {
            *a = nearest(p, &centroids);
        }
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for (&a, &p) in assign.iter().zip(&pts) {
            sum[a] += p;
            cnt[a] += 1;
        }
        for c in 0..k {
            if cnt[c] > 0 {
                centroids[c] = sum[c] / cnt[c] as f64;
            } else {
                // Reseed on the point worst served by its current centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (pts[a] - centroids[assign[a]]).powi(2);
                        let db = (pts[b] - centroids[assign[b]]).powi(2);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                centroids[c] = pts[far];
                assign[far] = c;
            }
        }
        for (a, &p) in assign.iter_mut().zip(&pts) {
            *a = nearest(p, &centroids);
        }
        objective = assign.iter().zip(&pts).map(|(&a, &p)| (p - centroids[a]).powi(2)).sum();
        let rel = (prev - objective).abs() / prev.max(f64::MIN_POSITIVE);
        if objective == 0.0 || rel < tol {
            break;
        }
        prev = objective;
    }

    let mut assignments = vec![0u8; n];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = assign[pos] as u8;
    }
    KMeans1d {
        centroids,
        assignments,
        objective,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 25,
            tol: 1e-6,
        }
    }
}

/// Independent k-means per (output channel, group). `group = None` clusters
/// the whole input dimension at once.
pub fn kmeans_init(w: &Matrix, group: Option<usize>, k: usize, rng: &RngState, cfg: KMeansConfig) -> Result<Codebook> {
    let (d_in, d_out) = w.shape();
    let group = group.unwrap_or(d_in);
    let mut cb = Codebook {
        d_in,
        d_out,
        group,
        k,
        centroids: vec![0.0; 0],
        ids: vec![0; d_in * d_out],
    };
    if group == 0 || d_in % group != 0 {
        return Err(Error::Config(format!("group {group} does not divide input dimension {d_in}")));
    }
    if k == 0 || k > 16 {
        return Err(Error::Config(format!("centroid count {k} not in 1..=16")));
    }
    let ng = d_in / group;
    cb.centroids = vec![0.0; d_out * ng * k];
    let wt = w.transpose();
    for i in 0..d_out {
        let col = wt.row(i);
        for grp in 0..ng {
            let vals = &col[grp * group..(grp + 1) * group];
            let mut r = rng.stream("kmeans", (i * ng + grp) as u64);
            let km = kmeans_1d(vals, k, cfg.max_iters, cfg.tol, &mut r);
            let at = (i * ng + grp) * k;
            cb.centroids[at..at + k].copy_from_slice(&km.centroids);
            cb.ids[i * d_in + grp * group..i * d_in + (grp + 1) * group].copy_from_slice(&km.assignments);
        }
    }
    Ok(cb)
}

/// Sum of squared reconstruction errors, `‖W − W_c‖²_F`.
pub fn clustering_error(w: &Matrix, cb: &Codebook) -> f64 {
    w.sub(&cb.reconstruct()).map(|m| m.frobenius_sq()).unwrap_or(f64::INFINITY)
}
