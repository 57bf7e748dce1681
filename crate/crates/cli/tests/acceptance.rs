use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use codequant::accf::{
    accf_loss_moe, assignment_scales, kmeans_init, moe_centroid_grads, reassign, AssignmentScales, Codebook,
    ExpertCodebooks, KMeansConfig, LocalObjective, MoeBlockCalib,
};
use codequant::aos::{
    aos_grad, aos_grad_with_target, aos_loss, cayley, fold_norm_gains, fold_rotation, optimize_rotation,
    RotationParams,
};
use codequant::linalg::random_orthogonal;
use codequant::lutgemm::{lut_gemm, lut_gemm_blocked, random_problem, reference_gemm, GemmShape};
use codequant::model::{
    calibration_splits, calibration_splits_with, forward, generate_synthetic_model, route, softmax, CalibRecipe,
    ModelConfig, ModelWeights,
};
use codequant::pipeline::{EvalReport, Mode, PipelineConfig};
use codequant::pog::{fold_pog, grouping_spread, plan_model_pog, pog_order, subgroup_stats};
use codequant::quant::{fake_quant, quantize_activations, QuantSpec};
use codequant::{Matrix, RngState};
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn criterion_1() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let m = Matrix::gaussian(64, 64, 0.5, &RngState::new(1000 + i), "m", 0);
        let r = cayley(&m).unwrap();
        worst = worst.max(r.orthogonality_defect().unwrap());
    }
    outcome(worst < 1e-10, format!("max ||R^T R - I||_F = {worst:e}"))
}

/// Final hidden states of `w` on `x`, mapped back to the original frame.
fn final_hidden(w: &ModelWeights, x: &Matrix) -> Matrix {
    let (h, _) = forward(w, &w.prepare_input(x).unwrap(), false, None).unwrap();
    w.restore_output(&h).unwrap()
}

fn criterion_2() -> Outcome {
    let cfg = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_experts: 4,
        top_k: 2,
        seed: 11,
        ..ModelConfig::default()
    };
    let w = generate_synthetic_model(&cfg, 4, 5.0).unwrap();
    let (_, x) = calibration_splits(&cfg, 8, 64);
    let base = final_hidden(&w, &x);

    let gains = fold_norm_gains(&w).unwrap();
    let e_gain = final_hidden(&gains, &x).rel_error(&base).unwrap();

    let r = random_orthogonal(64, &RngState::new(11).derive("invariance", 0));
    let rotated = fold_rotation(&gains, &r, "random").unwrap();
    let (h_rot, _) = forward(&rotated, &x.matmul(&r).unwrap(), false, None).unwrap();
    let e_rot = h_rot.rel_error(&base.matmul(&r).unwrap()).unwrap();

    let plans = plan_model_pog(&w, 16, 4).unwrap();
    let permuted = fold_pog(&w, &plans).unwrap();
    let e_pog = final_hidden(&permuted, &x).rel_error(&base).unwrap();

    let pass = e_rot < 1e-9 && e_pog < 1e-9 && e_gain < 1e-9;
    outcome(pass, format!("rotation {e_rot:e}, pog {e_pog:e}, norm gains {e_gain:e}"))
}

fn fd_matrix(m: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let h = 1e-5;
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        let mut a = m.clone();
        a[(i, j)] += h;
        let mut b = m.clone();
        b[(i, j)] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    })
}

fn moe_block(seed: u64) -> (MoeBlockCalib, Vec<ExpertCodebooks>) {
    let rng = RngState::new(seed);
    let (n, d, f, e) = (12, 6, 8, 2);
    let x = Matrix::gaussian(n, d, 1.0, &rng, "x", 0);
    let router = Matrix::gaussian(d, e, 1.0, &rng, "router", 0);
    let logits = x.matmul(&router).unwrap();
    let noisy = logits.add(&Matrix::gaussian(n, e, 0.2, &rng, "noise", 0)).unwrap();
    let probs = |m: &Matrix| Matrix::from_rows(&m.row_iter().map(softmax).collect::<Vec<_>>());
    let (mut selected, mut weights) = (Vec::new(), Vec::new());
    for t in 0..n {
        let (s, w) = route(noisy.row(t), 1);
        selected.push(s);
        weights.push(w);
    }
    let calib = MoeBlockCalib {
        x_tilde: x,
        y: Matrix::gaussian(n, d, 0.5, &rng, "y", 0),
        pi: probs(&logits),
        pi_tilde: probs(&noisy),
        selected,
        weights,
    };
    let cbs = (0..e as u64)
        .map(|i| {
            let k = |w: Matrix, tag: &str| kmeans_init(&w, None, 4, &rng.derive(tag, i), KMeansConfig::default()).unwrap();
            (
                k(Matrix::gaussian(d, f, 1.0, &rng, "g", i), "kg"),
                k(Matrix::gaussian(d, f, 1.0, &rng, "u", i), "ku"),
                k(Matrix::gaussian(f, d, 1.0, &rng, "dn", i), "kd"),
            )
        })
        .collect();
    (calib, cbs)
}

fn part_of<T>(t: &(T, T, T), part: usize) -> &T {
    match part {
        0 => &t.0,
        1 => &t.1,
        _ => &t.2,
    }
}

fn part_of_mut<T>(t: &mut (T, T, T), part: usize) -> &mut T {
    match part {
        0 => &mut t.0,
        1 => &mut t.1,
        _ => &mut t.2,
    }
}

fn criterion_3() -> Outcome {
    let rng = RngState::new(3);
    let x = Matrix::gaussian(32, 16, 1.0, &rng, "x", 0);
    let m = Matrix::gaussian(16, 16, 0.3, &rng, "m", 0);
    let p = RotationParams::from_m(m.clone()).unwrap();

    // Smooth proxy: a fixed, unquantized target.
    let t = Matrix::gaussian(32, 16, 1.0, &rng, "t", 0);
    let loss_t = |mm: &Matrix| x.matmul(&cayley(mm).unwrap()).unwrap().sub(&t).unwrap().frobenius_sq();
    let e_smooth = aos_grad_with_target(&p, &x, &t)
        .unwrap()
        .rel_error(&fd_matrix(&m, loss_t))
        .unwrap();

    // Surrogate with the quantized tensor frozen at the current rotation.
    let frozen = fake_quant(&x.matmul(&p.r).unwrap(), QuantSpec::per_token(4)).unwrap();
    let loss_q = |mm: &Matrix| x.matmul(&cayley(mm).unwrap()).unwrap().sub(&frozen).unwrap().frobenius_sq();
    let e_frozen = aos_grad(&m, &x, 4).unwrap().rel_error(&fd_matrix(&m, loss_q)).unwrap();

    let w = Matrix::gaussian(8, 6, 1.0, &rng, "w", 0);
    let xl = Matrix::gaussian(20, 8, 1.0, &rng, "xl", 0);
    let xt = xl.map(|v| (v * 4.0).round() / 4.0);
    let cb = kmeans_init(&w, Some(4), 3, &rng, KMeansConfig::default()).unwrap();
    let obj = LocalObjective::new(&xl, &xt, &w).unwrap();
    let g = obj.centroid_grad(&cb).unwrap();
    let h = 1e-5;
    let mut e_local = 0.0f64;
    for c in 0..cb.centroids.len() {
        let bump = |delta: f64| {
            let mut b = cb.clone();
            b.centroids[c] += delta;
            obj.loss(&b).unwrap()
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        if g[c].abs() > 1e-8 || fd.abs() > 1e-8 {
            e_local = e_local.max(rel(g[c], fd));
        }
    }

    let (calib, cbs) = moe_block(3);
    let grads = moe_centroid_grads(&calib, &cbs).unwrap();
    let mut e_moe = 0.0f64;
    for e in 0..cbs.len() {
        for part in 0..3 {
            for (c, &ga) in part_of(&grads[e], part).iter().enumerate() {
                let bump = |delta: f64| {
                    let mut v = cbs.clone();
                    part_of_mut(&mut v[e], part).centroids[c] += delta;
                    accf_loss_moe(&calib, &v, 1.0).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                if ga.abs() > 1e-8 || fd.abs() > 1e-8 {
                    e_moe = e_moe.max(rel(ga, fd));
                }
            }
        }
    }

    let pass = e_smooth < 1e-5 && e_frozen < 1e-5 && e_local < 1e-5 && e_moe < 1e-4;
    outcome(
        pass,
        format!("aos smooth {e_smooth:e}, aos frozen {e_frozen:e}, centroid local {e_local:e}, centroid moe {e_moe:e}"),
    )
}

fn criterion_4() -> Outcome {
    let base = PipelineConfig::default();
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in SEEDS {
        let mc = ModelConfig { seed, ..base.model };
        let (calib, held) = calibration_splits_with(&mc, &CalibRecipe::default(), base.aos.calib_tokens, 256);
        let res = optimize_rotation(&calib, &base.aos, &RngState::new(seed).derive("aos", 0)).unwrap();
        let fresh = random_orthogonal(mc.d_model, &RngState::new(seed).derive("fresh-rotation", 0));
        let opt = aos_loss(&res.params.r, &held, base.aos.bits).unwrap();
        let rnd = aos_loss(&fresh, &held, base.aos.bits).unwrap();
        if opt < rnd {
            wins += 1;
        }
        lines.push(format!("seed {seed}: {opt:.1} vs {rnd:.1}"));
    }
    outcome(wins == SEEDS.len(), format!("{wins}/5 optimized < fresh random; {}", lines.join(", ")))
}

fn brute_force_assign(w: &Matrix, cb: &Codebook, s: &AssignmentScales) -> Vec<u8> {
    let mut ids = Vec::with_capacity(cb.ids.len());
    for i in 0..cb.d_out {
        for j in 0..cb.d_in {
            let costs: Vec<f64> = cb
                .group_centroids(i, j / cb.group)
                .iter()
                .map(|&c| {
                    if s.d1[j] == 0.0 {
                        (c - w[(j, i)]).abs()
                    } else {
                        (s.d1[j] * c - s.d2[j] * w[(j, i)]).powi(2)
                    }
                })
                .collect();
            let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
            ids.push(costs.iter().position(|&c| c == min).unwrap() as u8);
        }
    }
    ids
}

fn criterion_5() -> Outcome {
    let mut mismatches = 0;
    let mut fallback_cases = 0;
    for inst in 0..1000u64 {
        let rng = RngState::new(50_000 + inst);
        let mut r = rng.stream("shape", 0);
        let d_in = [4, 6, 8, 12][r.random_range(0..4)];
        let d_out = r.random_range(1..5);
        let group = [d_in, 2][r.random_range(0..2)];
        let k = r.random_range(1..17);
        let w = Matrix::gaussian(d_in, d_out, 1.0, &rng, "w", 0);
        let n_groups = d_in / group;
        let mut centroids: Vec<f64> = Matrix::gaussian(d_out * n_groups, k, 1.0, &rng, "c", 0).into_vec();
        if inst % 5 == 0 && k > 1 {
            centroids[1] = centroids[0];
        }
        let ids = (0..d_out * d_in).map(|_| r.random_range(0..k) as u8).collect();
        let cb = Codebook {
            d_in,
            d_out,
            group,
            k,
            centroids,
            ids,
        };
        let mut x = Matrix::gaussian(16, d_in, 1.0, &rng, "x", 0);
        if inst % 3 == 0 {
            for t in 0..16 {
                x[(t, 0)] = 0.0;
            }
            fallback_cases += 1;
        }
        let xt = x.map(|v| (v * 2.0).round() / 2.0);
        let s = assignment_scales(&xt, &x).unwrap();
        if reassign(&w, &cb, &s).unwrap().ids != brute_force_assign(&w, &cb, &s) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over 1000 instances ({fallback_cases} with a D1 = 0 channel)"),
    )
}

struct Runs(HashMap<(String, usize, u64, u64), EvalReport>);

impl Runs {
    fn get(&mut self, mode: Mode, k: usize, lambda: f64, seed: u64) -> &EvalReport {
        let key = (mode.name().to_string(), k, lambda.to_bits(), seed);
        self.0.entry(key).or_insert_with(|| {
            let mut cfg = PipelineConfig {
                mode,
                k,
                ..PipelineConfig::default()
            };
            cfg.accf.lambda = lambda;
            codequant::pipeline::run_pipeline(&cfg.with_seed(seed)).unwrap().0
        })
    }
}

fn criterion_6(runs: &mut Runs) -> Outcome {
    let mut site_violations = 0;
    let mut sites = 0;
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cq = runs.get(Mode::CodeQuant, 16, 1.0, seed).clone();
        for s in &cq.sites {
            sites += 1;
            if s.best() > s.initial() {
                site_violations += 1;
            }
        }
        let km = runs.get(Mode::KMeansOnly, 16, 1.0, seed);
        let (a, b) = (cq.moe_block_loss().unwrap(), km.moe_block_loss().unwrap());
        if a < b {
            wins += 1;
        }
        lines.push(format!("seed {seed}: {a:.3e} vs {b:.3e}"));
    }
    outcome(
        site_violations == 0 && wins == SEEDS.len(),
        format!(
            "{site_violations}/{sites} sites above k-means init; MoE-block loss codequant < kmeans-only {wins}/5 ({})",
            lines.join(", ")
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut bijections = true;
    let mut partitions = true;
    for inst in 0..200u64 {
        let rng = RngState::new(70_000 + inst);
        let mut r = rng.stream("shape", 0);
        let (g, g_s) = [(4, 1), (4, 2), (8, 2), (8, 4), (16, 4), (16, 16), (6, 3)][r.random_range(0..7)];
        let cols = g * r.random_range(1..6);
        let w = Matrix::gaussian(r.random_range(1..8), cols, 1.0, &rng, "w", 0);
        let plan = pog_order(&w, g, g_s).unwrap();
        bijections &= plan.is_bijection();
        let stats = subgroup_stats(&w, g_s).unwrap();
        let mut chunks: Vec<Vec<usize>> = plan
            .perm
            .chunks(g_s)
            .map(|c| {
                let mut c = c.to_vec();
                c.sort_unstable();
                c
            })
            .collect();
        let mut subgroups: Vec<Vec<usize>> = stats
            .groups
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.sort_unstable();
                c
            })
            .collect();
        chunks.sort();
        subgroups.sort();
        partitions &= chunks == subgroups;
    }

    let mut kmeans_gap = 0.0f64;
    for seed in 0..5u64 {
        let rng = RngState::new(seed);
        let down = Matrix::gaussian(64, 16, 1.0, &rng, "down", 0);
        let plan = pog_order(&down.transpose(), 16, 4).unwrap();
        let permuted = down.select_rows(&plan.perm);
        let cfg = KMeansConfig::default();
        let a = kmeans_init(&down, None, 16, &rng, cfg).unwrap();
        let b = kmeans_init(&permuted, None, 16, &rng, cfg).unwrap();
        let ea = codequant::accf::clustering_error(&down, &a);
        let eb = codequant::accf::clustering_error(&permuted, &b);
        kmeans_gap = kmeans_gap.max(rel(ea, eb));
    }

    let w = Matrix::from_fn(6, 8, |r, c| match c {
        0 | 2 => 5.0 * (r as f64 - 2.5),
        1 | 3 => -5.0 * (r as f64 - 2.5),
        _ => 0.01 * c as f64,
    });
    let natural: Vec<usize> = (0..8).collect();
    let before = grouping_spread(&w, &natural, 4);
    let after = grouping_spread(&w, &pog_order(&w, 4, 2).unwrap().perm, 4);

    let pass = bijections && partitions && kmeans_gap <= 1e-12 && after < before;
    outcome(
        pass,
        format!(
            "bijection {bijections}, partition {partitions}, embedding-wise k-means gap {kmeans_gap:e}, spread {before:.3} -> {after:.3}"
        ),
    )
}

fn bits_equal(a: &Matrix<f32>, b: &Matrix<f32>) -> bool {
    a.shape() == b.shape() && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_8() -> Outcome {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let mut instances = 0;
    let mut failures = Vec::new();
    let mut zero_rows = 0;
    'outer: for &n in &[1usize, 7, 64, 256] {
        for &d in &[16usize, 64, 256] {
            for g in [d, 16, 64] {
                if g > d {
                    continue;
                }
                for rep in 0..7u64 {
                    if instances == 200 {
                        break 'outer;
                    }
                    let seed = instances as u64 * 31 + rep;
                    let rng = RngState::new(seed);
                    let d_out = [8, 24, 64][(seed % 3) as usize];
                    let shape = GemmShape { n, d_in: d, d_out, g };
                    let (_, pw) = random_problem(shape, &rng).unwrap();
                    let mut x = Matrix::gaussian(n, d, 1.0, &rng, "x", 1);
                    let mut zr = rng.stream("zero-rows", 0);
                    for t in 0..n {
                        if t == 0 && rep % 2 == 0 || zr.random_range(0..8) == 0 {
                            x.row_mut(t).fill(0.0);
                            zero_rows += 1;
                        }
                    }
                    let qa = quantize_activations(&x, QuantSpec::per_token(4)).unwrap();
                    let want = reference_gemm(&qa, &pw).unwrap();
                    let lut = one.install(|| lut_gemm(&qa, &pw).unwrap());
                    let ok = bits_equal(&lut, &want)
                        && [1usize, 5, 64, 1000]
                            .iter()
                            .all(|&tb| bits_equal(&three.install(|| lut_gemm_blocked(&qa, &pw, tb).unwrap()), &want));
                    if !ok {
                        failures.push(format!("N={n} d={d} g={g} seed={seed}"));
                    }
                    instances += 1;
                }
            }
        }
    }
    outcome(
        failures.is_empty() && instances == 200,
        format!(
            "{instances} instances, {zero_rows} zero activation rows, {} mismatches {:?}",
            failures.len(),
            failures
        ),
    )
}

fn criterion_9(runs: &mut Runs) -> Outcome {
    let mut order_ok = 0;
    let mut robust = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cq = runs.get(Mode::CodeQuant, 16, 1.0, seed).final_error;
        let rrr = runs.get(Mode::RandomRotRtn, 16, 1.0, seed).final_error;
        let rtn = runs.get(Mode::Rtn, 16, 1.0, seed).final_error;
        let km = runs.get(Mode::KMeansOnly, 16, 1.0, seed).final_error;
        let cq4 = runs.get(Mode::CodeQuant, 4, 1.0, seed).final_error;
        let km4 = runs.get(Mode::KMeansOnly, 4, 1.0, seed).final_error;
        if cq < rrr && rrr < rtn {
            order_ok += 1;
        }
        let (f_cq, f_km) = (cq4 / cq, km4 / km);
        if f_cq < f_km {
            robust += 1;
        }
        lines.push(format!(
            "seed {seed}: cq {cq:.3} rrr {rrr:.3} rtn {rtn:.3}; K=4 factor cq {f_cq:.2} km {f_km:.2}"
        ));
    }
    outcome(
        order_ok == SEEDS.len() && robust >= 4,
        format!("ordering {order_ok}/5, K=4 robustness {robust}/5; {}", lines.join("; ")),
    )
}

fn criterion_10(runs: &mut Runs) -> Outcome {
    let mean = |runs: &mut Runs, lambda: f64| {
        SEEDS
            .iter()
            .map(|&s| runs.get(Mode::CodeQuant, 16, lambda, s).router_change_mean())
            .sum::<f64>()
            / SEEDS.len() as f64
    };
    let with_kl = mean(runs, 1.0);
    let without = mean(runs, 0.0);
    outcome(
        with_kl <= without,
        format!("mean router change: lambda=1 {with_kl:.4}, lambda=0 {without:.4}"),
    )
}

fn criterion_11() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_codequant"))
        .args(["bench-gemm", "--repeats", "5"])
        .output()
        .unwrap();
    if !out.status.success() {
        return outcome(false, format!("bench-gemm exited with {}", out.status));
    }
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header_ok = lines.next() == Some("kernel,N,d_in,d_out,g,median_ns,gops");
    let mut by_shape: HashMap<String, HashMap<String, f64>> = HashMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let shape = f[1..5].join(",");
        by_shape
            .entry(shape)
            .or_default()
            .insert(f[0].to_string(), f[5].parse().unwrap());
    }
    let complete = by_shape
        .values()
        .all(|k| ["lut", "reference", "dense_f32"].iter().all(|n| k.contains_key(*n)));
    let mut speedups = Vec::new();
    let mut floor_ok = true;
    for (shape, k) in &by_shape {
        let n: usize = shape.split(',').next().unwrap().parse().unwrap();
        let s = k["reference"] / k["lut"];
        if n >= 256 {
            floor_ok &= s >= 1.0;
        }
        speedups.push(format!("{shape}: {s:.2}x"));
    }
    speedups.sort();
    outcome(
        header_ok && complete && by_shape.len() >= 4 && floor_ok,
        format!("{} shapes, lut over reference {}", by_shape.len(), speedups.join(", ")),
    )
}

fn run_cli_pipeline(config: &Path, out: &Path, threads: usize) -> bool {
    Command::new(env!("CARGO_BIN_EXE_codequant"))
        .arg("pipeline")
        .arg("--config")
        .arg(config)
        .arg("--seed")
        .arg("3")
        .arg("--threads")
        .arg(threads.to_string())
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
        .status
        .success()
}

fn criterion_12() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(
        &config,
        "mode = codequant\ngranularity = block-wise(16)\npog.enabled = true\naos.iterations = 32\naccf.iterations = 16\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if !run_cli_pipeline(&config, &a, 1) || !run_cli_pipeline(&config, &b, 4) {
        return outcome(false, "pipeline run failed");
    }
    let same = |name: &str| std::fs::read(a.join(name)).unwrap() == std::fs::read(b.join(name)).unwrap();
    let (report, model) = (same("report.txt"), same("model.cqm"));
    outcome(
        report && model,
        format!("--threads 1 vs 4: report identical {report}, container identical {model}"),
    )
}

type Check = Box<dyn FnMut(&mut Runs) -> Outcome>;

fn main() {
    let mut runs = Runs(HashMap::new());
    let criteria: Vec<(&str, u64, Check)> = vec![
        ("cayley orthogonality", 5, Box::new(|_| criterion_1())),
        ("fold invariance", 30, Box::new(|_| criterion_2())),
        ("gradient correctness", 60, Box::new(|_| criterion_3())),
        ("rotation beats fresh random rotation", 300, Box::new(|_| criterion_4())),
        ("assignment rule exactness", 10, Box::new(|_| criterion_5())),
        ("clustering improvement", 600, Box::new(criterion_6)),
        ("permutation properties", 60, Box::new(|_| criterion_7())),
        ("lut kernel bit-exactness", 120, Box::new(|_| criterion_8())),
        ("end-to-end ordering", 1200, Box::new(criterion_9)),
        ("router KL ablation", 900, Box::new(criterion_10)),
        ("benchmark harness", 300, Box::new(|_| criterion_11())),
        ("thread-count determinism", u64::MAX, Box::new(|_| criterion_12())),
    ];
    let mut failed = 0;
    for (i, (name, budget, mut check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let o = check(&mut runs);
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(budget);
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<40} {} ({:.1}s{}) {}",
            i + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            if in_time { "" } else { ", over budget" },
            o.detail
        );
    }
    println!("{} of 12 acceptance criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
