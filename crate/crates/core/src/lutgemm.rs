//! Lookup-table GEMM for clustered weights times 4-bit activations.
//!
//! For each (output row, group) tile the 16 centroids are multiplied once
//! against the 16 possible activation codes; the inner loop is then a pair
//! of nibble lookups and one add. Accumulation is in `f32` in a fixed order
//! so `lut_gemm` and `reference_gemm` agree bit for bit.

use std::time::Instant;

use rayon::prelude::*;

use crate::accf::Codebook;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::quant::{pack_nibbles, quantize_activations, QuantSpec, QuantizedActivations};
use crate::rng::RngState;

pub const TABLE_SIZE: usize = 16;
pub const DEFAULT_TOKEN_BLOCK: usize = 64;
const ROW_BLOCK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedClusteredWeights {
    /// Output rows (`d_out` of the dense weight).
    pub rows: usize,
    pub d_in: usize,
    pub group: usize,
    /// `[rows][n_groups][16]`, unused slots zero.
    pub centroids: Vec<f32>,
    /// `rows * d_in` nibbles, row-major, low nibble first.
    pub ids: Vec<u8>,
}

impl PackedClusteredWeights {
    pub fn new(rows: usize, d_in: usize, group: usize, centroids: Vec<f32>, ids: &[u8]) -> Result<Self> {
        if group == 0 || d_in % group != 0 {
            return Err(Error::shape("packed weights", format!("group {group} does not divide {d_in}")));
        }
        if centroids.len() != rows * (d_in / group) * TABLE_SIZE {
            return Err(Error::shape("packed weights", format!("{} centroid values", centroids.len())));
        }
        if ids.len() != rows * d_in {
            return Err(Error::shape("packed weights", format!("{} ids for {rows}x{d_in}", ids.len())));
        }
        Ok(Self {
            rows,
            d_in,
            group,
            centroids,
            ids: pack_nibbles(ids)?,
        })
    }

    pub fn from_codebook(cb: &Codebook) -> Result<Self> {
        if cb.k > TABLE_SIZE {
            return Err(Error::Precondition(format!("{} centroids do not fit a 16-entry table", cb.k)));
        }
        let ng = cb.n_groups();
        let mut centroids = vec![0.0f32; cb.d_out * ng * TABLE_SIZE];
        for i in 0..cb.d_out {
            for grp in 0..ng {
                let dst = &mut centroids[(i * ng + grp) * TABLE_SIZE..][..cb.k];
                for (d, &c) in dst.iter_mut().zip(cb.group_centroids(i, grp)) {
                    *d = c as f32;
                }
            }
        }
        Self::new(cb.d_out, cb.d_in, cb.group, centroids, &cb.ids)
    }

    pub fn n_groups(&self) -> usize {
        self.d_in / self.group
    }

    pub fn tile_centroids(&self, row: usize, grp: usize) -> &[f32] {
        &self.centroids[(row * self.n_groups() + grp) * TABLE_SIZE..][..TABLE_SIZE]
    }

    #[inline]
    pub fn id(&self, row: usize, j: usize) -> usize {
        let n = row * self.d_in + j;
        let byte = self.ids[n / 2];
        usize::from(if n % 2 == 0 { byte & 0x0f } else { byte >> 4 })
    }

    /// Dense `d_in × rows` weight in the `x·W` layout.
    pub fn dequantize(&self) -> Matrix<f32> {
        Matrix::from_fn(self.d_in, self.rows, |j, i| self.tile_centroids(i, j / self.group)[self.id(i, j)])
    }
}

/// `table[c][a] = centroid_c × (a − 8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LUTile {
    pub table: [[f32; TABLE_SIZE]; TABLE_SIZE],
}

pub fn build_lut(centroids: &[f32]) -> LUTile {
    let mut table = [[0.0f32; TABLE_SIZE]; TABLE_SIZE];
    for (row, &c) in table.iter_mut().zip(centroids) {
        for (a, v) in row.iter_mut().enumerate() {
            *v = c * (a as f32 - 8.0);
        }
    }
    LUTile { table }
}

#[inline]
fn code_index(q: i8) -> usize {
    (i32::from(q) + 8) as usize
}

fn check_operands(qa: &QuantizedActivations, pw: &PackedClusteredWeights) -> Result<()> {
    if qa.cols != pw.d_in {
        return Err(Error::shape("gemm", format!("activations have {} columns, weights {}", qa.cols, pw.d_in)));
    }
    Ok(())
}

/// Table-driven product; `y[t, i]` for every token row and output row.
pub fn lut_gemm(qa: &QuantizedActivations, pw: &PackedClusteredWeights) -> Result<Matrix<f32>> {
    lut_gemm_blocked(qa, pw, DEFAULT_TOKEN_BLOCK)
}

pub fn lut_gemm_blocked(qa: &QuantizedActivations, pw: &PackedClusteredWeights, token_block: usize) -> Result<Matrix<f32>> {
    check_operands(qa, pw)?;
    if qa.bits != 4 {
        return Err(Error::Precondition(format!("LUT kernel needs 4-bit activations, got {}", qa.bits)));
    }
    if token_block == 0 {
        return Err(Error::Config("token block must be positive".into()));
    }
    let (n, d_out) = (qa.rows, pw.rows);
    let tiles: Vec<(usize, usize)> = (0..n.div_ceil(token_block))
        .flat_map(|tb| (0..d_out.div_ceil(ROW_BLOCK)).map(move |rb| (tb, rb)))
        .collect();
    let results: Vec<Vec<f32>> = tiles
        .par_iter()
        .map(|&(tb, rb)| {
            let tokens = tb * token_block..((tb + 1) * token_block).min(n);
            let rows = rb * ROW_BLOCK..((rb + 1) * ROW_BLOCK).min(d_out);
            let mut out = vec![0.0f32; tokens.len() * rows.len()];
            // Table column of every code, laid out `[j][token]` so the inner
            // loop runs over independent accumulators.
            let width = tokens.len();
            let mut idx = vec![0u8; pw.d_in * width];
            for (k, t) in tokens.clone().enumerate() {
                for (j, &q) in qa.row_codes(t).iter().enumerate() {
                    idx[j * width + k] = code_index(q) as u8;
                }
            }
            let mut ids = vec![0u8; pw.d_in];
            let mut acc = vec![0.0f32; width];
            for (ri, i) in rows.clone().enumerate() {
                for (j, id) in ids.iter_mut().enumerate() {
                    *id = pw.id(i, j) as u8;
                }
                acc.fill(0.0);
                for grp in 0..pw.n_groups() {
                    let lut = build_lut(pw.tile_centroids(i, grp));
                    for j in grp * pw.group..(grp + 1) * pw.group {
                        let entries = &lut.table[usize::from(ids[j] & 0x0f)];
                        for (a, &c) in acc.iter_mut().zip(&idx[j * width..(j + 1) * width]) {
                            *a += entries[usize::from(c & 0x0f)];
                        }
                    }
                }
                for (k, (a, t)) in acc.iter().zip(tokens.clone()).enumerate() {
                    out[k * rows.len() + ri] = qa.scales[t] as f32 * a;
                }
            }
            out
        })
        .collect();
    let mut y = Matrix::<f32>::zeros(n, d_out);
    for (&(tb, rb), block) in tiles.iter().zip(results) {
        let t0 = tb * token_block;
        let r0 = rb * ROW_BLOCK;
        let width = ((rb + 1) * ROW_BLOCK).min(d_out) - r0;
        for (k, chunk) in block.chunks(width).enumerate() {
            y.row_mut(t0 + k)[r0..r0 + width].copy_from_slice(chunk);
        }
    }
    Ok(y)
}

/// Same arithmetic and order as `lut_gemm` with no tables; also accepts
/// 8-bit codes.
pub fn reference_gemm(qa: &QuantizedActivations, pw: &PackedClusteredWeights) -> Result<Matrix<f32>> {
    check_operands(qa, pw)?;
    let mut y = Matrix::<f32>::zeros(qa.rows, pw.rows);
    for t in 0..qa.rows {
        let codes = qa.row_codes(t);
        let s = qa.scales[t] as f32;
        for i in 0..pw.rows {
            let mut acc = 0.0f32;
            for grp in 0..pw.n_groups() {
                let cents = pw.tile_centroids(i, grp);
                for j in grp * pw.group..(grp + 1) * pw.group {
                    acc += cents[pw.id(i, j)] * f32::from(codes[j]);
                }
            }
            y.row_mut(t)[i] = s * acc;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmShape {
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub g: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub shape: GemmShape,
    pub median_ns: f64,
    pub gops: f64,
}

impl BenchRow {
    pub const HEADER: &'static str = "kernel,N,d_in,d_out,g,median_ns,gops";

    pub fn to_line(&self) -> String {
        let s = self.shape;
        format!(
            "{},{},{},{},{},{:.0},{:.4}",
            self.kernel, s.n, s.d_in, s.d_out, s.g, self.median_ns, self.gops
        )
    }
}

/// Random operands of the given shape: 16 centroids per tile, uniform ids
/// and Gaussian activations quantized to 4 bits.
pub fn random_problem(shape: GemmShape, rng: &RngState) -> Result<(QuantizedActivations, PackedClusteredWeights)> {
    use rand::Rng;
    if shape.g == 0 || shape.d_in % shape.g != 0 {
        return Err(Error::Config(format!("g = {} does not divide d_in = {}", shape.g, shape.d_in)));
    }
    let x = Matrix::gaussian(shape.n, shape.d_in, 1.0, rng, "bench-x", 0);
    let qa = quantize_activations(&x, QuantSpec::per_token(4))?;
    let ng = shape.d_in / shape.g;
    let cents = Matrix::gaussian(shape.d_out * ng, TABLE_SIZE, 0.05, rng, "bench-c", 0).cast::<f32>();
    let mut ids_rng = rng.stream("bench-ids", 0);
    let ids: Vec<u8> = (0..shape.d_out * shape.d_in).map(|_| ids_rng.random_range(0..16)).collect();
    let pw = PackedClusteredWeights::new(shape.d_out, shape.d_in, shape.g, cents.into_vec(), &ids)?;
    Ok((qa, pw))
}

fn median_ns(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_nanos().max(1) as f64);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2.0
    })
}

/// Times the table kernel, the reference kernel and a dense `f32` GEMM on
/// the dequantized operands.
pub fn bench_gemm(shapes: &[GemmShape], repeats: usize, rng: &RngState) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(shapes.len() * 3);
    for (idx, &shape) in shapes.iter().enumerate() {
        let (qa, pw) = random_problem(shape, &rng.derive("bench", idx as u64))?;
        let xa = crate::quant::dequantize(&qa).cast::<f32>();
        let wd = pw.dequantize();
        let ops = 2.0 * (shape.n * shape.d_in * shape.d_out) as f64;
        let timings = [
            ("lut", median_ns(repeats, || lut_gemm(&qa, &pw).map(drop))?),
            ("reference", median_ns(repeats, || reference_gemm(&qa, &pw).map(drop))?),
            ("dense_f32", median_ns(repeats, || xa.matmul(&wd).map(drop))?),
        ];
        for (kernel, ns) in timings {
            rows.push(BenchRow {
                kernel,
                shape,
                median_ns: ns,
                gops: ops / ns,
            });
        }
    }
    Ok(rows)
}
