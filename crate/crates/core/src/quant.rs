//! Symmetric round-to-nearest quantizers.
//!
//! Activations are quantized per token row with a dynamic scale; weights are
//! quantized per output channel, either over the whole input dimension or in
//! groups of `g` consecutive input channels. Integer codes live in the signed
//! range `[-2^(b-1), 2^(b-1) - 1]` and rounding is half away from zero.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One scale per token row (activations).
    PerTokenRow,
    /// One scale per `g` consecutive input channels of each output channel.
    PerGroup(usize),
    /// One scale spanning the whole input dimension of each output channel.
    WholeRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: u8,
    pub granularity: Granularity,
}

impl QuantSpec {
    pub fn per_token(bits: u8) -> Self {
        Self {
            bits,
            granularity: Granularity::PerTokenRow,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 2 | 3 | 4 | 8) {
            return Err(Error::Config(format!("unsupported bit width {}", self.bits)));
        }
        if let Granularity::PerGroup(0) = self.granularity {
            return Err(Error::Config("group size must be positive".into()));
        }
        Ok(())
    }

    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    pub fn qmin(&self) -> i32 {
        -(1 << (self.bits - 1))
    }

    /// Group length along an axis of length `len`.
    pub fn group_len(&self, len: usize) -> Result<usize> {
        match self.granularity {
            Granularity::PerGroup(g) => {
                if g == 0 || len % g != 0 {
                    return Err(Error::Config(format!(
                        "group size {g} does not divide axis length {len}"
                    )));
                }
                Ok(g)
            }
            Granularity::WholeRow | Granularity::PerTokenRow => Ok(len),
        }
    }
}

/// Scale for a block whose largest magnitude is `max_abs`.
///
/// The plain quotient `max_abs / qmax` is nudged by a few ulps, if needed, to a
/// value `s` with `(qmax * s) / qmax == s` in floating point. Re-quantizing a
/// dequantized block then recovers exactly the same scale, which is what makes
/// fake quantization idempotent bit for bit.
pub fn symmetric_scale(max_abs: f64, qmax: i32) -> f64 {
    if max_abs == 0.0 {
        return 1.0;
    }
    let q = f64::from(qmax);
    let s0 = max_abs / q;
    let fixed = |s: f64| (q * s) / q == s;
    if fixed(s0) {
        return s0;
    }
    let (mut up, mut down) = (s0, s0);
    for _ in 0..16 {
        up = up.next_up();
        if fixed(up) {
            return up;
        }
        down = down.next_down();
        if fixed(down) {
            return down;
        }
    }
    s0
}

#[inline]
fn quantize_value(x: f64, scale: f64, qmin: i32, qmax: i32) -> i8 {
    // f64::round is round-half-away-from-zero.
    let q = (x / scale).round();
    q.clamp(f64::from(qmin), f64::from(qmax)) as i8
}

/// Integer codes plus one scale per token row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedActivations {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    /// Row-major codes, widened to `i8`.
    pub q: Vec<i8>,
    pub scales: Vec<f64>,
}

impl QuantizedActivations {
    pub fn code(&self, t: usize, j: usize) -> i8 {
        self.q[t * self.cols + j]
    }

    pub fn row_codes(&self, t: usize) -> &[i8] {
        &self.q[t * self.cols..(t + 1) * self.cols]
    }
}

pub fn quantize_activations(x: &Matrix, spec: QuantSpec) -> Result<QuantizedActivations> {
    spec.validate()?;
    if spec.granularity != Granularity::PerTokenRow {
        return Err(Error::Config("activation quantization is per token row".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("activation quantization input".into()));
    }
    let (qmin, qmax) = (spec.qmin(), spec.qmax());
    let mut q = Vec::with_capacity(x.rows() * x.cols());
    let mut scales = Vec::with_capacity(x.rows());
    for row in x.row_iter() {
        let max = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let s = symmetric_scale(max, qmax);
        scales.push(s);
        q.extend(row.iter().map(|&v| quantize_value(v, s, qmin, qmax)));
    }
    Ok(QuantizedActivations {
        rows: x.rows(),
        cols: x.cols(),
        bits: spec.bits,
        q,
        scales,
    })
}

pub fn dequantize(qa: &QuantizedActivations) -> Matrix {
    Matrix::from_fn(qa.rows, qa.cols, |t, j| {
        f64::from(qa.q[t * qa.cols + j]) * qa.scales[t]
    })
}

/// `dequantize(quantize_activations(x))`.
pub fn fake_quant(x: &Matrix, spec: QuantSpec) -> Result<Matrix> {
    Ok(dequantize(&quantize_activations(x, spec)?))
}

/// Per-output-channel grouped RTN weights. Codes are stored `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RtnWeights {
    pub d_in: usize,
    pub d_out: usize,
    pub bits: u8,
    pub group: usize,
    pub q: Vec<i8>,
    /// `[out][group]`.
    pub scales: Vec<f64>,
}

impl RtnWeights {
    pub fn n_groups(&self) -> usize {
        self.d_in / self.group
    }

    /// Rounds scales to `f32` so the container stores them losslessly.
    pub fn round_scales_to_f32(&mut self) {
        for s in &mut self.scales {
            *s = f64::from(*s as f32);
        }
    }

    pub fn reconstruct(&self) -> Matrix {
        let ng = self.n_groups();
        Matrix::from_fn(self.d_in, self.d_out, |j, i| {
            f64::from(self.q[i * self.d_in + j]) * self.scales[i * ng + j / self.group]
        })
    }
}

/// RTN over a `d_in × d_out` weight matrix (the layout used by `x · W`),
/// grouping along the input dimension of each output channel.
pub fn quantize_weights_rtn(w: &Matrix, spec: QuantSpec) -> Result<RtnWeights> {
    spec.validate()?;
    if spec.granularity == Granularity::PerTokenRow {
        return Err(Error::Config("weight quantization needs a per-group or whole-row spec".into()));
    }
    let (d_in, d_out) = w.shape();
    let group = spec.group_len(d_in)?;
    let ng = d_in / group;
    let (qmin, qmax) = (spec.qmin(), spec.qmax());
    let mut q = vec![0i8; d_in * d_out];
    let mut scales = vec![0.0; d_out * ng];
    for i in 0..d_out {
        for grp in 0..ng {
            let rows = grp * group..(grp + 1) * group;
            let max = rows.clone().fold(0.0f64, |m, j| m.max(w[(j, i)].abs()));
            let s = symmetric_scale(max, qmax);
            scales[i * ng + grp] = s;
            for j in rows {
                q[i * d_in + j] = quantize_value(w[(j, i)], s, qmin, qmax);
            }
        }
    }
    Ok(RtnWeights {
        d_in,
        d_out,
        bits: spec.bits,
        group,
        q,
        scales,
    })
}

/// Two 4-bit ids per byte, element `2i` in the low nibble. An odd tail pads
/// the high nibble with zero.
pub fn pack_nibbles(ids: &[u8]) -> Result<Vec<u8>> {
    if let Some(bad) = ids.iter().find(|&&v| v > 15) {
        return Err(Error::Precondition(format!("nibble value {bad} out of range")));
    }
    Ok(ids
        .chunks(2)
        .map(|c| c[0] | (c.get(1).copied().unwrap_or(0) << 4))
        .collect())
}

pub fn unpack_nibbles(packed: &[u8], len: usize) -> Result<Vec<u8>> {
    if packed.len() != len.div_ceil(2) {
        return Err(Error::Format(format!(
            "{} packed bytes cannot hold exactly {len} nibbles",
            packed.len()
        )));
    }
    Ok((0..len)
        .map(|i| (packed[i / 2] >> ((i % 2) * 4)) & 0x0f)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    #[test]
    fn representable_row_is_exact() {
        let x = Matrix::from_rows(&[[7.0, -7.0]]);
        let qa = quantize_activations(&x, QuantSpec::per_token(4)).unwrap();
        assert_eq!(qa.scales, vec![1.0]);
        assert_eq!(qa.q, vec![7, -7]);
        assert_eq!(dequantize(&qa), x);
    }

    #[test]
    fn hand_computed_row() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.5]]);
        let qa = quantize_activations(&x, QuantSpec::per_token(4)).unwrap();
        assert_eq!(qa.scales, vec![0.5]);
        assert_eq!(qa.q, vec![2, 4, 7]);
    }

    #[test]
    fn zero_row_uses_unit_scale() {
        let x = Matrix::from_rows(&[[0.0, 0.0, 0.0]]);
        let qa = quantize_activations(&x, QuantSpec::per_token(4)).unwrap();
        assert_eq!(qa.scales, vec![1.0]);
        assert_eq!(qa.q, vec![0, 0, 0]);
    }

    #[test]
    fn half_rounds_away_from_zero() {
        // scale 1: 2.5 -> 3, -2.5 -> -3
        let x = Matrix::from_rows(&[[2.5, -2.5, 7.0]]);
        let qa = quantize_activations(&x, QuantSpec::per_token(4)).unwrap();
        assert_eq!(qa.q, vec![3, -3, 7]);
    }

    #[test]
    fn rejects_non_finite() {
        let x = Matrix::from_rows(&[[f64::NAN, 1.0]]);
        assert!(matches!(
            quantize_activations(&x, QuantSpec::per_token(4)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn per_entry_error_is_at_most_half_step() {
        let x = Matrix::gaussian(40, 33, 3.0, &RngState::new(1), "q", 0);
        for bits in [2u8, 3, 4, 8] {
            let spec = QuantSpec::per_token(bits);
            let qa = quantize_activations(&x, spec).unwrap();
            let fq = dequantize(&qa);
            for t in 0..x.rows() {
                let s = qa.scales[t];
                for j in 0..x.cols() {
                    assert!((x[(t, j)] - fq[(t, j)]).abs() <= s / 2.0 * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn rtn_group_scale_by_hand() {
        let w = Matrix::from_rows(&[[0.5], [-0.5], [0.25], [0.0]]);
        let spec = QuantSpec {
            bits: 4,
            granularity: Granularity::PerGroup(4),
        };
        let r = quantize_weights_rtn(&w, spec).unwrap();
        assert!((r.scales[0] - 0.5 / 7.0).abs() < 1e-17);
        assert_eq!(r.q, vec![7, -7, 4, 0]);
    }

    #[test]
    fn rtn_zero_group_and_grid_values() {
        let w = Matrix::from_rows(&[[0.0, 3.0], [0.0, -2.0], [0.0, 1.0], [0.0, 7.0]]);
        let spec = QuantSpec {
            bits: 4,
            granularity: Granularity::WholeRow,
        };
        let r = quantize_weights_rtn(&w, spec).unwrap();
        assert_eq!(r.scales, vec![1.0, 1.0]);
        assert_eq!(r.reconstruct(), w);
    }

    #[test]
    fn rtn_rejects_indivisible_group() {
        let w: Matrix = Matrix::zeros(6, 2);
        let spec = QuantSpec {
            bits: 4,
            granularity: Granularity::PerGroup(4),
        };
        assert!(matches!(quantize_weights_rtn(&w, spec), Err(Error::Config(_))));
    }

    #[test]
    fn nibble_layout() {
        assert_eq!(pack_nibbles(&[1, 2]).unwrap(), vec![0x21]);
        assert_eq!(pack_nibbles(&[]).unwrap(), Vec::<u8>::new());
        assert_eq!(pack_nibbles(&[15]).unwrap(), vec![0x0f]);
        assert!(pack_nibbles(&[16]).is_err());
    }

    #[test]
    fn every_byte_round_trips() {
        for b in 0..=255u8 {
            let ids = unpack_nibbles(&[b], 2).unwrap();
            assert_eq!(pack_nibbles(&ids).unwrap(), vec![b]);
        }
    }

    proptest! {
        #[test]
        fn fake_quant_is_idempotent(seed in 0u64..100_000, rows in 1usize..8, cols in 1usize..40, bits in prop::sample::select(vec![2u8, 3, 4, 8]), std in 1e-3f64..1e3) {
            let x = Matrix::gaussian(rows, cols, std, &RngState::new(seed), "fq", 0);
            let spec = QuantSpec::per_token(bits);
            let once = fake_quant(&x, spec).unwrap();
            let twice = fake_quant(&once, spec).unwrap();
            prop_assert_eq!(once.as_slice(), twice.as_slice());
        }

        #[test]
        fn nibbles_round_trip(ids in prop::collection::vec(0u8..16, 0..64)) {
            let packed = pack_nibbles(&ids).unwrap();
            prop_assert_eq!(unpack_nibbles(&packed, ids.len()).unwrap(), ids);
        }
    }
}
