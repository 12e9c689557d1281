//! Minimal fp32 row-major kernels.
//!
//! Every kernel is a pure function with a fixed loop order, so results are
//! bitwise reproducible regardless of how many threads call into it. Kernels
//! reject non-finite output instead of propagating NaN/Inf.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::ShapeMismatch("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size of the trailing dimension; 1 for scalars.
    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.row_len()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.row_len();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let cols = self.row_len();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_finite(self, kernel: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(kernel))
        }
    }
}

fn as_matrix(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::ShapeMismatch(format!(
            "{name} must be 2-D, got {s:?}"
        ))),
    }
}

/// `a[m×k] · b[k×n]`.
///
/// Loop order is i, p, j: each output element accumulates its products in
/// ascending `p` starting from 0.0, which is the same addition sequence as a
/// naive i, j, p triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "lhs")?;
    let (k2, n) = as_matrix(b, "rhs")?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dimensions {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &ad[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &bd[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul")
}

/// In-place `softmax(scale · x / temperature)` over one row, max-subtracted.
///
/// With `temperature == scale == 1` the pre-scaling is skipped. The
/// normalizer is summed in eight interleaved lanes, then lanes in order.
pub fn softmax_in_place(row: &mut [f32], temperature: f32, scale: f32) {
    let factor_applies = temperature != 1.0 || scale != 1.0;
    if factor_applies {
        for v in row.iter_mut() {
            *v = scale * *v / temperature;
        }
    }
    let max = lane_max(row);
    for v in row.iter_mut() {
        *v = exp_nonpositive(*v - max);
    }
    let sum = lane_sum(row);
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const LANES: usize = 8;

pub(crate) fn lane_max(xs: &[f32]) -> f32 {
    let mut acc = [f32::NEG_INFINITY; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] = if c[l] > acc[l] { c[l] } else { acc[l] };
        }
    }
    tail.iter().chain(&acc).copied().fold(f32::NEG_INFINITY, f32::max)
}

pub(crate) fn lane_sum(xs: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    acc.iter().chain(tail).sum()
}

/// `e^x` for `x <= 0`, within one ulp of the exact value for `x > -87`
/// and 0 below. Plain f32 arithmetic only, so rows vectorize and results do
/// not depend on libm.
#[inline(always)]
pub fn exp_nonpositive(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding 1.5·2^23 rounds to an integer; adding 2^23 + 127 puts the
    // biased exponent in the low mantissa bits.
    const ROUND: f32 = 12_582_912.0;
    const BIAS: f32 = 8_388_735.0;
    let xc = if x < -87.0 { -87.0 } else { x };
    let n = (xc * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let r = xc - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let e = p * r * r + r + 1.0;
    let two_n = f32::from_bits(((n + BIAS).to_bits() - 0x4B00_0000) << 23);
    if x < -87.0 {
        0.0
    } else {
        e * two_n
    }
}

pub fn softmax_rows(m: &Tensor, temperature: f32, scale: f32) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scale must be positive, got {scale}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax_rows input"));
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i), temperature, scale);
    }
    out.ensure_finite("softmax_rows")
}

/// `x · gain / sqrt(mean(x²) + epsilon)` on one vector.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, epsilon: f32) -> Result<Tensor> {
    if x.data().len() != gain.data().len() {
        return Err(Error::ShapeMismatch(format!(
            "rmsnorm length {} vs gain {}",
            x.data().len(),
            gain.data().len()
        )));
    }
    let mut out = vec![0.0; x.data().len()];
    rmsnorm_into(x.data(), gain.data(), epsilon, &mut out);
    Tensor::new(x.shape().to_vec(), out)?.ensure_finite("rmsnorm")
}

pub(crate) fn rmsnorm_into(x: &[f32], gain: &[f32], epsilon: f32, out: &mut [f32]) {
    let mut sum_sq = 0.0f32;
    for &v in x {
        sum_sq += v * v;
    }
    let inv = 1.0 / (sum_sq / x.len() as f32 + epsilon).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// Row-wise rmsnorm of a `[rows × d]` tensor.
pub fn rmsnorm_rows(x: &Tensor, gain: &[f32], epsilon: f32) -> Result<Tensor> {
    let d = x.row_len();
    if d != gain.len() {
        return Err(Error::ShapeMismatch(format!(
            "rmsnorm row length {d} vs gain {}",
            gain.len()
        )));
    }
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.rows() {
        rmsnorm_into(x.row(i), gain, epsilon, out.row_mut(i));
    }
    out.ensure_finite("rmsnorm_rows")
}

/// Per-pair inverse frequencies `theta_base^(-2i/d_head)`, in f64.
pub(crate) fn rope_inv_freq(d_head: usize, theta_base: f32) -> Vec<f64> {
    (0..d_head / 2)
        .map(|i| 1.0 / (theta_base as f64).powf(2.0 * i as f64 / d_head as f64))
        .collect()
}

/// Rotates consecutive pairs of `v` in place. Angles are evaluated in f64 and
/// rounded once, so large positions keep full fp32 accuracy.
pub(crate) fn rope_in_place(v: &mut [f32], position: usize, inv_freq: &[f64]) {
    for (pair, &f) in v.chunks_exact_mut(2).zip(inv_freq) {
        let angle = position as f64 * f;
        let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
        let (x0, x1) = (pair[0], pair[1]);
        pair[0] = x0 * cos - x1 * sin;
        pair[1] = x0 * sin + x1 * cos;
    }
}

pub fn rope_rotate(vec: &Tensor, position: usize, theta_base: f32) -> Result<Tensor> {
    let d = vec.data().len();
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "rotary head dimension must be even, got {d}"
        )));
    }
    let inv_freq = rope_inv_freq(d, theta_base);
    let mut out = vec.clone();
    rope_in_place(out.data_mut(), position, &inv_freq);
    out.ensure_finite("rope_rotate")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n)
            .map(|_| (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32 * 2.0 - 1.0)
            .collect()
    }

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&id, &b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_scalar() {
        let out = matmul(&t(&[1, 1], &[2.0]), &t(&[1, 1], &[3.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);
        assert_eq!(out.shape(), &[1, 1]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = t(&[7, 5], &uniform(&mut rng, 35));
        let b = t(&[5, 3], &uniform(&mut rng, 15));
        let got = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0f32;
                for p in 0..5 {
                    acc += a.data()[i * 5 + p] * b.data()[p * 3 + j];
                }
                assert_eq!(got.data()[i * 3 + j].to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = matmul(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn matmul_rejects_overflow_to_inf() {
        let a = t(&[1, 2], &[f32::MAX, f32::MAX]);
        let b = t(&[2, 1], &[2.0, 2.0]);
        assert!(matches!(matmul(&a, &b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn tensor_new_checks_element_count() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn exp_nonpositive_tracks_f64() {
        let mut worst = 0.0f64;
        for i in 0..=200_000 {
            let x = -(i as f32) * 4.3e-4;
            let got = exp_nonpositive(x) as f64;
            let want = (x as f64).exp();
            worst = worst.max((got - want).abs() / want);
        }
        assert!(worst < 3e-7, "worst relative error {worst}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(-1000.0), 0.0);
        assert_eq!(exp_nonpositive(f32::NEG_INFINITY), 0.0);
    }

    #[test]
    fn softmax_uniform_row() {
        let out = softmax_rows(&t(&[1, 3], &[0.0, 0.0, 0.0]), 1.0, 1.0).unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_saturates() {
        let out = softmax_rows(&t(&[1, 2], &[1000.0, 0.0]), 1.0, 1.0).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
        assert!(out.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_temperature_matches_scalar_oracle() {
        let out = softmax_rows(&t(&[1, 3], &[1.0, 2.0, 3.0]), 2.0, 1.0).unwrap();
        let xs = [1.0f64, 2.0, 3.0];
        let denom: f64 = xs.iter().map(|x| ((x - 3.0) / 2.0).exp()).sum();
        for (i, x) in xs.iter().enumerate() {
            let want = ((x - 3.0) / 2.0).exp() / denom;
            assert!((out.data()[i] as f64 - want).abs() < 1e-7, "{i}");
        }
    }

    #[test]
    fn softmax_rejects_bad_knobs_and_input() {
        let m = t(&[1, 2], &[0.0, 1.0]);
        assert!(softmax_rows(&m, 0.0, 1.0).is_err());
        assert!(softmax_rows(&m, 1.0, -1.0).is_err());
        let bad = t(&[1, 2], &[f32::NAN, 1.0]);
        assert!(matches!(softmax_rows(&bad, 1.0, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rmsnorm_cases() {
        let ones4 = t(&[4], &[1.0; 4]);
        assert_eq!(rmsnorm(&ones4, &ones4, 0.0).unwrap().data(), &[1.0; 4]);
        let x = t(&[2], &[2.0, 2.0]);
        let g = t(&[2], &[1.0, 1.0]);
        assert_eq!(rmsnorm(&x, &g, 0.0).unwrap().data(), &[1.0, 1.0]);
        assert!(rmsnorm(&x, &ones4, 0.0).is_err());
    }

    #[test]
    fn rmsnorm_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform(&mut rng, 16);
        let g = uniform(&mut rng, 16);
        let eps = 1e-5f64;
        let out = rmsnorm(&t(&[16], &x), &t(&[16], &g), eps as f32).unwrap();
        let ms: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 16.0;
        let inv = 1.0 / (ms + eps).sqrt();
        for i in 0..16 {
            let want = x[i] as f64 * g[i] as f64 * inv;
            assert!((out.data()[i] as f64 - want).abs() < 1e-7, "{i}");
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let v = t(&[4], &[0.3, -0.2, 0.9, 0.1]);
        assert_eq!(rope_rotate(&v, 0, 10000.0).unwrap(), v);
    }

    #[test]
    fn rope_rejects_odd_dim() {
        assert!(rope_rotate(&t(&[3], &[1.0, 2.0, 3.0]), 1, 10000.0).is_err());
    }

    #[test]
    fn rope_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for pos in [1usize, 17, 999, 40_000] {
            let v = t(&[8], &uniform(&mut rng, 8));
            let r = rope_rotate(&v, pos, 10000.0).unwrap();
            let n0: f32 = v.data().iter().map(|x| x * x).sum::<f32>().sqrt();
            let n1: f32 = r.data().iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n0 - n1).abs() < 1e-6);
        }
    }
}
