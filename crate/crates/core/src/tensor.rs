//! Dense row-major `f64` tensors and the forward kernels the model is built from.
//!
//! Every kernel here is a pure function of its inputs. The differentiable
//! counterparts live on [`crate::tape::Tape`], which calls back into these
//! kernels for the forward pass.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense tensor. An empty shape denotes a scalar holding one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Zero-mean Gaussian entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::Invalid(format!("{op} expects a matrix, got shape {s:?}"))),
        }
    }
}

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_2d("matmul")?;
    let (k2, n) = b.expect_2d("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.expect_2d("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Softmax over the last dimension, with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape.last().unwrap_or(&1);
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalisation over the last dimension: `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x.shape.last().unwrap_or(&1);
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::shape("layer_norm", &x.shape, &gamma.shape));
    }
    if eps <= 0.0 {
        return Err(Error::Invalid("layer_norm eps must be positive".into()));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(d) {
        let (mean, rstd) = moments(row, eps);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gamma.data[j] + beta.data[j];
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Mean and reciprocal standard deviation (biased variance) of a slice.
pub(crate) fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// The four grid corners around a fractional location and their bilinear weights.
///
/// On a grid line the cell to the left (above) is used, so the value is exact
/// and the derivative is the left-cell one.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearCell {
    pub x0: isize,
    pub y0: isize,
    /// Fractional offset from `x0`, in `(0, 1]`.
    pub fx: f64,
    pub fy: f64,
}

impl BilinearCell {
    pub fn locate(x: f64, y: f64) -> Self {
        let x0 = x.ceil() - 1.0;
        let y0 = y.ceil() - 1.0;
        BilinearCell {
            x0: x0 as isize,
            y0: y0 as isize,
            fx: x - x0,
            fy: y - y0,
        }
    }

    /// `(xi, yi, weight, dweight/dx, dweight/dy)` for each corner.
    pub fn corners(&self) -> [(isize, isize, f64, f64, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        let (x0, y0) = (self.x0, self.y0);
        [
            (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
            (x0 + 1, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
            (x0, y0 + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
            (x0 + 1, y0 + 1, fx * fy, fy, fx),
        ]
    }
}

/// Bilinear lookup of every channel of `map: C×H×W` at pixel location `(x, y)`.
/// Grid cells outside the map read as zero.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    let (c, h, w) = match map.shape.as_slice() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::Invalid(format!(
                "bilinear_sample expects C×H×W, got {s:?}"
            )))
        }
    };
    let mut out = vec![0.0; c];
    let cell = BilinearCell::locate(x, y);
    for (xi, yi, wgt, _, _) in cell.corners() {
        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize || wgt == 0.0 {
            continue;
        }
        let base = yi as usize * w + xi as usize;
        for (ch, o) in out.iter_mut().enumerate() {
            *o += wgt * map.data[ch * h * w + base];
        }
    }
    Ok(out)
}

/// Threshold below which a vector is treated as zero by [`l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > NORM_FLOOR {
        v.iter().map(|x| x / norm).collect()
    } else {
        vec![0.0; v.len()]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const BLOB_MAGIC: &[u8; 4] = b"RTRB";
const BLOB_VERSION: u32 = 1;
const DTYPE_F64_LE: u8 = 0;

impl Tensor {
    /// Serialises into the tensor blob format: magic, version, dtype, rank, dims, raw values.
    pub fn write_blob<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let ndim = u8::try_from(self.shape.len()).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255")
        })?;
        let mut buf = Vec::with_capacity(10 + 8 * self.shape.len() + 8 * self.data.len());
        buf.extend_from_slice(BLOB_MAGIC);
        buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        buf.push(DTYPE_F64_LE);
        buf.push(ndim);
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_blob<R: Read>(mut r: R) -> std::result::Result<Tensor, String> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
        Self::from_blob_bytes(&bytes)
    }

    pub fn from_blob_bytes(bytes: &[u8]) -> std::result::Result<Tensor, String> {
        let take = |pos: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
            let s = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| "truncated tensor blob".to_string())?;
            *pos += n;
            Ok(s)
        };
        let mut pos = 0;
        if take(&mut pos, 4)? != BLOB_MAGIC {
            return Err("bad magic".into());
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != BLOB_VERSION {
            return Err(format!("unsupported blob version {version}"));
        }
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F64_LE {
            return Err(format!("unsupported dtype {dtype}"));
        }
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| "dimension overflow".to_string())?);
        }
        let numel: usize = shape.iter().product();
        if bytes.len() - pos != numel * 8 {
            return Err(format!(
                "payload holds {} bytes, shape {shape:?} needs {}",
                bytes.len() - pos,
                numel * 8
            ));
        }
        let data = bytes[pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_blob(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_blob_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.at2(i, t) * b.at2(t, j);
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
        let c = matmul(&Tensor::full(&[1, 1], 2.0), &Tensor::full(&[1, 1], 3.0)).unwrap();
        assert_eq!(c.data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-14);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap());
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::vector(&[1.0, 1.0, 1.0]), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let y = layer_norm(
            &Tensor::vector(&[1.0, -1.0]),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            1e-300,
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let beta = Tensor::vector(&[0.3, -0.2, 0.9]);
        let x = Tensor::from_rows(&[vec![4.0, 1.0, -2.0], vec![0.5, 0.1, 7.0]]).unwrap();
        let y = layer_norm(&x, &Tensor::zeros(&[3]), &beta, LAYER_NORM_EPS).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), beta.data());
        }
    }

    #[test]
    fn bilinear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = Tensor::randn(&[2, 4, 5], 1.0, &mut rng);
        for (x, y) in [(0usize, 0usize), (4, 3), (2, 1)] {
            let v = bilinear_sample(&map, x as f64, y as f64).unwrap();
            assert_eq!(v, vec![map.at3(0, y, x), map.at3(1, y, x)]);
        }
        let m = Tensor::new(vec![1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&m, 0.5, 0.5).unwrap(), vec![0.5]);
        assert_eq!(bilinear_sample(&map, -10.0, -10.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_cases() {
        let v = l2_normalize(&[3.0, 4.0]);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let u = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&u), u.to_vec());
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn blob_rejects_garbage() {
        assert!(Tensor::from_blob_bytes(b"NOPE").is_err());
        let mut bytes = Vec::new();
        Tensor::vector(&[1.0, 2.0]).write_blob(&mut bytes).unwrap();
        bytes.pop();
        assert!(Tensor::from_blob_bytes(&bytes).is_err());
    }

    #[test]
    fn blob_layout_is_fixed() {
        let mut bytes = Vec::new();
        Tensor::new(vec![1, 2], vec![1.5, -2.0])
            .unwrap()
            .write_blob(&mut bytes)
            .unwrap();
        let mut expect = b"RTRB".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&[0, 2]);
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.5f64.to_le_bytes());
        expect.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    fn small_shape() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 0..4)
    }

    proptest! {
        #[test]
        fn blob_round_trip_is_bit_exact(shape in small_shape(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tensor::randn(&shape, 1e3, &mut rng);
            if let Some(v) = t.data_mut().first_mut() { *v = -0.0; }
            let mut bytes = Vec::new();
            t.write_blob(&mut bytes).unwrap();
            let back = Tensor::from_blob_bytes(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&t));
        }

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[rows, cols], scale, &mut rng);
            let s = softmax_rows(&x);
            for r in 0..rows {
                prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn layer_norm_standardises(rows in 1usize..5, d in 2usize..9, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[rows, d], 10.0, &mut rng);
            let y = layer_norm(&x, &Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), LAYER_NORM_EPS).unwrap();
            for r in 0..rows {
                let xr = x.row(r);
                let mx = xr.iter().sum::<f64>() / d as f64;
                let vx = xr.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / d as f64;
                prop_assume!(vx > 10.0);
                let row = y.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((var - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn bilinear_is_linear_in_map(seed in any::<u64>(), x in -2.0f64..7.0, y in -2.0f64..6.0,
                                     alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
            let b = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
            let mix = a.zip_map(&b, |p, q| alpha * p + beta * q).unwrap();
            let lhs = bilinear_sample(&mix, x, y).unwrap();
            let sa = bilinear_sample(&a, x, y).unwrap();
            let sb = bilinear_sample(&b, x, y).unwrap();
            for c in 0..3 {
                prop_assert!((lhs[c] - (alpha * sa[c] + beta * sb[c])).abs() < 1e-12);
            }
        }
    }
}
