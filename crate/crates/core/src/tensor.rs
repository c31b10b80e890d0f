//! Dense row-major real tensors plus the `HFT1` file format.
//!
//! `HFT1` layout: magic bytes `HFT1`, u32 rank, rank x u32 extents,
//! u8 dtype tag (0 = f32, 1 = f64), then the raw little-endian payload in
//! row-major order.

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.numel() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |a, &b| if b.abs() > a { b.abs() } else { a })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Casts every element, e.g. to run an f64 oracle against f32 data.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.to_f64_c())).collect(),
        }
    }

    pub fn write_hft(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + self.data.len() * T::BYTES);
        bytes.extend_from_slice(b"HFT1");
        bytes.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            bytes.extend_from_slice(&(e as u32).to_le_bytes());
        }
        bytes.push(T::DTYPE as u8);
        for &v in &self.data {
            v.write_le(&mut bytes);
        }
        let mut file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_hft(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_hft_bytes(&bytes)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    }

    pub fn from_hft_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Dataset(format!("bad HFT1 data: {m}"));
        if bytes.len() < 9 || &bytes[..4] != b"HFT1" {
            return Err(fail("missing magic"));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut off = 8;
        if bytes.len() < off + 4 * rank + 1 {
            return Err(fail("truncated header"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let tag = Dtype::from_tag(bytes[off]).ok_or_else(|| fail("unknown dtype tag"))?;
        off += 1;
        if tag != T::DTYPE {
            return Err(fail(&format!(
                "dtype tag {:?} does not match requested scalar {:?}",
                tag,
                T::DTYPE
            )));
        }
        let numel: usize = shape.iter().product();
        if bytes.len() != off + numel * T::BYTES {
            return Err(fail("payload length mismatch"));
        }
        let data = bytes[off..]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        Ok(Tensor { shape, data })
    }
}

/// Broadcast shape of two shapes under trailing-dimension alignment.
///
/// Dimensions are compared right-aligned; each pair must be equal or one of
/// them 1 (missing dimensions count as 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::Dimension(format!(
                "shapes {a:?} and {b:?} are not broadcast-compatible"
            )));
        }
    }
    Ok(out)
}

/// Row-major strides for iterating `shape` as if broadcast to `out_shape`
/// (stride 0 on broadcast dimensions).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        let out_i = i + rank - shape.len();
        strides[out_i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Applies a binary op under trailing-dimension broadcasting.
pub fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f(a.data[oa], b.data[ob]));
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Sums `grad` down to `target_shape`, undoing trailing-dimension broadcast.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, target_shape: &[usize]) -> Tensor<T> {
    if grad.shape == target_shape {
        return grad.clone();
    }
    let rank = grad.shape.len();
    let strides = broadcast_strides(target_shape, &grad.shape);
    let mut out = Tensor::<T>::zeros(target_shape);
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for g in 0..grad.numel() {
        out.data[ot] += grad.data[g];
        for d in (0..rank).rev() {
            idx[d] += 1;
            ot += strides[d];
            if idx[d] < grad.shape[d] {
                break;
            }
            idx[d] = 0;
            ot -= strides[d] * grad.shape[d];
        }
    }
    out
}
