//! Dense row-major tensors and the `.ten` binary format.
//!
//! Images use the layout `batch × channels × height × width`. The element
//! type is generic so that training can run in `f32` while gradient
//! verification runs in `f64`.

use std::fmt::{Debug, Display};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + Debug + Display + Default + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Interprets the tensor as `n × c × h × w`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err(format!(
                "expected a 4-d image tensor (batch, channels, height, width), got {:?}",
                self.shape
            )),
        }
    }

    pub fn ensure_same_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{context}: element {i} of tensor {:?} is {}",
                self.shape, self.data[i]
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, "element-wise operands differ")?;
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

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        self.ensure_same_shape(other, "axpy operands differ")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| a.max(b))
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), |a, b| a.min(b))
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        self.ensure_same_shape(other, "dot operands differ")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn clip(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.ensure_same_shape(other, "compared tensors differ")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |a, b| a.max(b)))
    }

    /// Selects batch entries `[start, start + count)` of a 4-d tensor.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if start + count > n {
            return shape_err(format!(
                "batch slice {start}..{} out of range for batch {n}",
                start + count
            ));
        }
        let plane = c * h * w;
        Ok(Tensor {
            shape: vec![count, c, h, w],
            data: self.data[start * plane..(start + count) * plane].to_vec(),
        })
    }

    /// Concatenates 4-d tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor<T>]) -> Result<Self> {
        let first = match items.first() {
            Some(t) => t,
            None => return shape_err("cannot stack an empty list"),
        };
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return shape_err(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, t.shape
                ));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: vec![n, c, h, w],
            data,
        })
    }

    /// Spatial crop `[y0, y0+height) × [x0, x0+width)` of a 4-d tensor.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if y0 + height > h || x0 + width > w {
            return shape_err(format!(
                "crop {height}x{width} at ({y0},{x0}) exceeds {h}x{w}"
            ));
        }
        let mut data = Vec::with_capacity(n * c * height * width);
        for plane in self.data.chunks(h * w) {
            for y in y0..y0 + height {
                data.extend_from_slice(&plane[y * w + x0..y * w + x0 + width]);
            }
        }
        Ok(Tensor {
            shape: vec![n, c, height, width],
            data,
        })
    }
}

const TEN_MAGIC: &[u8; 4] = b"TEN1";

/// Writes `TEN1`, a u8 rank, little-endian u32 dims, then the f32 payload.
pub fn write_ten<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    encode_ten(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_ten(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    decode_ten(&mut r).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn encode_ten<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    if t.shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", t.shape.len())));
    }
    w.write_all(TEN_MAGIC)?;
    w.write_all(&[t.shape.len() as u8])?;
    for &d in &t.shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in &t.data {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn decode_ten(r: &mut impl Read) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TEN_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    let mut buf = [0u8; 4];
    for _ in 0..rank[0] {
        r.read_exact(&mut buf)?;
        shape.push(u32::from_le_bytes(buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("payload shorter than shape {shape:?}")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn add_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2]);
        let b = Tensor::<f64>::zeros(vec![3]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn ten_layout_is_bit_exact() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        encode_ten(&mut buf, &t).unwrap();
        let mut expect = b"TEN1".to_vec();
        expect.push(2);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn decode_rejects_bad_magic_and_truncation() {
        assert!(decode_ten(&mut &b"TEN2\x00"[..]).is_err());
        let t = Tensor::<f32>::zeros(vec![3]);
        let mut buf = Vec::new();
        encode_ten(&mut buf, &t).unwrap();
        buf.pop();
        assert!(decode_ten(&mut &buf[..]).is_err());
    }

    #[test]
    fn check_finite_flags_nan() {
        let t = Tensor::<f32>::new(vec![2], vec![0.0, f32::NAN]).unwrap();
        assert!(matches!(t.check_finite("x"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn crop_and_stack() {
        let t = Tensor::<f32>::from_fn(vec![1, 1, 3, 3], |i| i as f32);
        let c = t.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        let s = Tensor::stack_batch(&[&c, &c]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.batch_slice(1, 1).unwrap(), c);
    }

    proptest! {
        #[test]
        fn ten_round_trip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            encode_ten(&mut buf, &t).unwrap();
            prop_assert_eq!(decode_ten(&mut &buf[..]).unwrap(), t);
        }
    }
}
