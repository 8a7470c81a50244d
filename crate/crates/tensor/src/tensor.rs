use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major array. Images and feature maps use the (batch, channel,
/// height, width) layout.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::invalid(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(lo, hi);
        let data = (0..numel(shape)).map(|_| T::lit(dist.sample(rng))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// (batch, channels, height, width) of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(TensorError::Rank {
                op: "dims4",
                expected: 4,
                actual: self.shape.clone(),
            }),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op: "dims2",
                expected: 2,
                actual: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(TensorError::mismatch("reshape", shape, &self.shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_shape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(TensorError::mismatch("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut o = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of size {dim}");
            o = o * dim + ix;
        }
        o
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape("zip_map", &other.shape)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape("add_assign", &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_shape("max_abs_diff", &other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(TensorError::mismatch(op, shape, &self.shape));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    /// Batch item `b` of a rank-4 tensor as a (1, C, H, W) tensor.
    pub fn batch_item(&self, b: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if b >= n {
            return Err(TensorError::invalid("batch_item", format!("index {b} >= batch {n}")));
        }
        let plane = c * h * w;
        Ok(Self {
            shape: vec![1, c, h, w],
            data: self.data[b * plane..(b + 1) * plane].to_vec(),
        })
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::invalid("stack_batch", "no tensors"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let (b, c2, h2, w2) = t.dims4()?;
            if (c2, h2, w2) != (c, h, w) {
                return Err(TensorError::mismatch("stack_batch", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
            n += b;
        }
        Ok(Self {
            shape: vec![n, c, h, w],
            data,
        })
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (n, c, ih, iw) = self.dims4()?;
        if y0 + h > ih || x0 + w > iw {
            return Err(TensorError::invalid(
                "crop",
                format!("window {h}x{w} at ({y0},{x0}) exceeds {ih}x{iw}"),
            ));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in self.data.chunks(ih * iw) {
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * iw + x0..y * iw + x0 + w]);
            }
        }
        Ok(Self {
            shape: vec![n, c, h, w],
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Result<Self> {
        let (_, _, _, w) = self.dims4()?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        Ok(out)
    }

    /// Bilinear resampling with half-pixel centers (the `align_corners=false`
    /// convention). Not differentiable; used on frozen features and metrics.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Self> {
        let (n, c, ih, iw) = self.dims4()?;
        if oh == 0 || ow == 0 {
            return Err(TensorError::invalid("resize_bilinear", "empty output size"));
        }
        if (oh, ow) == (ih, iw) {
            return Ok(self.clone());
        }
        let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(inp - 1);
                    let i1 = (i0 + 1).min(inp - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ys = taps(oh, ih);
        let xs = taps(ow, iw);
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for plane in self.data.chunks(ih * iw) {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let p = |y: usize, x: usize| plane[y * iw + x].to_f64_lossy();
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    data.push(T::lit(top * (1.0 - fy) + bot * fy));
                }
            }
        }
        Ok(Self {
            shape: vec![n, c, oh, ow],
            data,
        })
    }
}
