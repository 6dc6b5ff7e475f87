//! Dense row-major tensors.
//!
//! Videos and latent maps are rank-4 `(frames, height, width, channels)`.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Frame-major video or latent tensor `(L, H, W, C)`.
pub type VideoTensor = Tensor<f32>;

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", shape, "dimensions must be positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid("tensor", shape, format!("expected {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut RngState) -> Self {
        Self::from_fn(shape, |_| T::of(rng.normal() * std))
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngState) -> Self {
        Self::from_fn(shape, |_| T::of(rng.uniform_range(lo, hi)))
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// `(L, H, W, C)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [l, h, w, c] => Ok((l, h, w, c)),
            _ => Err(Error::invalid("dims4", &self.shape, "expected rank 4 (L, H, W, C)")),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
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

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|x| x.f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a.f64() - b.f64()).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.f64().abs()).fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::of(x.f64())).collect() }
    }

    /// Frame `i` of a rank-4 tensor as a rank-4 tensor with one frame.
    pub fn frame(&self, i: usize) -> Result<Self> {
        let (l, h, w, c) = self.dims4()?;
        if i >= l {
            return Err(Error::arg("frame", format!("frame {i} out of range for {l} frames")));
        }
        let n = h * w * c;
        Ok(Tensor { shape: vec![1, h, w, c], data: self.data[i * n..(i + 1) * n].to_vec() })
    }

    /// Concatenate rank-4 tensors along the frame axis.
    pub fn stack_frames(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::arg("stack_frames", "no frames"))?;
        let (_, h, w, c) = first.dims4()?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            let (l, ph, pw, pc) = p.dims4()?;
            if (ph, pw, pc) != (h, w, c) {
                return Err(Error::shape("stack_frames", &first.shape, &p.shape));
            }
            frames += l;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: vec![frames, h, w, c], data })
    }

    /// Reorder frames: output frame `i` is input frame `order[i]`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        let (l, h, w, c) = self.dims4()?;
        if order.len() != l || order.iter().any(|&i| i >= l) {
            return Err(Error::arg("permute_frames", format!("invalid order {order:?} for {l} frames")));
        }
        let n = h * w * c;
        let mut data = Vec::with_capacity(self.data.len());
        for &i in order {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of range {d}");
            acc * d + i
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn permute_frames_roundtrip() {
        let mut rng = RngState::new(1);
        let x = Tensor::<f32>::randn(&[4, 2, 3, 2], 1.0, &mut rng);
        let y = x.permute_frames(&[2, 0, 3, 1]).unwrap();
        assert_eq!(y.frame(0).unwrap(), x.frame(2).unwrap());
        let back = y.permute_frames(&[1, 3, 0, 2]).unwrap();
        assert!(back.bit_eq(&x));
    }
}
