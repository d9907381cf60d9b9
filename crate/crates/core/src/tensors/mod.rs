//! Dense `f32` tensors and the numeric kernels the rest of the engine is built on.
//!
//! Tensors are batchless: images and feature maps are `channels × height × width`,
//! correlation volume levels are `(source pixels) × height × width`. Every live
//! tensor is counted by a per-thread byte tracker so memory reports are
//! deterministic and independent of the system allocator.

mod ops;

pub use ops::*;

use std::cell::Cell;
use std::fmt;

use crate::error::{shape_err, Result};

thread_local! {
    static LIVE_BYTES: Cell<usize> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<usize> = const { Cell::new(0) };
}

fn track_alloc(bytes: usize) {
    LIVE_BYTES.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK_BYTES.with(|peak| {
            if now > peak.get() {
                peak.set(now)
            }
        });
    });
}

fn track_free(bytes: usize) {
    LIVE_BYTES.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes held by tensors currently alive on this thread.
pub fn live_tensor_bytes() -> usize {
    LIVE_BYTES.with(Cell::get)
}

/// High-water mark of [`live_tensor_bytes`] since the last [`reset_peak_tensor_bytes`].
pub fn peak_tensor_bytes() -> usize {
    PEAK_BYTES.with(Cell::get)
}

pub fn reset_peak_tensor_bytes() {
    let live = live_tensor_bytes();
    PEAK_BYTES.with(|peak| peak.set(live));
}

/// Dense row-major `f32` array.
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        track_alloc(data.len() * 4);
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("consistent shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..numel).map(&mut f).collect()).expect("consistent shape")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(vec![1], vec![value]).expect("consistent shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * 4
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Takes the payload out, releasing it from the byte tracker.
    pub fn into_vec(mut self) -> Vec<f32> {
        let data = std::mem::take(&mut self.data);
        track_free(data.len() * 4);
        data
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(shape_err!("expected rank-3 tensor, got shape {:?}", s)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    /// Contiguous `h × w` plane of channel `c`.
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err!("elementwise shapes differ: {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Channels `start..end` of a rank-3 tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if start > end || end > c {
            return Err(shape_err!("channel slice {}..{} out of {}", start, end, c));
        }
        Tensor::new(vec![end - start, h, w], self.data[start * h * w..end * h * w].to_vec())
    }

    /// Stacks rank-3 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let (_, h, w) = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?
            .dims3()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err!("concat spatial mismatch {}x{} vs {}x{}", ph, pw, h, w));
            }
            channels += c;
            data.extend_from_slice(p.data());
        }
        Tensor::new(vec![channels, h, w], data)
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::new(self.shape.clone(), self.data.clone()).expect("same shape")
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        track_free(self.data.len() * 4);
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn byte_tracker_follows_lifetimes() {
        reset_peak_tensor_bytes();
        let base = live_tensor_bytes();
        {
            let a = Tensor::zeros(&[4, 4]);
            let _b = a.clone();
            assert_eq!(live_tensor_bytes(), base + 128);
        }
        assert_eq!(live_tensor_bytes(), base);
        assert_eq!(peak_tensor_bytes(), base + 128);
        let v = Tensor::zeros(&[10]).into_vec();
        assert_eq!(v.len(), 10);
        assert_eq!(live_tensor_bytes(), base);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = Tensor::from_fn(&[2, 2, 3], |i| i as f32);
        let b = Tensor::from_fn(&[1, 2, 3], |i| -(i as f32));
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2, 3]);
        assert_eq!(c.slice_channels(0, 2).unwrap(), a);
        assert_eq!(c.slice_channels(2, 3).unwrap(), b);
    }
}
