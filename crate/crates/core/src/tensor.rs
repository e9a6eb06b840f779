use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;

/// Shape of a rank-4 tensor: batch x channels x height x width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn spatial(&self) -> usize {
        self.height * self.width
    }
}

/// Dense rank-4 tensor, row-major. The universal activation and weight
/// carrier: convolution weights use the layout
/// `(out_channels, in_channels_per_group, kh, kw)`, per-channel parameters
/// use `(channels, 1, 1, 1)`, linear weights `(out, in, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![E::zero(); shape.numel()],
        }
    }

    pub fn filled(shape: Shape, value: E) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Wrap a row-major buffer. Panics if the length does not match the shape.
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Self {
        assert_eq!(
            data.len(),
            shape.numel(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn per_channel(values: &[E]) -> Self {
        Tensor::from_vec(Shape::new(values.len(), 1, 1, 1), values.to_vec())
    }

    pub const fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut E {
        let i = self.offset(b, c, y, x);
        &mut self.data[i]
    }

    pub fn fill(&mut self, value: E) {
        for v in self.data.iter_mut() {
            *v = value;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> E {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        let mut m = E::zero();
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = (*a - *b).abs();
            if d > m {
                m = d;
            }
        }
        m
    }

    /// Convert elements, used to promote f32 networks to f64 for checks.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::<f32>::zeros(Shape::new(2, 3, 4, 5));
        assert_eq!(t.offset(0, 0, 0, 0), 0);
        assert_eq!(t.offset(0, 0, 0, 1), 1);
        assert_eq!(t.offset(0, 0, 1, 0), 5);
        assert_eq!(t.offset(0, 1, 0, 0), 20);
        assert_eq!(t.offset(1, 0, 0, 0), 60);
        assert_eq!(t.data().len(), 120);
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_bad_length() {
        let _ = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), alloc::vec![0.0; 3]);
    }
}
