use crate::error::{Error, Result};

/// Shape of a 5D activation: batch, time, channels, height, width.
///
/// Each (b, t) image is stored contiguously as channels x height x width, so
/// 2D layers see a batch of `b * t` independent images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub b: usize,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(b: usize, t: usize, c: usize, h: usize, w: usize) -> Self {
        Self { b, t, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.b * self.t * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn images(&self) -> usize {
        self.b * self.t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "tensor data has {} elements, shape {:?} needs {}",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// The contiguous c x h x w image at (b, t).
    pub fn image(&self, b: usize, t: usize) -> &[f32] {
        let n = self.shape.image_len();
        let i = (b * self.shape.t + t) * n;
        &self.data[i..i + n]
    }

    pub fn image_mut(&mut self, b: usize, t: usize) -> &mut [f32] {
        let n = self.shape.image_len();
        let i = (b * self.shape.t + t) * n;
        &mut self.data[i..i + n]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
