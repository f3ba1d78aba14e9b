//! Dense n-dimensional f32 arrays with an optional gradient buffer.

use super::{NnError, NnResult};

/// Dense float tensor. `grad`, when present, always matches `data` in length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> NnResult<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(NnError::ShapeMismatch {
                op: "Tensor::new",
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Normal(0, std) entries drawn from `rng`.
    pub fn randn<R: rand::Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        use rand_distr::Distribution;
        let dist = rand_distr::Normal::new(0.0f32, std).expect("std must be finite and positive");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, zero-initialized on first access.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> NnResult<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NnError::NonFinite(what.to_string()))
        }
    }
}

/// Integer label map, `[B, H, W]` or `[H, W]`. Values are class indices in
/// `[0, C)` plus the ignore sentinel (conventionally 255).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> NnResult<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 3 || numel != data.len() {
            return Err(NnError::ShapeMismatch {
                op: "LabelMap::new",
                expected: format!("rank 2 or 3 with {numel} elements"),
                got: format!("shape {shape:?}, {} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}
