use crate::encoder::{FvLayout, PyramidFv};
use crate::error::{Error, Result};

/// Per-class linear scorer over pyramid FVs, `score = <w, fv> + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub class_id: usize,
    pub layout: FvLayout,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(class_id: usize, layout: FvLayout) -> Self {
        Self {
            class_id,
            layout,
            weights: vec![0.0; layout.len()],
            bias: 0.0,
        }
    }

    pub fn new(class_id: usize, layout: FvLayout, weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                what: "model weights",
                expected: layout.len(),
                got: weights.len(),
            });
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("model weights must be finite".into()));
        }
        Ok(Self {
            class_id,
            layout,
            weights,
            bias,
        })
    }

    /// Weights of group `g = bin * K + gaussian`.
    pub fn group(&self, g: usize) -> &[f64] {
        &self.weights[self.layout.group_range(g)]
    }

    /// Weight slice of spatial bin `b`.
    pub fn bin_slice(&self, b: usize) -> &[f64] {
        &self.weights[self.layout.bin_range(b)]
    }

    pub fn group_norm(&self, g: usize) -> f64 {
        self.group(g).iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Groups with at least one non-zero weight.
    pub fn active_groups(&self) -> Vec<bool> {
        (0..self.layout.groups())
            .map(|g| self.group(g).iter().any(|&w| w != 0.0))
            .collect()
    }

    pub fn score(&self, fv: &PyramidFv) -> f64 {
        self.dot(&fv.data) + self.bias
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum()
    }
}
