use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub value: DenseMatrix,
    #[serde(skip)]
    pub grad: DenseMatrix,
}

/// Named parameter blocks of one model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a block initialized uniformly in `±1/sqrt(fan_in)`.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut SeededRng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| (2.0 * rng::unit(rng) - 1.0) * bound).collect();
        self.add_value(name, DenseMatrix::from_vec(rows, cols, data))
    }

    pub fn add_value(&mut self, name: &str, value: DenseMatrix) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name `{name}`");
        let grad = DenseMatrix::zeros(value.rows, value.cols);
        self.blocks.push(ParamBlock { name: name.to_string(), value, grad });
        ParamId(self.blocks.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &DenseMatrix {
        &self.blocks[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.blocks[id.0].value
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.data.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.fill(0.0);
        }
    }

    pub fn zero_values(&mut self) {
        for b in &mut self.blocks {
            b.value.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (b, g) in self.blocks.iter_mut().zip(&grads.0) {
            b.grad.add_assign(g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.grad.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn shapes(&self) -> Vec<(String, (usize, usize))> {
        self.blocks.iter().map(|b| (b.name.clone(), b.value.shape())).collect()
    }

    /// Replaces every value from `other`, which must have an identical shape table.
    pub fn load_values(&mut self, blocks: Vec<(String, DenseMatrix)>) -> Result<()> {
        if blocks.len() != self.blocks.len() {
            return Err(Error::format(
                None,
                format!("expected {} parameter blocks, found {}", self.blocks.len(), blocks.len()),
            ));
        }
        for (mine, (name, value)) in self.blocks.iter().zip(&blocks) {
            if mine.name != *name {
                return Err(Error::format(None, format!("expected block `{}`, found `{name}`", mine.name)));
            }
            if mine.value.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: mine.value.shape(),
                    found: value.shape(),
                });
            }
        }
        for (mine, (_, value)) in self.blocks.iter_mut().zip(blocks) {
            mine.value = value;
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<DenseMatrix>);

impl ParamGrads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        ParamGrads(params.blocks.iter().map(|b| DenseMatrix::zeros(b.value.rows, b.value.cols)).collect())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.scale_assign(s);
        }
    }

    pub fn get(&self, id: ParamId) -> &DenseMatrix {
        &self.0[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(DenseMatrix::is_finite)
    }
}
