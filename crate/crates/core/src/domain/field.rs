use super::Grid;
use crate::error::{CoreError, Result};
use std::sync::Arc;

/// Tensor rank of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rank {
    Scalar,
    Vector(usize),
    /// rows x cols, laid out row-major per node.
    Matrix(usize, usize),
}

impl Rank {
    pub fn components(&self) -> usize {
        match *self {
            Rank::Scalar => 1,
            Rank::Vector(k) => k,
            Rank::Matrix(k, d) => k * d,
        }
    }
}

impl std::fmt::Display for Rank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rank::Scalar => write!(f, "scalar"),
            Rank::Vector(k) => write!(f, "vector({k})"),
            Rank::Matrix(k, d) => write!(f, "matrix({k}x{d})"),
        }
    }
}

/// Values per lattice node, components contiguous per node. Exterior nodes
/// carry zeros and are never read by the discrete operators.
#[derive(Debug, Clone)]
pub struct Field {
    pub grid: Arc<Grid>,
    pub rank: Rank,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Arc<Grid>, rank: Rank) -> Self {
        let n = grid.node_count * rank.components();
        Field { grid, rank, values: vec![0.0; n] }
    }

    /// Sample a function at every non-exterior node.
    pub fn from_fn<F>(grid: Arc<Grid>, rank: Rank, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]),
    {
        let mut field = Field::zeros(grid, rank);
        let c = rank.components();
        let d = field.grid.dim();
        for &idx32 in &field.grid.in_nodes {
            let idx = idx32 as usize;
            let p = field.grid.node_position(idx);
            let mut out = vec![0.0; c];
            f(&p[..d], &mut out);
            field.values[idx * c..(idx + 1) * c].copy_from_slice(&out);
        }
        field
    }

    pub fn scalar_from_fn<F: Fn(&[f64]) -> f64>(grid: Arc<Grid>, f: F) -> Self {
        Field::from_fn(grid, Rank::Scalar, |p, out| out[0] = f(p))
    }

    pub fn components(&self) -> usize {
        self.rank.components()
    }

    #[inline]
    pub fn value(&self, node: usize, comp: usize) -> f64 {
        self.values[node * self.components() + comp]
    }

    #[inline]
    pub fn set(&mut self, node: usize, comp: usize, v: f64) {
        let c = self.components();
        self.values[node * c + comp] = v;
    }

    #[inline]
    pub fn node_slice(&self, node: usize) -> &[f64] {
        let c = self.components();
        &self.values[node * c..(node + 1) * c]
    }

    /// Check value-count consistency and finiteness at non-exterior nodes.
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.grid.node_count * self.components() {
            return Err(CoreError::InvalidField(format!(
                "value count {} does not match {} nodes x {} components",
                self.values.len(),
                self.grid.node_count,
                self.components()
            )));
        }
        let c = self.components();
        for &idx32 in &self.grid.in_nodes {
            let idx = idx32 as usize;
            for j in 0..c {
                if !self.values[idx * c + j].is_finite() {
                    return Err(CoreError::InvalidField(format!(
                        "non-finite entry at node {idx} component {j}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Max absolute value over non-exterior nodes.
    pub fn max_abs(&self) -> f64 {
        let c = self.components();
        let mut m = 0.0f64;
        for &idx32 in &self.grid.in_nodes {
            let idx = idx32 as usize;
            for j in 0..c {
                m = m.max(self.values[idx * c + j].abs());
            }
        }
        m
    }

    pub fn axpy(&mut self, alpha: f64, other: &Field) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }
}
