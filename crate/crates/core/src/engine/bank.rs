//! FIFO memory bank of unit-norm embeddings.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Ring buffer of negative embeddings with strictly FIFO eviction.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    width: usize,
    entries: VecDeque<Vec<f64>>,
    ids: VecDeque<u64>,
}

impl MemoryBank {
    pub fn new(capacity: usize, width: usize) -> Result<MemoryBank> {
        if capacity == 0 || width == 0 {
            return Err(Error::Config(format!(
                "memory bank needs positive capacity and width, got {capacity}x{width}"
            )));
        }
        Ok(MemoryBank {
            capacity,
            width,
            entries: VecDeque::with_capacity(capacity),
            ids: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insert one unit-norm embedding, evicting the oldest entry when full.
    pub fn push(&mut self, embedding: &[f64], id: u64) -> Result<()> {
        if embedding.len() != self.width {
            return Err(Error::Shape(format!(
                "bank width {} but embedding has {} values",
                self.width,
                embedding.len()
            )));
        }
        let norm = crate::linalg::norm(embedding);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "bank entries must be unit norm, got {norm}"
            )));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
            self.ids.pop_front();
        }
        self.entries.push_back(embedding.to_vec());
        self.ids.push_back(id);
        Ok(())
    }

    /// Insert each row of `batch` in order, pairing row `i` with `ids[i]`.
    pub fn push_batch(&mut self, batch: &Matrix, ids: &[u64]) -> Result<()> {
        if batch.rows() != ids.len() {
            return Err(Error::Shape(format!(
                "{} embeddings but {} ids",
                batch.rows(),
                ids.len()
            )));
        }
        for i in 0..batch.rows() {
            self.push(batch.row(i), ids[i])?;
        }
        Ok(())
    }

    /// Entries as a `len x width` matrix, oldest first.
    pub fn as_matrix(&self) -> Matrix {
        let mut out = Matrix::zeros(self.entries.len(), self.width);
        for (i, e) in self.entries.iter().enumerate() {
            out.row_mut(i).copy_from_slice(e);
        }
        out
    }

    /// Sample ids in entry order.
    pub fn ids(&self) -> Vec<u64> {
        self.ids.iter().copied().collect()
    }
}
