//! State and residual traces: the `T x D` arrays every solver iterates on.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// A candidate trace `s_{1:T}` stored row-major: row `k` holds `s_{k+1}`.
///
/// Traces are plain values; solvers never mutate their inputs. A trace may
/// carry non-finite entries transiently inside solver loops, but every
/// operation that reports a converged result returns all-finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrace {
    len: usize,
    dim: usize,
    data: Vec<Real>,
}

impl StateTrace {
    pub fn zeros(len: usize, dim: usize) -> Self {
        assert!(len >= 1 && dim >= 1, "trace shape must be at least 1x1");
        StateTrace {
            len,
            dim,
            data: vec![0.0; len * dim],
        }
    }

    /// Build from a flat row-major buffer of length `len * dim`.
    pub fn from_flat(len: usize, dim: usize, data: Vec<Real>) -> Result<Self> {
        if len == 0 || dim == 0 || data.len() != len * dim {
            return Err(Error::shape(
                "StateTrace::from_flat",
                format!("{len}x{dim}"),
                data.len(),
            ));
        }
        Ok(StateTrace { len, dim, data })
    }

    /// Build by evaluating `f(row, col)`.
    pub fn from_fn(len: usize, dim: usize, mut f: impl FnMut(usize, usize) -> Real) -> Self {
        let mut t = Self::zeros(len, dim);
        for k in 0..len {
            for j in 0..dim {
                t.data[k * dim + j] = f(k, j);
            }
        }
        t
    }

    /// Number of time steps `T`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: len >= 1
    }

    /// State dimension `D`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The state at row `k` (i.e. `s_{k+1}`).
    pub fn row(&self, k: usize) -> &[Real] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [Real] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First row containing a non-finite entry, if any.
    pub fn first_nonfinite_row(&self) -> Option<usize> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| i / self.dim)
    }

    /// Copy into an owned `T x D` matrix (row `k` = state at step `k+1`).
    pub fn to_matrix(&self) -> DMatrix<Real> {
        DMatrix::from_fn(self.len, self.dim, |k, j| self.data[k * self.dim + j])
    }
}

/// One-step errors `r_t = s_t - f_t(s_{t-1})`, same shape as the trace that
/// produced them. Identically zero exactly at the true trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    len: usize,
    dim: usize,
    data: Vec<Real>,
}

impl ResidualTrace {
    pub(crate) fn from_flat(len: usize, dim: usize, data: Vec<Real>) -> Self {
        debug_assert_eq!(data.len(), len * dim);
        ResidualTrace { len, dim, data }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The residual at row `k` (i.e. `r_{k+1}`).
    pub fn row(&self, k: usize) -> &[Real] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    /// Max-abs norm over all `T * D` entries (the solver convergence metric).
    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Half the squared Euclidean norm over all entries.
    pub fn half_squared_norm(&self) -> Real {
        0.5 * self.data.iter().map(|v| v * v).sum::<Real>()
    }
}
