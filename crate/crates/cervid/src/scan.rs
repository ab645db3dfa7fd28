//! Associative parallel scan over affine recurrence elements.
//!
//! An element `(A, b)` represents the map `x -> A x + b`. Composing "apply
//! `e1` then `e2`" gives the monoid operation
//!
//! ```text
//! combine(e1, e2) = (A2 * A1,  A2 * b1 + b2)
//! ```
//!
//! with identity `(I, 0)`. The inclusive scan of a sequence of elements
//! therefore evaluates a first-order linear recurrence at every prefix, which
//! is exactly the Newton linear solve of the DEER iteration. The diagonal
//! variant stores `A = diag(a)` as a vector and uses element-wise products.
//!
//! The scan is a blocked two-pass (reduce-then-propagate): pass 1 scans each
//! chunk independently, a cheap sequential pass combines the chunk totals
//! into per-chunk offsets, and pass 2 folds each offset into its chunk. Work
//! is `O(T)` combines; depth is `O(T / workers + #chunks)`. Chunk boundaries
//! depend only on the configured worker count, so results are reproducible
//! for a fixed configuration.
//!
//! Non-finite values are deliberately *not* filtered here: if a recurrence
//! overflows, the garbage propagates to the output so the solver above can
//! detect it and apply its reset heuristic.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::exec::Exec;
use crate::{Error, Mode, Real, Result};

/// One dense affine element `(A, b)`: the map `x -> A x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseElement {
    pub a: DMatrix<Real>,
    pub b: DVector<Real>,
}

impl DenseElement {
    /// The monoid identity `(I, 0)`.
    pub fn identity(dim: usize) -> Self {
        DenseElement {
            a: DMatrix::identity(dim, dim),
            b: DVector::zeros(dim),
        }
    }

    /// `combine(e1, e2) = (A2 A1, A2 b1 + b2)`: apply `e1`, then `e2`.
    pub fn combine(e1: &Self, e2: &Self) -> Result<Self> {
        if e1.a.nrows() != e2.a.nrows() {
            return Err(Error::shape("DenseElement::combine", e1.a.nrows(), e2.a.nrows()));
        }
        Ok(DenseElement {
            a: &e2.a * &e1.a,
            b: &e2.a * &e1.b + &e2.b,
        })
    }

    /// `A x + b`.
    pub fn apply(&self, x: &DVector<Real>) -> DVector<Real> {
        &self.a * x + &self.b
    }
}

/// One diagonal affine element: `A = diag(a)` stored as a vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagElement {
    pub a: DVector<Real>,
    pub b: DVector<Real>,
}

impl DiagElement {
    pub fn identity(dim: usize) -> Self {
        DiagElement {
            a: DVector::from_element(dim, 1.0),
            b: DVector::zeros(dim),
        }
    }

    /// Element-wise: `(a2 .* a1, a2 .* b1 + b2)`.
    pub fn combine(e1: &Self, e2: &Self) -> Result<Self> {
        if e1.a.len() != e2.a.len() {
            return Err(Error::shape("DiagElement::combine", e1.a.len(), e2.a.len()));
        }
        Ok(DiagElement {
            a: e2.a.component_mul(&e1.a),
            b: e2.a.component_mul(&e1.b) + &e2.b,
        })
    }

    pub fn apply(&self, x: &DVector<Real>) -> DVector<Real> {
        self.a.component_mul(x) + &self.b
    }
}

/// A packed sequence of affine elements, dense or diagonal.
///
/// Matrices live in one flat row-major buffer and offsets in another, so the
/// scan runs allocation-free and storage is exactly accountable:
/// `T * D^2` matrix entries in dense mode versus `T * D` in diagonal mode
/// (the `b` offsets are `T * D` in both).
#[derive(Debug, Clone)]
pub struct ElementSeq {
    mode: Mode,
    dim: usize,
    len: usize,
    pub(crate) a: Vec<Real>,
    pub(crate) b: Vec<Real>,
}

impl ElementSeq {
    pub fn zeros(mode: Mode, dim: usize, len: usize) -> Self {
        assert!(dim >= 1, "element dimension must be >= 1");
        let a_stride = match mode {
            Mode::Dense => dim * dim,
            Mode::Diagonal => dim,
        };
        ElementSeq {
            mode,
            dim,
            len,
            a: vec![0.0; len * a_stride],
            b: vec![0.0; len * dim],
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn a_stride(&self) -> usize {
        match self.mode {
            Mode::Dense => self.dim * self.dim,
            Mode::Diagonal => self.dim,
        }
    }

    /// The `A` part of element `i` (row-major `D x D`, or length `D` diagonal).
    pub fn a_part(&self, i: usize) -> &[Real] {
        let s = self.a_stride();
        &self.a[i * s..(i + 1) * s]
    }

    pub fn a_part_mut(&mut self, i: usize) -> &mut [Real] {
        let s = self.a_stride();
        &mut self.a[i * s..(i + 1) * s]
    }

    /// The `b` part of element `i` (length `D`).
    pub fn b_part(&self, i: usize) -> &[Real] {
        &self.b[i * self.dim..(i + 1) * self.dim]
    }

    pub fn b_part_mut(&mut self, i: usize) -> &mut [Real] {
        &mut self.b[i * self.dim..(i + 1) * self.dim]
    }

    /// Element `i` as a dense struct (dense mode only).
    pub fn get_dense(&self, i: usize) -> DenseElement {
        assert_eq!(self.mode, Mode::Dense);
        let d = self.dim;
        let a = self.a_part(i);
        DenseElement {
            a: DMatrix::from_fn(d, d, |r, c| a[r * d + c]),
            b: DVector::from_row_slice(self.b_part(i)),
        }
    }

    /// Element `i` as a diagonal struct (diagonal mode only).
    pub fn get_diag(&self, i: usize) -> DiagElement {
        assert_eq!(self.mode, Mode::Diagonal);
        DiagElement {
            a: DVector::from_row_slice(self.a_part(i)),
            b: DVector::from_row_slice(self.b_part(i)),
        }
    }

    pub fn set_dense(&mut self, i: usize, e: &DenseElement) {
        assert_eq!(self.mode, Mode::Dense);
        let d = self.dim;
        let a = self.a_part_mut(i);
        for r in 0..d {
            for c in 0..d {
                a[r * d + c] = e.a[(r, c)];
            }
        }
        self.b_part_mut(i).copy_from_slice(e.b.as_slice());
    }

    pub fn set_diag(&mut self, i: usize, e: &DiagElement) {
        assert_eq!(self.mode, Mode::Diagonal);
        self.a_part_mut(i).copy_from_slice(e.a.as_slice());
        self.b_part_mut(i).copy_from_slice(e.b.as_slice());
    }

    /// Bytes of matrix (`A`-part) storage: the mode-dependent term that
    /// realizes the `O(TD^2)` vs `O(TD)` memory split.
    pub fn matrix_bytes(&self) -> u64 {
        (self.a.len() * std::mem::size_of::<Real>()) as u64
    }

    /// Bytes of offset (`b`-part) storage, identical across modes.
    pub fn offset_bytes(&self) -> u64 {
        (self.b.len() * std::mem::size_of::<Real>()) as u64
    }
}

/// `b_cur += A_cur * b_prev; A_cur = A_cur * A_prev` (row-major dense).
#[inline]
fn combine_dense_into(
    d: usize,
    a_prev: &[Real],
    b_prev: &[Real],
    a_cur: &mut [Real],
    b_cur: &mut [Real],
    scratch: &mut [Real],
) {
    // Offset first: it reads the unmodified A_cur.
    for i in 0..d {
        let row = &a_cur[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for j in 0..d {
            acc += row[j] * b_prev[j];
        }
        b_cur[i] += acc;
    }
    scratch.fill(0.0);
    for i in 0..d {
        for k in 0..d {
            let v = a_cur[i * d + k];
            let src = &a_prev[k * d..(k + 1) * d];
            let dst = &mut scratch[i * d..(i + 1) * d];
            for j in 0..d {
                dst[j] += v * src[j];
            }
        }
    }
    a_cur.copy_from_slice(scratch);
}

#[inline]
fn combine_diag_into(
    d: usize,
    a_prev: &[Real],
    b_prev: &[Real],
    a_cur: &mut [Real],
    b_cur: &mut [Real],
) {
    for j in 0..d {
        b_cur[j] += a_cur[j] * b_prev[j];
        a_cur[j] *= a_prev[j];
    }
}

/// In-place inclusive scan over one contiguous chunk of packed elements.
fn scan_chunk(mode: Mode, d: usize, a: &mut [Real], b: &mut [Real], scratch: &mut [Real]) {
    let a_stride = match mode {
        Mode::Dense => d * d,
        Mode::Diagonal => d,
    };
    let n = b.len() / d;
    for i in 1..n {
        let (a_head, a_tail) = a.split_at_mut(i * a_stride);
        let (b_head, b_tail) = b.split_at_mut(i * d);
        let a_prev = &a_head[(i - 1) * a_stride..];
        let b_prev = &b_head[(i - 1) * d..];
        match mode {
            Mode::Dense => combine_dense_into(
                d,
                a_prev,
                b_prev,
                &mut a_tail[..a_stride],
                &mut b_tail[..d],
                scratch,
            ),
            Mode::Diagonal => {
                combine_diag_into(d, a_prev, b_prev, &mut a_tail[..a_stride], &mut b_tail[..d])
            }
        }
    }
}

/// Folds a fixed prefix `(a_off, b_off)` into every element of a chunk.
fn fold_offset(
    mode: Mode,
    d: usize,
    a_off: &[Real],
    b_off: &[Real],
    a: &mut [Real],
    b: &mut [Real],
    scratch: &mut [Real],
) {
    let a_stride = match mode {
        Mode::Dense => d * d,
        Mode::Diagonal => d,
    };
    let n = b.len() / d;
    for i in 0..n {
        let a_cur = &mut a[i * a_stride..(i + 1) * a_stride];
        let b_cur = &mut b[i * d..(i + 1) * d];
        match mode {
            Mode::Dense => combine_dense_into(d, a_off, b_off, a_cur, b_cur, scratch),
            Mode::Diagonal => combine_diag_into(d, a_off, b_off, a_cur, b_cur),
        }
    }
}

/// In-place inclusive scan: element `i` becomes the composition of elements
/// `0..=i`. Parallel and sequential execution produce the same prefixes up to
/// floating-point association order.
pub fn inclusive_scan_in_place(seq: &mut ElementSeq, exec: &Exec) -> Result<()> {
    if seq.len == 0 {
        return Err(Error::Empty("inclusive_scan: no elements"));
    }
    let d = seq.dim;
    let mode = seq.mode;
    let a_stride = seq.a_stride();
    let chunk = exec.chunk_size(seq.len);

    if !exec.is_parallel() || chunk >= seq.len {
        let mut scratch = vec![0.0; a_stride];
        scan_chunk(mode, d, &mut seq.a, &mut seq.b, &mut scratch);
        return Ok(());
    }

    // Pass 1: scan each chunk independently.
    exec.install(|| {
        seq.a
            .par_chunks_mut(chunk * a_stride)
            .zip(seq.b.par_chunks_mut(chunk * d))
            .for_each(|(a_chunk, b_chunk)| {
                let mut scratch = vec![0.0; a_stride];
                scan_chunk(mode, d, a_chunk, b_chunk, &mut scratch);
            });
    });

    // Sequential pass over chunk totals: offsets[c] = composition of all
    // elements before chunk c+1.
    let n_chunks = seq.len.div_ceil(chunk);
    let mut offsets = ElementSeq::zeros(mode, d, n_chunks - 1);
    {
        let mut scratch = vec![0.0; a_stride];
        // After pass 1 the last element of each chunk holds the chunk total.
        let total_idx = |c: usize| ((c + 1) * chunk).min(seq.len) - 1;
        let mut carry_a = seq.a_part(total_idx(0)).to_vec();
        let mut carry_b = seq.b_part(total_idx(0)).to_vec();
        offsets.a_part_mut(0).copy_from_slice(&carry_a);
        offsets.b_part_mut(0).copy_from_slice(&carry_b);
        for c in 1..n_chunks - 1 {
            // carry = combine(carry, total_c)
            let mut a_cur = seq.a_part(total_idx(c)).to_vec();
            let mut b_cur = seq.b_part(total_idx(c)).to_vec();
            match mode {
                Mode::Dense => {
                    combine_dense_into(d, &carry_a, &carry_b, &mut a_cur, &mut b_cur, &mut scratch)
                }
                Mode::Diagonal => combine_diag_into(d, &carry_a, &carry_b, &mut a_cur, &mut b_cur),
            }
            carry_a = a_cur;
            carry_b = b_cur;
            offsets.a_part_mut(c).copy_from_slice(&carry_a);
            offsets.b_part_mut(c).copy_from_slice(&carry_b);
        }
    }

    // Pass 2: fold each chunk's prefix offset into its elements.
    exec.install(|| {
        seq.a
            .par_chunks_mut(chunk * a_stride)
            .zip(seq.b.par_chunks_mut(chunk * d))
            .enumerate()
            .skip(1)
            .for_each(|(c, (a_chunk, b_chunk))| {
                let mut scratch = vec![0.0; a_stride];
                fold_offset(
                    mode,
                    d,
                    offsets.a_part(c - 1),
                    offsets.b_part(c - 1),
                    a_chunk,
                    b_chunk,
                    &mut scratch,
                );
            });
    });
    Ok(())
}

/// Generic blocked inclusive scan for any associative `combine`.
///
/// `combine(earlier, later)` must be associative; `items[i]` becomes the
/// combination of `items[0..=i]`. Used by the parallel Kalman filter, whose
/// elements are conditional-Gaussian messages rather than affine maps.
pub fn scan_in_place<T, F>(items: &mut [T], combine: F, exec: &Exec) -> Result<()>
where
    T: Send + Sync + Clone,
    F: Fn(&T, &T) -> T + Sync,
{
    if items.is_empty() {
        return Err(Error::Empty("scan: no elements"));
    }
    let chunk = exec.chunk_size(items.len());
    if !exec.is_parallel() || chunk >= items.len() {
        for i in 1..items.len() {
            items[i] = combine(&items[i - 1], &items[i]);
        }
        return Ok(());
    }

    exec.install(|| {
        items.par_chunks_mut(chunk).for_each(|c| {
            for i in 1..c.len() {
                c[i] = combine(&c[i - 1], &c[i]);
            }
        });
    });

    let n_chunks = items.len().div_ceil(chunk);
    let mut offsets: Vec<T> = Vec::with_capacity(n_chunks - 1);
    let mut carry = items[chunk - 1].clone();
    offsets.push(carry.clone());
    for c in 1..n_chunks - 1 {
        let total_idx = ((c + 1) * chunk - 1).min(items.len() - 1);
        carry = combine(&carry, &items[total_idx]);
        offsets.push(carry.clone());
    }

    exec.install(|| {
        items
            .par_chunks_mut(chunk)
            .enumerate()
            .skip(1)
            .for_each(|(c, chunk_items)| {
                let off = &offsets[c - 1];
                for it in chunk_items.iter_mut() {
                    *it = combine(off, it);
                }
            });
    });
    Ok(())
}
