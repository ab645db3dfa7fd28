//! Small numeric helpers shared by the bundled models.

use crate::Real;

#[inline]
pub(crate) fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub(crate) fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of `softplus` for positive `y`.
#[inline]
pub(crate) fn softplus_inv(y: Real) -> Real {
    debug_assert!(y > 0.0);
    y.exp_m1().ln()
}

/// `out += m * v` where `m` is column-major (nalgebra layout).
#[inline]
pub(crate) fn gemv_acc(out: &mut [Real], m: &nalgebra::DMatrix<Real>, v: &[Real]) {
    let (nr, nc) = m.shape();
    debug_assert_eq!(out.len(), nr);
    debug_assert_eq!(v.len(), nc);
    let data = m.as_slice();
    for j in 0..nc {
        let vj = v[j];
        let col = &data[j * nr..(j + 1) * nr];
        for (o, c) in out.iter_mut().zip(col) {
            *o += c * vj;
        }
    }
}

/// Element `(i, j)` of a column-major matrix without per-access views.
#[inline]
pub(crate) fn at(m: &nalgebra::DMatrix<Real>, i: usize, j: usize) -> Real {
    m.as_slice()[j * m.nrows() + i]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_roundtrip_and_tails() {
        for &y in &[1e-6, 0.1, 1.0, 5.0, 40.0] {
            let x = softplus_inv(y);
            assert!((softplus(x) - y).abs() < 1e-9 * y.max(1.0));
        }
        // Large arguments neither overflow nor lose monotonicity.
        assert!(softplus(800.0).is_finite());
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
        assert!(sigmoid(-800.0) == 0.0 && sigmoid(800.0) == 1.0);
    }
}
