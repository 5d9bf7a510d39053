//! Column-wise prefix sums over a T×K matrix whose entries may be infinite.
//!
//! Infinite entries are counted separately so that range sums stay O(1)
//! without producing `inf - inf`.

use ndarray::{Array2, ArrayView2};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixSums<S> {
    finite: Array2<S>,
    pos_inf: Array2<u32>,
    neg_inf: Array2<u32>,
}

impl<S: Scalar> PrefixSums<S> {
    pub fn new(values: ArrayView2<'_, S>) -> Self {
        let (t, k) = values.dim();
        let mut finite = Array2::zeros((t + 1, k));
        let mut pos_inf = Array2::zeros((t + 1, k));
        let mut neg_inf = Array2::zeros((t + 1, k));
        for s in 0..t {
            for a in 0..k {
                let x = values[[s, a]];
                let (f, p, n) = if x == S::infinity() {
                    (S::zero(), 1, 0)
                } else if x == S::neg_infinity() {
                    (S::zero(), 0, 1)
                } else {
                    (x, 0, 0)
                };
                finite[[s + 1, a]] = finite[[s, a]] + f;
                pos_inf[[s + 1, a]] = pos_inf[[s, a]] + p;
                neg_inf[[s + 1, a]] = neg_inf[[s, a]] + n;
            }
        }
        Self {
            finite,
            pos_inf,
            neg_inf,
        }
    }

    /// Number of rows T of the underlying matrix.
    pub fn frames(&self) -> usize {
        self.finite.nrows() - 1
    }

    pub fn classes(&self) -> usize {
        self.finite.ncols()
    }

    /// Σ over rows `from..to` (half-open) of column `a`.
    #[inline]
    pub fn range(&self, from: usize, to: usize, a: usize) -> S {
        let p = self.pos_inf[[to, a]] - self.pos_inf[[from, a]];
        let n = self.neg_inf[[to, a]] - self.neg_inf[[from, a]];
        match (p > 0, n > 0) {
            (true, true) => S::nan(),
            (true, false) => S::infinity(),
            (false, true) => S::neg_infinity(),
            (false, false) => self.finite[[to, a]] - self.finite[[from, a]],
        }
    }
}
