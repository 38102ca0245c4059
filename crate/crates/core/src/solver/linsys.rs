//! Square sparse systems with a pattern fixed across Newton iterations.
//!
//! The symbolic LU analysis is computed once per pattern; if the sparse
//! factorization fails or produces a non-finite solution the system is solved
//! again with a dense full-pivoting LU.

use std::cell::OnceCell;

use faer::linalg::solvers::{FullPivLu, Solve};
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::{Mat, MatMut};

use crate::error::{Error, Result};

pub(crate) struct SparseSystem {
    n: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    lu: Option<SymbolicLu<usize>>,
}

impl SparseSystem {
    /// `entries` lists (row, col) in the order values will later be supplied.
    /// Duplicates are summed.
    pub fn new(n: usize, entries: &[(usize, usize)]) -> Result<Self> {
        let idx: Vec<Pair<usize, usize>> = entries.iter().map(|&(row, col)| Pair { row, col }).collect();
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(n, n, &idx)
            .map_err(|e| Error::Solver(format!("sparse pattern: {e:?}")))?;
        let lu = SymbolicLu::try_new(symbolic.as_ref()).ok();
        Ok(SparseSystem {
            n,
            rows: entries.iter().map(|e| e.0).collect(),
            cols: entries.iter().map(|e| e.1).collect(),
            symbolic,
            argsort,
            lu,
        })
    }

    /// Factorizes `A` given by `values` in pattern order.
    pub fn factor(&self, values: &[f64]) -> Factor<'_> {
        debug_assert_eq!(values.len(), self.rows.len());
        let sparse = self.lu.clone().and_then(|symbolic| {
            let mat = SparseColMat::new_from_argsort(self.symbolic.clone(), &self.argsort, values).ok()?;
            Lu::try_new_with_symbolic(symbolic, mat.as_ref()).ok()
        });
        Factor {
            sys: self,
            values: values.to_vec(),
            sparse,
            dense: OnceCell::new(),
        }
    }

    /// Solves `A x = rhs` in place.
    pub fn solve(&self, values: &[f64], rhs: &mut [f64]) -> Result<()> {
        self.factor(values).solve(rhs)
    }
}

pub(crate) struct Factor<'a> {
    sys: &'a SparseSystem,
    values: Vec<f64>,
    sparse: Option<Lu<usize, f64>>,
    dense: OnceCell<FullPivLu<f64>>,
}

impl Factor<'_> {
    pub fn solve(&self, rhs: &mut [f64]) -> Result<()> {
        let n = self.sys.n;
        debug_assert_eq!(rhs.len(), n);
        if let Some(lu) = &self.sparse {
            let mut x = rhs.to_vec();
            lu.solve_in_place(MatMut::from_column_major_slice_mut(&mut x, n, 1));
            if x.iter().all(|v| v.is_finite()) {
                rhs.copy_from_slice(&x);
                return Ok(());
            }
        }
        let lu = self.dense.get_or_init(|| {
            let mut a = Mat::<f64>::zeros(n, n);
            for ((&r, &c), &v) in self.sys.rows.iter().zip(&self.sys.cols).zip(&self.values) {
                a[(r, c)] += v;
            }
            a.full_piv_lu()
        });
        lu.solve_in_place(MatMut::from_column_major_slice_mut(rhs, n, 1));
        if rhs.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Solver("singular Newton system".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_indefinite_system_with_duplicates() {
        // [[2, 1], [1, 0]] with the (0, 0) entry split in two.
        let sys = SparseSystem::new(2, &[(0, 0), (0, 1), (1, 0), (0, 0)]).unwrap();
        let mut rhs = [3.0, 1.0];
        sys.solve(&[1.5, 1.0, 1.0, 0.5], &mut rhs).unwrap();
        assert!((rhs[0] - 1.0).abs() < 1e-14 && (rhs[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_system_is_an_error() {
        let sys = SparseSystem::new(2, &[(0, 0), (1, 0)]).unwrap();
        let mut rhs = [1.0, 1.0];
        assert!(sys.solve(&[1.0, 1.0], &mut rhs).is_err());
    }
}
