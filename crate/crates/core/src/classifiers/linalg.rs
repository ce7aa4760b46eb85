//! Dense symmetric positive definite solves in f64.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Lower Cholesky factor of `a`, or `None` if a pivot is not safely positive.
pub(crate) fn cholesky(a: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(0.0, f64::max);
    let floor = scale * n as f64 * f64::EPSILON;
    // Row-major lower triangle, so row dot products run over contiguous memory.
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let d = {
            let row = l.row(j);
            let r = row.as_slice().unwrap();
            a[[j, j]] - r[..j].iter().map(|v| v * v).sum::<f64>()
        };
        if !(d > floor) {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let s = {
                let (ri, rj) = (l.row(i), l.row(j));
                let (ri, rj) = (ri.as_slice().unwrap(), rj.as_slice().unwrap());
                ri[..j].iter().zip(&rj[..j]).map(|(x, y)| x * y).sum::<f64>()
            };
            l[[i, j]] = (a[[i, j]] - s) / d;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ X = B` in place of `b`.
pub(crate) fn cholesky_solve(l: &Array2<f64>, mut b: Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    for col in 0..b.ncols() {
        let mut x: Vec<f64> = b.column(col).to_vec();
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[[i, k]] * x[k]).sum();
            x[i] = (x[i] - s) / l[[i, i]];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[[k, i]] * x[k]).sum();
            x[i] = (x[i] - s) / l[[i, i]];
        }
        b.column_mut(col).iter_mut().zip(x).for_each(|(d, v)| *d = v);
    }
    b
}

/// Solves `(G + λI) X = R` for symmetric `G`.
pub(crate) fn solve_ridge(gram: ArrayView2<'_, f64>, rhs: ArrayView2<'_, f64>, lambda: f64) -> Result<Array2<f64>> {
    if gram.nrows() != gram.ncols() || gram.nrows() != rhs.nrows() {
        return Err(Error::Dimension(format!(
            "ridge system {:?} with right-hand side {:?}",
            gram.dim(),
            rhs.dim()
        )));
    }
    let mut a = gram.to_owned();
    a.diag_mut().iter_mut().for_each(|v| *v += lambda);
    let l = cholesky(a.view()).ok_or_else(|| {
        Error::Solver(format!(
            "ridge system is singular or indefinite at lambda = {lambda}; use a larger lambda > 0"
        ))
    })?;
    Ok(cholesky_solve(&l, rhs.to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_small_spd_system() {
        let g = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let x = array![[1.0, -1.0], [2.0, 0.5], [-3.0, 0.0]];
        let b = g.dot(&x);
        let got = solve_ridge(g.view(), b.view(), 0.0).unwrap();
        assert!((&got - &x).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn singular_system_fails() {
        let g = array![[1.0, 1.0], [1.0, 1.0]];
        let b = array![[1.0], [1.0]];
        assert!(matches!(solve_ridge(g.view(), b.view(), 0.0), Err(Error::Solver(_))));
        assert!(solve_ridge(g.view(), b.view(), 0.5).is_ok());
    }
}
