//! Small dense helpers shared by the chain and solver modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Stationary row vector of a row-stochastic matrix.
///
/// Solves `(Mᵀ − I) a = 0` with the last balance equation replaced by
/// `Σ a = 1`. A singular system means more than one closed class.
pub fn stationary_vector(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = m.nrows();
    if n != m.ncols() || n == 0 {
        return Err(Error::DimensionMismatch(format!(
            "stationary vector of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let mut system = m.transpose();
    for k in 0..n {
        system[(k, k)] -= 1.0;
    }
    for col in 0..n {
        system[(n - 1, col)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let a = system.lu().solve(&rhs).ok_or(Error::NotIrreducible)?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotIrreducible);
    }
    Ok(a.iter().copied().collect())
}

/// Whether the directed graph of positive entries is strongly connected.
pub fn strongly_connected(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    if n == 0 {
        return false;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for w in 0..n {
                let weight = if forward { m[(v, w)] } else { m[(w, v)] };
                if weight > 0.0 && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Reshape a row-major flat buffer into nested rows.
pub fn to_rows(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
