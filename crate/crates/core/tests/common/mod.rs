//! Shared test oracles, independent of the library's solver path.

use nalgebra::DMatrix;

/// Weighted least squares by explicit normal equations: builds X'WX and
/// X'Wy elementwise, equilibrates the normal matrix by its diagonal and
/// inverts by Gauss-Jordan elimination with partial pivoting. Returns the
/// coefficients and (X'WX)^-1.
pub fn normal_equations_wls(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
) -> (Vec<f64>, DMatrix<f64>) {
    let (n, p) = (x.nrows(), x.ncols());
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);

    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = vec![0.0; p];
    for i in 0..n {
        let wi = w(i);
        for a in 0..p {
            xtwy[a] += wi * x[(i, a)] * y[i];
            for b in 0..p {
                xtwx[(a, b)] += wi * x[(i, a)] * x[(i, b)];
            }
        }
    }

    // Diagonal equilibration keeps the elimination working on the
    // correlation-scale matrix.
    let scale: Vec<f64> = (0..p).map(|j| 1.0 / xtwx[(j, j)].sqrt()).collect();
    let mut balanced = xtwx.clone();
    for a in 0..p {
        for b in 0..p {
            balanced[(a, b)] *= scale[a] * scale[b];
        }
    }
    let inv_balanced = gauss_jordan(balanced);
    let mut inv = DMatrix::<f64>::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            inv[(a, b)] = inv_balanced[(a, b)] * scale[a] * scale[b];
        }
    }

    let mut beta = vec![0.0; p];
    for a in 0..p {
        for b in 0..p {
            beta[a] += inv[(a, b)] * xtwy[b];
        }
    }
    (beta, inv)
}

pub fn gauss_jordan(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut inv = DMatrix::<f64>::identity(n, n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|i, j| a[(*i, col)].abs().total_cmp(&a[(*j, col)].abs()))
            .unwrap();
        if pivot != col {
            a.swap_rows(col, pivot);
            inv.swap_rows(col, pivot);
        }
        let diag = a[(col, col)];
        assert!(diag != 0.0, "singular matrix in oracle");
        for j in 0..n {
            a[(col, j)] /= diag;
            inv[(col, j)] /= diag;
        }
        for row in 0..n {
            if row != col {
                let factor = a[(row, col)];
                for j in 0..n {
                    a[(row, j)] -= factor * a[(col, j)];
                    inv[(row, j)] -= factor * inv[(col, j)];
                }
            }
        }
    }
    inv
}

/// Print one acceptance line and panic on failure.
pub fn criterion(name: &str, pass: bool, detail: &str) {
    if pass {
        println!("[PASS] {name}: {detail}");
    } else {
        println!("[FAIL] {name}: {detail}");
        panic!("acceptance criterion failed: {name}: {detail}");
    }
}
