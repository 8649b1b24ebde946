//! Naive dense reference computations for tests. Nothing here shares code
//! with the factorization-based paths under test.

use nalgebra::DMatrix;

/// Gauss-Jordan inverse with partial pivoting.
pub fn naive_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = DMatrix::<f64>::identity(n, n);
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs()))
            .unwrap();
        a.swap_rows(c, p);
        inv.swap_rows(c, p);
        let d = a[(c, c)];
        for j in 0..n {
            a[(c, j)] /= d;
            inv[(c, j)] /= d;
        }
        for i in 0..n {
            if i != c {
                let f = a[(i, c)];
                for j in 0..n {
                    a[(i, j)] -= f * a[(c, j)];
                    inv[(i, j)] -= f * inv[(c, j)];
                }
            }
        }
    }
    inv
}

/// Squared-exponential kernel written out longhand.
pub fn naive_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, ell: f64, sf2: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut s = 0.0;
        for t in 0..a.ncols() {
            s += (a[(i, t)] - b[(j, t)]).powi(2);
        }
        sf2 * (-s / (2.0 * ell * ell)).exp()
    })
}
