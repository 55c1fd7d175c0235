//! Dense Hermitian positive-definite solves for the per-frequency normal
//! equations.

use num_complex::Complex64;

/// Relative pivot threshold below which a system counts as near-singular.
const PIVOT_TOL: f64 = 1e-12;
/// Diagonal loading applied to near-singular systems, relative to `trace / n`.
pub const DIAGONAL_LOADING: f64 = 1e-8;

/// Lower-triangular Cholesky factor `L` with `A = L L^H`, row-major.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<Complex64>,
    /// Whether diagonal loading was needed to factor the system.
    pub loaded: bool,
}

impl Cholesky {
    /// Factors the Hermitian matrix `a` (row-major, `n x n`).
    ///
    /// Falls back to `a + eps I` with `eps = 1e-8 trace(a) / n` when a pivot is
    /// not safely positive. Returns `None` if even the loaded system fails.
    pub fn factor(a: &[Complex64], n: usize) -> Option<Self> {
        debug_assert_eq!(a.len(), n * n);
        if n == 0 {
            return Some(Self {
                n,
                l: Vec::new(),
                loaded: false,
            });
        }
        let max_diag = (0..n).map(|i| a[i * n + i].re).fold(0.0, f64::max);
        if max_diag <= 0.0 || !max_diag.is_finite() {
            return None;
        }
        if let Some(l) = try_factor(a, n, PIVOT_TOL * max_diag) {
            return Some(Self {
                n,
                l,
                loaded: false,
            });
        }
        let trace: f64 = (0..n).map(|i| a[i * n + i].re).sum();
        let eps = DIAGONAL_LOADING * trace / n as f64;
        let mut loaded = a.to_vec();
        for i in 0..n {
            loaded[i * n + i] += eps;
        }
        try_factor(&loaded, n, 0.0).map(|l| Self {
            n,
            l,
            loaded: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let l = &self.l;
        let mut y = b.to_vec();
        // L y = b
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i].re;
        }
        // L^H x = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k * n + i].conj() * y[k];
            }
            y[i] = s / l[i * n + i].re;
        }
        y
    }
}

fn try_factor(a: &[Complex64], n: usize, min_pivot: f64) -> Option<Vec<Complex64>> {
    let mut l = vec![Complex64::new(0.0, 0.0); n * n];
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for k in 0..j {
            d -= l[j * n + k].norm_sqr();
        }
        if !(d > min_pivot) {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = Complex64::new(djj, 0.0);
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k].conj();
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(l)
}
