//! Small dense symmetric linear algebra in f64.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Sym {
    pub n: usize,
    pub a: Vec<f64>,
}

impl Sym {
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::shape("square matrix", &[a.len()], &[n * n]));
        }
        Ok(Self { n, a })
    }

    pub fn identity(n: usize) -> Self {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        Self { n, a }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    pub fn matmul(&self, b: &Sym) -> Sym {
        let n = self.n;
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let x = self.a[i * n + k];
                if x == 0.0 {
                    continue;
                }
                for j in 0..n {
                    c[i * n + j] += x * b.a[k * n + j];
                }
            }
        }
        Sym { n, a: c }
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Sym {
        let n = self.n;
        let mut c = self.a.clone();
        for i in 0..n {
            for j in 0..n {
                c[i * n + j] = 0.5 * (self.a[i * n + j] + self.a[j * n + i]);
            }
        }
        Sym { n, a: c }
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the eigenvectors as columns of a row-major matrix.
pub fn eigh(m: &Sym) -> (Vec<f64>, Sym) {
    let n = m.n;
    let mut a = m.symmetrized().a;
    let mut v = Sym::identity(n).a;
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), Sym { n, a: v })
}

/// Square root of a symmetric positive semi-definite matrix. Eigenvalues
/// down to `-tol * max(1, max|λ|)` are treated as zero; anything more
/// negative is an error.
pub fn sqrt_psd(m: &Sym, tol: f64) -> Result<Sym> {
    let (vals, vecs) = eigh(m);
    let roots = clamp_roots(&vals, tol)?;
    let n = m.n;
    let mut out = vec![0.0; n * n];
    for (k, r) in roots.iter().enumerate() {
        if *r == 0.0 {
            continue;
        }
        for i in 0..n {
            let vi = vecs.a[i * n + k] * r;
            for j in 0..n {
                out[i * n + j] += vi * vecs.a[j * n + k];
            }
        }
    }
    Ok(Sym { n, a: out })
}

/// Square roots of eigenvalues with the tolerance clamp applied.
pub fn clamp_roots(vals: &[f64], tol: f64) -> Result<Vec<f64>> {
    let big = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = -tol * big;
    vals.iter()
        .map(|&l| {
            if l >= 0.0 {
                Ok(libm::sqrt(l))
            } else if l >= floor {
                Ok(0.0)
            } else {
                Err(Error::NumericFault(alloc::format!(
                    "matrix square root: eigenvalue {l:.3e} below tolerance {floor:.3e} (largest |λ| {big:.3e})"
                )))
            }
        })
        .collect()
}
