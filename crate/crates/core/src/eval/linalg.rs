//! Dense symmetric eigen-decomposition (cyclic Jacobi) and the Fréchet
//! distance between Gaussians built on it.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix<T> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> SquareMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::Dimension {
                left: n,
                right: r.len(),
            });
        }
        Ok(Self { n, data: rows.concat() })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n + j] = v;
    }

    pub fn trace(&self) -> T {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out.data[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add_diagonal(&mut self, v: T) {
        for i in 0..self.n {
            self.data[i * self.n + i] += v;
        }
    }

    /// `(A + Aᵀ) / 2`
    pub fn symmetrized(&self) -> Self {
        let half = T::lit(0.5);
        let mut out = self.clone();
        for i in 0..self.n {
            for j in 0..self.n {
                out.set(i, j, half * (self.get(i, j) + self.get(j, i)));
            }
        }
        out
    }
}

/// Eigenvalues and column eigenvectors (`vectors.get(i, k)` is component `i`
/// of eigenvector `k`) of a symmetric matrix.
pub fn symmetric_eigen<T: Scalar>(a: &SquareMatrix<T>) -> (Vec<T>, SquareMatrix<T>) {
    let n = a.n;
    let mut m = a.symmetrized();
    let mut v = SquareMatrix::identity(n);
    let scale: T = m.data.iter().map(|&x| x * x).sum::<T>().sqrt();
    let tol = T::epsilon() * scale.max(T::min_positive_value());
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let (app, aqq) = (m.get(p, p), m.get(q, q));
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| m.get(i, i)).collect(), v)
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are
/// floored at zero.
pub fn sqrtm_psd<T: Scalar>(a: &SquareMatrix<T>) -> SquareMatrix<T> {
    let n = a.n;
    let (vals, vecs) = symmetric_eigen(a);
    let roots: Vec<T> = vals.iter().map(|&l| l.max(T::zero()).sqrt()).collect();
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = T::zero();
            for k in 0..n {
                acc += vecs.get(i, k) * roots[k] * vecs.get(j, k);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Jitter added to both covariances before taking square roots.
pub const COVARIANCE_JITTER: f64 = 1e-6;

/// `‖μ_a−μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, clamped at zero.
///
/// `Tr (Σ_a Σ_b)^{1/2}` is evaluated as `Tr (A^{1/2} Σ_b A^{1/2})^{1/2}`,
/// which keeps every decomposition symmetric.
pub fn frechet_distance<T: Scalar>(
    mu_a: &[T],
    cov_a: &SquareMatrix<T>,
    mu_b: &[T],
    cov_b: &SquareMatrix<T>,
) -> Result<T> {
    let n = mu_a.len();
    if mu_b.len() != n || cov_a.n != n || cov_b.n != n {
        return Err(Error::Dimension {
            left: n,
            right: mu_b.len().max(cov_a.n).max(cov_b.n),
        });
    }
    let jitter = T::lit(COVARIANCE_JITTER);
    let mut a = cov_a.symmetrized();
    a.add_diagonal(jitter);
    let mut b = cov_b.symmetrized();
    b.add_diagonal(jitter);
    let ra = sqrtm_psd(&a);
    let inner = ra.matmul(&b).matmul(&ra);
    let (vals, _) = symmetric_eigen(&inner);
    let tr_sqrt: T = vals.iter().map(|&l| l.max(T::zero()).sqrt()).sum();
    let mean_term: T = mu_a.iter().zip(mu_b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    let d = mean_term + a.trace() + b.trace() - T::lit(2.0) * tr_sqrt;
    Ok(d.max(T::zero()))
}

/// Sample mean and unbiased covariance of row vectors (zero covariance for a
/// single row).
pub fn mean_and_covariance<T: Scalar>(rows: &[Vec<T>]) -> Result<(Vec<T>, SquareMatrix<T>)> {
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid("cannot fit a Gaussian to an empty set"))?;
    let d = first.len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::Dimension {
            left: d,
            right: r.len(),
        });
    }
    let n = T::lit(rows.len() as f64);
    let mut mu = vec![T::zero(); d];
    for r in rows {
        for (m, &v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut cov = SquareMatrix::zeros(d);
    if rows.len() > 1 {
        let denom = T::lit((rows.len() - 1) as f64);
        for r in rows {
            let c: Vec<T> = r.iter().zip(&mu).map(|(&v, &m)| v - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov.data[i * d + j] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov.data[i * d + j] / denom;
                cov.data[i * d + j] = v;
                cov.data[j * d + i] = v;
            }
        }
    }
    Ok((mu, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_from_seed};

    fn random_spd(n: usize, seed: u64) -> SquareMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        let rows: Vec<Vec<f64>> = (0..n + 3).map(|_| normal_vec(&mut rng, n)).collect();
        mean_and_covariance(&rows).unwrap().1
    }

    #[test]
    fn eigen_reconstructs() {
        let a = random_spd(6, 1);
        let (vals, vecs) = symmetric_eigen(&a);
        for i in 0..6 {
            for j in 0..6 {
                let r: f64 = (0..6).map(|k| vecs.get(i, k) * vals[k] * vecs.get(j, k)).sum();
                assert!((r - a.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        let a = random_spd(5, 2);
        let r = sqrtm_psd(&a);
        let rr = r.matmul(&r);
        for (x, y) in rr.data.iter().zip(&a.data) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_gaussians() {
        let i = SquareMatrix::<f64>::identity(4);
        let d = frechet_distance(&[0.0; 4], &i, &[1.0, 2.0, 0.0, -1.0], &i).unwrap();
        assert!((d - 6.0).abs() < 1e-10);
    }

    #[test]
    fn scalar_case_closed_form() {
        // 1-D: (μa−μb)² + (σa − σb)²
        let a = SquareMatrix::from_rows(&[vec![4.0]]).unwrap();
        let b = SquareMatrix::from_rows(&[vec![9.0]]).unwrap();
        let d = frechet_distance(&[1.0], &a, &[0.0], &b).unwrap();
        let (sa, sb) = ((4.0f64 + 1e-6).sqrt(), (9.0f64 + 1e-6).sqrt());
        assert!((d - (1.0 + (sa - sb).powi(2))).abs() < 1e-10);
    }
}
