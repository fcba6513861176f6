//! Minimal dense linear algebra in f64: matrix products, symmetric
//! eigendecomposition (cyclic Jacobi) and linear solves with partial
//! pivoting. Everything the editing math needs, nothing more.

use crate::error::{Result, XeditError};
use serde::{Deserialize, Serialize};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from a flat row-major buffer. Rejects length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(XeditError::InvalidConfig(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        let m = Matrix { rows, cols, data };
        m.check_finite("construction")?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(XeditError::InvalidConfig(
                "ragged rows in matrix literal".into(),
            ));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    /// Column vector from a slice.
    pub fn column(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Rank-one update `self += v vᵀ`, used for covariance accumulation.
    pub fn add_outer(&mut self, v: &[f64]) -> Result<()> {
        if self.rows != v.len() || self.cols != v.len() {
            return Err(XeditError::DimMismatch {
                op: "add_outer",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: v.len(),
                right_cols: 1,
            });
        }
        for i in 0..v.len() {
            let vi = v[i];
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &vj) in row.iter_mut().zip(v) {
                *r += vi * vj;
            }
        }
        Ok(())
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(XeditError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(XeditError::DimMismatch {
                op,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(())
    }
}

/// Symmetric eigendecomposition result. Eigenvalues ascending, eigenvectors
/// stored as columns of an orthonormal matrix in matching order.
#[derive(Debug, Clone)]
pub struct EigResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

/// `a * b` with an ikj inner loop (autovectorizes; this is the hot path of
/// every forward pass and of the closed-form update).
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(XeditError::DimMismatch {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        let crow = &mut c.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    Ok(c)
}

const EIG_MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a (nearly) symmetric matrix via cyclic Jacobi
/// rotations. The input is symmetrized as `(S + Sᵀ)/2` first; covariance
/// accumulation leaves rounding asymmetry behind.
///
/// Converges when the off-diagonal Frobenius norm drops below
/// `1e-12 * ||S||_F`; errors after 100 sweeps otherwise.
pub fn sym_eig(s: &Matrix) -> Result<EigResult> {
    if !s.is_square() {
        return Err(XeditError::NotSquare {
            op: "sym_eig",
            rows: s.rows,
            cols: s.cols,
        });
    }
    let n = s.rows;
    if n == 0 {
        return Ok(EigResult {
            eigenvalues: vec![],
            eigenvectors: Matrix::zeros(0, 0),
        });
    }

    // Symmetrize the working copy.
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.data[i * n + j] = 0.5 * (s.get(i, j) + s.get(j, i));
        }
    }
    let tol = 1e-12 * a.frob_norm();
    let mut v = Matrix::identity(n);

    let mut sweeps = 0;
    loop {
        let off = off_diag_norm(&a);
        if off <= tol {
            break;
        }
        if sweeps >= EIG_MAX_SWEEPS {
            return Err(XeditError::EigNonConvergence {
                sweeps,
                offdiag: off,
            });
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta.abs() > 1e150 {
                    // Avoid overflow in theta^2; rotation is tiny anyway.
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;

                // Rotate rows/columns p and q of the symmetric matrix.
                for j in 0..n {
                    if j != p && j != q {
                        let ajp = a.get(j, p);
                        let ajq = a.get(j, q);
                        let njp = c * ajp - sn * ajq;
                        let njq = sn * ajp + c * ajq;
                        a.set(j, p, njp);
                        a.set(p, j, njp);
                        a.set(j, q, njq);
                        a.set(q, j, njq);
                    }
                }
                let napp = c * c * app - 2.0 * sn * c * apq + sn * sn * aqq;
                let naqq = sn * sn * app + 2.0 * sn * c * apq + c * c * aqq;
                a.set(p, p, napp);
                a.set(q, q, naqq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);

                // Accumulate eigenvectors (columns p, q of V).
                for j in 0..n {
                    let vjp = v.get(j, p);
                    let vjq = v.get(j, q);
                    v.set(j, p, c * vjp - sn * vjq);
                    v.set(j, q, sn * vjp + c * vjq);
                }
            }
        }
    }

    // Sort ascending, permuting eigenvector columns to match.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).partial_cmp(&a.get(j, j)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new_col, v.get(r, old_col));
        }
    }

    Ok(EigResult {
        eigenvalues,
        eigenvectors: vectors,
    })
}

fn off_diag_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let x = a.get(i, j);
                sum += x * x;
            }
        }
    }
    sum.sqrt()
}

const COND_LIMIT: f64 = 1e12;

/// Solve `a X = b` for X by LU with partial pivoting. `a` must be square and
/// well conditioned; the Eq.-5 system matrix is identity plus
/// PSD-times-projector terms, which is mildly nonsymmetric in floating point,
/// so a general solver is used rather than Cholesky.
///
/// The pivot ratio `max|u_ii| / min|u_ii|` serves as the condition estimate;
/// above 1e12 the solve is refused.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(XeditError::NotSquare {
            op: "solve_spd",
            rows: a.rows,
            cols: a.cols,
        });
    }
    if a.rows != b.rows {
        return Err(XeditError::DimMismatch {
            op: "solve_spd",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let n = a.rows;
    if n == 0 {
        return Ok(Matrix::zeros(0, b.cols));
    }

    let mut lu = a.data.clone();
    let mut perm: Vec<usize> = (0..n).collect();

    for k in 0..n {
        // Partial pivot.
        let mut pivot = k;
        let mut best = lu[k * n + k].abs();
        for i in k + 1..n {
            let cand = lu[i * n + k].abs();
            if cand > best {
                best = cand;
                pivot = i;
            }
        }
        if pivot != k {
            for j in 0..n {
                lu.swap(k * n + j, pivot * n + j);
            }
            perm.swap(k, pivot);
        }
        let pkk = lu[k * n + k];
        if pkk == 0.0 {
            return Err(XeditError::IllConditioned {
                cond: f64::INFINITY,
                limit: COND_LIMIT,
            });
        }
        for i in k + 1..n {
            let factor = lu[i * n + k] / pkk;
            lu[i * n + k] = factor;
            if factor != 0.0 {
                for j in k + 1..n {
                    lu[i * n + j] -= factor * lu[k * n + j];
                }
            }
        }
    }

    let mut umax = 0.0f64;
    let mut umin = f64::INFINITY;
    for k in 0..n {
        let d = lu[k * n + k].abs();
        umax = umax.max(d);
        umin = umin.min(d);
    }
    let cond = if umin == 0.0 {
        f64::INFINITY
    } else {
        umax / umin
    };
    if cond > COND_LIMIT {
        return Err(XeditError::IllConditioned {
            cond,
            limit: COND_LIMIT,
        });
    }

    let m = b.cols;
    let mut x = Matrix::zeros(n, m);
    // Apply the row permutation to b.
    for (i, &src) in perm.iter().enumerate() {
        x.row_mut(i).copy_from_slice(b.row(src));
    }
    // Forward substitution (L has unit diagonal).
    for i in 1..n {
        for k in 0..i {
            let l = lu[i * n + k];
            if l != 0.0 {
                let (head, tail) = x.data.split_at_mut(i * m);
                let xk = &head[k * m..(k + 1) * m];
                let xi = &mut tail[..m];
                for j in 0..m {
                    xi[j] -= l * xk[j];
                }
            }
        }
    }
    // Back substitution.
    for i in (0..n).rev() {
        for k in i + 1..n {
            let u = lu[i * n + k];
            if u != 0.0 {
                let (head, tail) = x.data.split_at_mut(k * m);
                let xi = &mut head[i * m..(i + 1) * m];
                let xk = &tail[..m];
                for j in 0..m {
                    xi[j] -= u * xk[j];
                }
            }
        }
        let d = lu[i * n + i];
        for j in 0..m {
            x.data[i * m + j] /= d;
        }
    }

    x.check_finite("solve_spd")?;
    Ok(x)
}

/// Solve `X a = b` (right division) via the transposed system `aᵀ Xᵀ = bᵀ`.
pub fn solve_right(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let xt = solve_spd(&a.transpose(), &b.transpose())?;
    Ok(xt.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Independent element-by-element triple loop, kept separate from the
    /// implementation path on purpose.
    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, acc);
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let b = rand_matrix(&mut rng, 3, 4);
        let c = matmul(&Matrix::identity(3), &b).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = rand_matrix(&mut rng, 7, 5);
        let b = rand_matrix(&mut rng, 5, 3);
        let c = matmul(&a, &b).unwrap();
        let expected = naive_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_dim_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn sym_eig_diagonal() {
        let s = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let eig = sym_eig(&s).unwrap();
        assert!((eig.eigenvalues[0] - 0.0).abs() < 1e-12);
        assert!((eig.eigenvalues[1] - 2.0).abs() < 1e-12);
        // First column spans e2, second spans e1 (sign free).
        assert!(eig.eigenvectors.get(1, 0).abs() > 0.999);
        assert!(eig.eigenvectors.get(0, 1).abs() > 0.999);
    }

    #[test]
    fn sym_eig_identity() {
        let eig = sym_eig(&Matrix::identity(5)).unwrap();
        for v in &eig.eigenvalues {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sym_eig_non_square() {
        assert!(sym_eig(&Matrix::zeros(2, 3)).is_err());
    }

    fn check_eig(s: &Matrix, eig: &EigResult, tol: f64) {
        let n = s.rows();
        let u = &eig.eigenvectors;
        // Orthonormality.
        let utu = matmul(&u.transpose(), u).unwrap();
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (utu.get(i, j) - expect).abs() < 1e-10,
                    "UᵀU[{i}][{j}] = {}",
                    utu.get(i, j)
                );
            }
        }
        // Reconstruction U diag(λ) Uᵀ = S.
        let mut ul = u.clone();
        for r in 0..n {
            for c in 0..n {
                ul.set(r, c, ul.get(r, c) * eig.eigenvalues[c]);
            }
        }
        let recon = matmul(&ul, &u.transpose()).unwrap();
        let diff = recon.sub(s).unwrap();
        let denom = s.frob_norm().max(1e-30);
        assert!(
            diff.frob_norm() / denom < tol,
            "relative reconstruction error {}",
            diff.frob_norm() / denom
        );
        // Ascending order.
        for w in eig.eigenvalues.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
    }

    #[test]
    fn sym_eig_random_psd_reconstruction() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = rand_matrix(&mut rng, 5, 5);
        let s = matmul(&a, &a.transpose()).unwrap();
        let eig = sym_eig(&s).unwrap();
        check_eig(&s, &eig, 1e-8);
        // PSD input: eigenvalues >= -1e-10.
        for v in &eig.eigenvalues {
            assert!(*v >= -1e-10);
        }
    }

    #[test]
    fn sym_eig_large_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let n = 256;
        let raw = rand_matrix(&mut rng, n, n);
        let s = raw.add(&raw.transpose()).unwrap().scale(0.5);
        let eig = sym_eig(&s).unwrap();
        check_eig(&s, &eig, 1e-8);
    }

    #[test]
    fn sym_eig_zero_matrix() {
        let eig = sym_eig(&Matrix::zeros(4, 4)).unwrap();
        assert!(eig.eigenvalues.iter().all(|v| *v == 0.0));
        assert_eq!(eig.eigenvectors, Matrix::identity(4));
    }

    #[test]
    fn solve_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let b = rand_matrix(&mut rng, 4, 2);
        let x = solve_spd(&Matrix::identity(4), &b).unwrap();
        for (a, e) in x.data().iter().zip(b.data()) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn solve_diagonal_example() {
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        assert!((x.get(0, 0) - 0.5).abs() < 1e-14);
        assert!((x.get(1, 0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn solve_residual_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        // Diagonally dominant => well conditioned.
        let mut a = rand_matrix(&mut rng, 8, 8);
        for i in 0..8 {
            let v = a.get(i, i);
            a.set(i, i, v + 10.0);
        }
        let b = rand_matrix(&mut rng, 8, 3);
        let x = solve_spd(&a, &b).unwrap();
        let residual = matmul(&a, &x).unwrap().sub(&b).unwrap();
        assert!(residual.frob_norm() / b.frob_norm() <= 1e-10);
    }

    #[test]
    fn solve_singular_is_rejected() {
        let a = Matrix::zeros(3, 3);
        let b = Matrix::zeros(3, 1);
        assert!(matches!(
            solve_spd(&a, &b),
            Err(XeditError::IllConditioned { .. })
        ));
    }

    #[test]
    fn solve_right_division() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut a = rand_matrix(&mut rng, 5, 5);
        for i in 0..5 {
            let v = a.get(i, i);
            a.set(i, i, v + 8.0);
        }
        let b = rand_matrix(&mut rng, 3, 5);
        let x = solve_right(&a, &b).unwrap();
        let recon = matmul(&x, &a).unwrap();
        let diff = recon.sub(&b).unwrap();
        assert!(diff.frob_norm() / b.frob_norm() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn matmul_associative(seed in 0u64..1000, l in 1usize..6, m in 1usize..6, n in 1usize..6, p in 1usize..6) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let a = rand_matrix(&mut rng, l, m);
            let b = rand_matrix(&mut rng, m, n);
            let c = rand_matrix(&mut rng, n, p);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.frob_norm().max(1e-12);
            prop_assert!(left.sub(&right).unwrap().frob_norm() / scale < 1e-9);
        }

        #[test]
        fn eig_invariants_random_symmetric(seed in 0u64..1000, n in 1usize..12) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let raw = rand_matrix(&mut rng, n, n);
            let s = raw.add(&raw.transpose()).unwrap().scale(0.5);
            let eig = sym_eig(&s).unwrap();
            check_eig(&s, &eig, 1e-8);
        }

        #[test]
        fn solve_then_matmul_roundtrip(seed in 0u64..1000, n in 1usize..10, m in 1usize..4) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            // SPD system: A = GGᵀ + I.
            let g = rand_matrix(&mut rng, n, n);
            let a = matmul(&g, &g.transpose()).unwrap().add(&Matrix::identity(n)).unwrap();
            let b = rand_matrix(&mut rng, n, m);
            let x = solve_spd(&a, &b).unwrap();
            let recon = matmul(&a, &x).unwrap();
            let scale = b.frob_norm().max(1e-12);
            prop_assert!(recon.sub(&b).unwrap().frob_norm() / scale <= 1e-8);
        }
    }
}
