//! Dense matrix arithmetic with paired forward/backward operations and a
//! finite-difference gradient oracle. Everything differentiable in this crate
//! is built on these primitives.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "buffer of length {} cannot back a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(n, cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    /// Elementwise `self + c * other`.
    pub fn add_scaled(&self, other: &Matrix, c: f64) -> Result<Matrix> {
        self.check_same_shape(other, "add_scaled")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + c * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.add_scaled(other, 1.0)
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: {}x{} vs {}x{}",
                op, self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Standard matrix product with 64-bit accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "matmul: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Elementwise `max(0, x)`.
pub fn relu_forward(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` through where `x > 0`, zero elsewhere (subgradient 0 at x <= 0).
pub fn relu_backward(x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    x.check_same_shape(upstream, "relu_backward")?;
    let data = x
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&xi, &ui)| if xi > 0.0 { ui } else { 0.0 })
        .collect();
    Ok(Matrix {
        rows: x.rows,
        cols: x.cols,
        data,
    })
}

/// Squared euclidean distances between the rows of `f` (N x d) and the rows of
/// `p` (M x d); entry (i, j) = ||f_i - p_j||^2.
///
/// Computed by direct summation of squared differences, so an entry is exactly
/// zero iff the two rows are bitwise equal.
pub fn pairwise_sqdist(f: &Matrix, p: &Matrix) -> Result<Matrix> {
    if f.cols != p.cols {
        return Err(Error::ShapeMismatch(format!(
            "pairwise_sqdist: feature dim {} vs prototype dim {}",
            f.cols, p.cols
        )));
    }
    let mut out = Matrix::zeros(f.rows, p.rows);
    for i in 0..f.rows {
        let fi = f.row(i);
        for j in 0..p.rows {
            let pj = p.row(j);
            let mut acc = 0.0;
            for (a, b) in fi.iter().zip(pj) {
                let d = a - b;
                acc += d * d;
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: (usize, usize),
    pub passed: bool,
}

/// Relative-error denominator floor; avoids division blow-up near zero gradients.
const REL_ERR_FLOOR: f64 = 1e-8;

/// Checks `analytic_grad` against central differences of `loss_fn` at `params`.
///
/// Each entry is perturbed by +/- h and the numeric slope
/// `(L(th + h e) - L(th - h e)) / 2h` is compared to the analytic entry with
/// relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_check(
    loss_fn: impl Fn(&Matrix) -> f64,
    params: &Matrix,
    analytic_grad: &Matrix,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::Config(format!("finite_diff_check: h must be > 0, got {h}")));
    }
    params.check_same_shape(analytic_grad, "finite_diff_check")?;

    let mut probe = params.clone();
    let mut max_rel = 0.0;
    let mut worst = (0, 0);
    for i in 0..params.rows {
        for j in 0..params.cols {
            let original = probe.get(i, j);
            probe.set(i, j, original + h);
            let up = loss_fn(&probe);
            probe.set(i, j, original - h);
            let down = loss_fn(&probe);
            probe.set(i, j, original);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::OracleFailure(format!(
                    "loss evaluated to a non-finite value at entry ({i}, {j})"
                )));
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = analytic_grad.get(i, j);
            let rel = (analytic - numeric).abs() / REL_ERR_FLOOR.max(analytic.abs() + numeric.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = (i, j);
            }
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        worst_index: worst,
        passed: max_rel <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Naive triple-loop product, kept independent of `matmul`.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 3);
        let prod = matmul(&Matrix::identity(3), &a).unwrap();
        assert_eq!(prod, a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 5, 7);
        let b = random_matrix(&mut rng, 7, 3);
        let fast = matmul(&a, &b).unwrap();
        let slow = matmul_oracle(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn relu_forward_and_backward() {
        let x = Matrix::from_vec(1, 2, vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);
        assert_eq!(relu_forward(&Matrix::zeros(2, 2)), Matrix::zeros(2, 2));

        let upstream = Matrix::from_vec(1, 2, vec![5.0, 7.0]).unwrap();
        let back = relu_backward(&x, &upstream).unwrap();
        assert_eq!(back.data(), &[0.0, 7.0]);
    }

    #[test]
    fn sqdist_zero_on_matching_rows() {
        let f = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let d = pairwise_sqdist(&f, &f).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(1, 1), 0.0);
    }

    #[test]
    fn sqdist_three_four_five() {
        let f = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let p = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let d = pairwise_sqdist(&f, &p).unwrap();
        assert_eq!(d.get(0, 0), 25.0);
    }

    #[test]
    fn sqdist_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_matrix(&mut rng, 4, 3);
        let p = random_matrix(&mut rng, 2, 3);
        let d = pairwise_sqdist(&f, &p).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += (f.get(i, k) - p.get(j, k)).powi(2);
                }
                assert!((d.get(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gradcheck_accepts_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = random_matrix(&mut rng, 3, 2);
        let grad = theta.scale(2.0);
        let report = finite_diff_check(
            |m| m.data().iter().map(|v| v * v).sum(),
            &theta,
            &grad,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_relative_error);
    }

    #[test]
    fn gradcheck_flags_corrupted_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = random_matrix(&mut rng, 3, 2);
        let mut grad = theta.scale(2.0);
        grad.set(1, 1, grad.get(1, 1) + 0.5);
        let report = finite_diff_check(
            |m| m.data().iter().map(|v| v * v).sum(),
            &theta,
            &grad,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_index, (1, 1));
    }

    #[test]
    fn gradcheck_rejects_non_finite_loss() {
        let theta = Matrix::zeros(1, 1);
        let err = finite_diff_check(|_| f64::NAN, &theta, &theta.clone(), 1e-4, 1e-6).unwrap_err();
        assert!(matches!(err, Error::OracleFailure(_)), "{err}");
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 3, 4);
            let b = random_matrix(&mut rng, 4, 2);
            let c = random_matrix(&mut rng, 2, 5);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                let rel = (x - y).abs() / (1.0f64).max(x.abs() + y.abs());
                prop_assert!(rel <= 1e-9, "{} vs {}", x, y);
            }
        }

        #[test]
        fn sqdist_nonnegative_and_transpose_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 4, 3);
            let b = random_matrix(&mut rng, 3, 3);
            let ab = pairwise_sqdist(&a, &b).unwrap();
            let ba = pairwise_sqdist(&b, &a).unwrap();
            for i in 0..4 {
                for j in 0..3 {
                    prop_assert!(ab.get(i, j) >= 0.0);
                    prop_assert_eq!(ab.get(i, j), ba.get(j, i));
                }
            }
        }
    }
}
