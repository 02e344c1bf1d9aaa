//! Extended PSD matrix algebra on finite input sets.
//!
//! Kernels on a finite input set of size `k` are `k x k` positive
//! semidefinite matrices.  Everything downstream (square roots inside
//! Gaussian expectations, Cameron-Martin costs of output deviations,
//! Cholesky coordinates for the chain optimizer) reduces to a small set of
//! primitives collected here.  A single eigendecomposition backend serves
//! all of them so that rank decisions are made consistently.
//!
//! Numerical conventions, fixed once and used everywhere:
//!
//! * construction clamps eigenvalues in `[-EIG_TOL_REL * max(1, ||A||_op), 0)`
//!   to zero and rejects anything more negative;
//! * the upper triangle is canonical: the stored matrix is exactly
//!   symmetric, `A[i][j] == A[j][i]` bit-for-bit;
//! * range membership for the pseudo-inverse quadratic form uses the
//!   relative threshold [`RANGE_TOL`] against the top eigenvalue.
//!
//! The PSD square root is 1/2-Hoelder in the operator norm,
//!
//! ```text
//!     || sqrt(q) - sqrt(q') ||_op  <=  sqrt( || q - q' ||_op ),
//! ```
//!
//! which is what makes kernel perturbations controllable inside the
//! Gaussian expectations; the property tests pin this bound on random
//! pairs.

use nalgebra::{DMatrix, DVector};

use crate::error::{LdpError, Result};

/// Relative eigenvalue clamping tolerance used at construction.
pub const EIG_TOL_REL: f64 = 1e-10;

/// Relative rank threshold for range-membership decisions.
pub const RANGE_TOL: f64 = 1e-8;

/// A value in `[0, +inf]`: a finite nonnegative real or positive infinity.
///
/// Rate functions take values on the extended half-line.  `NaN` is never a
/// legal payload; [`ExtendedValue::finite`] enforces that at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExtendedValue {
    Finite(f64),
    Infinite,
}

impl ExtendedValue {
    /// Wraps a finite value.  Panics on `NaN` or infinities: callers decide
    /// explicitly when a computation has left the finite regime.
    pub fn finite(x: f64) -> Self {
        assert!(x.is_finite(), "ExtendedValue::finite given non-finite {x}");
        ExtendedValue::Finite(x)
    }

    /// Wraps a float, mapping `+inf` to [`ExtendedValue::Infinite`].
    /// Panics on `NaN` or `-inf`.
    pub fn from_f64(x: f64) -> Self {
        if x == f64::INFINITY {
            ExtendedValue::Infinite
        } else {
            Self::finite(x)
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, ExtendedValue::Finite(_))
    }

    /// The value as an `f64`, with `Infinite` mapped to `f64::INFINITY`.
    pub fn value(&self) -> f64 {
        match self {
            ExtendedValue::Finite(x) => *x,
            ExtendedValue::Infinite => f64::INFINITY,
        }
    }
}

impl std::fmt::Display for ExtendedValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExtendedValue::Finite(x) => write!(f, "{x}"),
            ExtendedValue::Infinite => write!(f, "inf"),
        }
    }
}

/// A dense symmetric positive semidefinite matrix with its
/// eigendecomposition cached at construction.
///
/// The stored entries are exactly symmetric (upper triangle canonical) and
/// the cached eigenvalues are all `>= 0`: small negative eigenvalues within
/// the construction tolerance are clamped to zero, and the entries are
/// rebuilt from the clamped decomposition when clamping fired.
#[derive(Clone, Debug)]
pub struct PsdMatrix {
    entries: DMatrix<f64>,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
}

impl PsdMatrix {
    /// Builds from an arbitrary square matrix.
    ///
    /// The upper triangle is canonical: the lower triangle of `m` is
    /// ignored and replaced by the mirror of the upper one.  Eigenvalues
    /// below `-EIG_TOL_REL * max(1, ||A||_op)` are rejected with
    /// [`LdpError::NotPsd`]; eigenvalues in the clamp band become zero.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(LdpError::DimensionMismatch(format!(
                "PSD matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(LdpError::InvalidArgument(
                "PSD matrix must have dimension >= 1".into(),
            ));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(LdpError::InvalidArgument(
                "PSD matrix entries must be finite".into(),
            ));
        }
        let k = m.nrows();
        let mut sym = m.clone();
        for i in 0..k {
            for j in 0..i {
                sym[(i, j)] = sym[(j, i)];
            }
        }
        let eig = nalgebra::linalg::SymmetricEigen::new(sym.clone());
        let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
        let tol = EIG_TOL_REL * max_abs.max(1.0);
        let mut clamped = false;
        let mut vals = eig.eigenvalues.clone();
        for l in vals.iter_mut() {
            if *l < -tol {
                return Err(LdpError::NotPsd(format!(
                    "eigenvalue {l} below -{tol:.3e}"
                )));
            }
            if *l < 0.0 {
                *l = 0.0;
                clamped = true;
            }
        }
        let entries = if clamped {
            let mut rebuilt =
                &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
            for i in 0..k {
                for j in 0..i {
                    rebuilt[(i, j)] = rebuilt[(j, i)];
                }
            }
            rebuilt
        } else {
            sym
        };
        Ok(PsdMatrix {
            entries,
            eigvals: vals,
            eigvecs: eig.eigenvectors,
        })
    }

    /// Builds from rows given as slices (row-major).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(LdpError::DimensionMismatch(
                "rows must form a square matrix".into(),
            ));
        }
        let m = DMatrix::from_fn(k, k, |i, j| rows[i][j]);
        Self::from_matrix(&m)
    }

    /// The `k x k` identity.
    pub fn identity(k: usize) -> Self {
        Self::from_matrix(&DMatrix::identity(k, k)).expect("identity is PSD")
    }

    /// The `k x k` zero matrix.
    pub fn zeros(k: usize) -> Self {
        Self::from_matrix(&DMatrix::zeros(k, k)).expect("zero matrix is PSD")
    }

    /// Diagonal matrix with the given nonnegative diagonal.
    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::from_matrix(&DMatrix::from_diagonal(&DVector::from_row_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Eigenvalues after clamping (all `>= 0`), in the backend's order.
    pub fn eigvals(&self) -> &DVector<f64> {
        &self.eigvals
    }

    /// Operator norm (largest eigenvalue).
    pub fn op_norm(&self) -> f64 {
        self.eigvals.iter().fold(0.0f64, |a, &l| a.max(l))
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    /// The unique PSD square root, via the cached eigendecomposition.
    ///
    /// The residual `|| s*s - q ||_op` stays below `1e-8 * max(1, ||q||_op)`;
    /// tests pin this on random instances.
    pub fn sqrt(&self) -> PsdMatrix {
        let root_vals = self.eigvals.map(|l| l.max(0.0).sqrt());
        let mut m =
            &self.eigvecs * DMatrix::from_diagonal(&root_vals) * self.eigvecs.transpose();
        let k = self.dim();
        for i in 0..k {
            for j in 0..i {
                m[(i, j)] = m[(j, i)];
            }
        }
        PsdMatrix::from_matrix(&m).expect("square root of a PSD matrix is PSD")
    }

    /// Rank with the [`RANGE_TOL`]-relative eigenvalue threshold.
    pub fn rank(&self) -> usize {
        let top = self.op_norm();
        if top <= 0.0 {
            return 0;
        }
        self.eigvals.iter().filter(|&&l| l > RANGE_TOL * top).count()
    }
}

/// Cameron-Martin quadratic form `z^T q^+ z` extended by `+inf` off the
/// range of `q`.
///
/// `z` is in the range of `q` when its component orthogonal to the retained
/// eigenspace has norm at most `RANGE_TOL * max(1, ||z||)`; otherwise the
/// form is `Infinite`.  Rank decisions use the same threshold as
/// [`PsdMatrix::rank`], so the two never disagree.
pub fn extended_quadratic(z: &DVector<f64>, q: &PsdMatrix) -> Result<ExtendedValue> {
    if z.len() != q.dim() {
        return Err(LdpError::DimensionMismatch(format!(
            "vector length {} vs matrix dimension {}",
            z.len(),
            q.dim()
        )));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(LdpError::InvalidArgument("vector entries must be finite".into()));
    }
    let coeffs = q.eigvecs.transpose() * z;
    let top = q.op_norm();
    let cut = RANGE_TOL * top;
    let mut value = 0.0;
    let mut resid_sq = 0.0;
    for (i, &c) in coeffs.iter().enumerate() {
        let l = q.eigvals[i];
        if top > 0.0 && l > cut {
            value += c * c / l;
        } else {
            resid_sq += c * c;
        }
    }
    let z_norm = z.norm();
    if resid_sq.sqrt() > RANGE_TOL * z_norm.max(1.0) {
        Ok(ExtendedValue::Infinite)
    } else {
        Ok(ExtendedValue::finite(value))
    }
}

/// Number of free coordinates of a `k x k` lower-triangular factor.
pub fn theta_len(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Builds the PSD matrix `L L^T` from the packed lower-triangular factor.
///
/// `theta` holds the rows of `L` in order: index `i*(i+1)/2 + j` is
/// `L[i][j]` for `j <= i`.  Any real `theta` yields a PSD matrix, which is
/// what makes this the unconstrained coordinate chart for the chain
/// optimizer.
pub fn chol_param(k: usize, theta: &[f64]) -> Result<PsdMatrix> {
    if theta.len() != theta_len(k) {
        return Err(LdpError::DimensionMismatch(format!(
            "theta length {} vs expected {}",
            theta.len(),
            theta_len(k)
        )));
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(LdpError::InvalidArgument("theta entries must be finite".into()));
    }
    let mut l = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            l[(i, j)] = theta[i * (i + 1) / 2 + j];
        }
    }
    let m = &l * l.transpose();
    PsdMatrix::from_matrix(&m)
}

/// Packed lower-triangular Cholesky factor of `q`.
///
/// For strictly positive definite `q` the round trip
/// `chol_param(k, chol_unparam(q))` reproduces `q` to `1e-10`.  Singular
/// matrices get a zero-pivot-guarded factor that still reproduces `q`
/// whenever its leading principal structure permits an exact semidefinite
/// factorization.
pub fn chol_unparam(q: &PsdMatrix) -> Vec<f64> {
    let k = q.dim();
    let a = q.entries();
    let mut l = DMatrix::zeros(k, k);
    let scale = q.op_norm().max(1.0);
    let pivot_tol = 1e-14 * scale;
    for j in 0..k {
        let mut d = a[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if d > pivot_tol {
            let root = d.sqrt();
            l[(j, j)] = root;
            for i in (j + 1)..k {
                let mut s = a[(i, j)];
                for p in 0..j {
                    s -= l[(i, p)] * l[(j, p)];
                }
                l[(i, j)] = s / root;
            }
        } else {
            l[(j, j)] = 0.0;
        }
    }
    let mut theta = vec![0.0; theta_len(k)];
    for i in 0..k {
        for j in 0..=i {
            theta[i * (i + 1) / 2 + j] = l[(i, j)];
        }
    }
    theta
}

/// Operator-norm distance between two symmetric matrices.
pub fn sym_op_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = a - b;
    nalgebra::linalg::SymmetricEigen::new(diff)
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, &l| m.max(l.abs()))
}
