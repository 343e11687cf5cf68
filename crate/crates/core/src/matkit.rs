//! Dense matrix kernels: prioritized QR, Cholesky variants, spectral radius,
//! M-matrix test and the diagonalization number.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Rows whose Gram–Schmidt residual falls below this fraction of the row norm
/// are treated as linearly dependent.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("not positive definite: pivot {index} is {value:e}")]
    NotPositiveDefinite { index: usize, value: f64 },
    #[error("z_matrix_violation: entry ({row}, {col}) = {value} is positive")]
    ZMatrixViolation { row: usize, col: usize, value: f64 },
    #[error("zero matrix")]
    ZeroMatrix,
    #[error("singular matrix")]
    Singular,
}

pub fn ensure_finite(m: &Matrix, what: &'static str) -> Result<(), MatError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(MatError::NonFinite(what))
    }
}

fn ensure_square(m: &Matrix, what: &str) -> Result<(), MatError> {
    if m.is_square() {
        Ok(())
    } else {
        Err(MatError::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// Serialize a matrix as a list of rows.
pub fn serialize_matrix<S: serde::Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        seq.serialize_element(&m.row(i).iter().copied().collect::<Vec<f64>>())?;
    }
    seq.end()
}

// ── norms ──

pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Smallest singular value of a square matrix (or the min(r, c)-th of a rectangular one).
pub fn sigma_min(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.min()
}

/// Singular values sorted in decreasing order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Maximum absolute column sum.
pub fn norm_1(m: &Matrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Maximum absolute row sum.
pub fn norm_inf(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn inverse_upper(r: &Matrix) -> Result<Matrix, MatError> {
    ensure_square(r, "upper-triangular factor")?;
    if (0..r.nrows()).any(|i| r[(i, i)] == 0.0) {
        return Err(MatError::Singular);
    }
    r.solve_upper_triangular(&Matrix::identity(r.nrows(), r.nrows()))
        .ok_or(MatError::Singular)
}

pub fn inverse_lower(l: &Matrix) -> Result<Matrix, MatError> {
    ensure_square(l, "lower-triangular factor")?;
    if (0..l.nrows()).any(|i| l[(i, i)] == 0.0) {
        return Err(MatError::Singular);
    }
    l.solve_lower_triangular(&Matrix::identity(l.nrows(), l.nrows()))
        .ok_or(MatError::Singular)
}

// ── Tensor3 ──

/// A stack of equally sized matrices indexed by a third (slice) index.
///
/// Products with matrices act on every slice independently, which is how the
/// joint-derivative arrays are contracted.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    rows: usize,
    cols: usize,
    slices: Vec<Matrix>,
}

impl Tensor3 {
    pub fn zeros(rows: usize, cols: usize, depth: usize) -> Self {
        Self {
            rows,
            cols,
            slices: vec![Matrix::zeros(rows, cols); depth],
        }
    }

    pub fn from_slices(slices: Vec<Matrix>) -> Result<Self, MatError> {
        let (rows, cols) = slices.first().map(|s| s.shape()).unwrap_or((0, 0));
        if slices.iter().any(|s| s.shape() != (rows, cols)) {
            return Err(MatError::Dimension("tensor slices differ in shape".into()));
        }
        for s in &slices {
            ensure_finite(s, "tensor slice")?;
        }
        Ok(Self { rows, cols, slices })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.slices.len())
    }

    pub fn slice(&self, k: usize) -> &Matrix {
        &self.slices[k]
    }

    pub fn slices(&self) -> &[Matrix] {
        &self.slices
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.slices[k][(i, j)]
    }

    pub fn map(&self, f: impl Fn(&Matrix) -> Matrix) -> Self {
        let slices: Vec<Matrix> = self.slices.iter().map(f).collect();
        let (rows, cols) = slices.first().map(|s| s.shape()).unwrap_or((0, 0));
        Self { rows, cols, slices }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(&Matrix, &Matrix) -> Matrix) -> Self {
        assert_eq!(self.slices.len(), other.slices.len(), "tensor depth mismatch");
        let slices: Vec<Matrix> = self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| f(a, b))
            .collect();
        let (rows, cols) = slices.first().map(|s| s.shape()).unwrap_or((0, 0));
        Self { rows, cols, slices }
    }

    pub fn transpose(&self) -> Self {
        self.map(|s| s.transpose())
    }

    pub fn left_mul(&self, m: &Matrix) -> Self {
        self.map(|s| m * s)
    }

    pub fn right_mul(&self, m: &Matrix) -> Self {
        self.map(|s| s * m)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|s| s * c)
    }

    pub fn frobenius(&self) -> f64 {
        self.slices.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt()
    }

    /// Upper bound on the operator norm of `v ↦ Σ_k v_k · slice_k`.
    pub fn op_norm_bound(&self) -> f64 {
        self.slices
            .iter()
            .map(|s| spectral_norm(s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

// ── prioritized QR ──

#[derive(Debug, Clone, PartialEq)]
pub struct PrioritizedDecomposition {
    pub c: Matrix,
    pub j_hat: Matrix,
    pub j_hat_e: Matrix,
    pub task_dims: Vec<usize>,
    pub rank_tol: f64,
    pub dependent: Vec<bool>,
}

impl PrioritizedDecomposition {
    /// Attach a task partition of the rows; the dims must sum to m.
    pub fn with_blocks(mut self, task_dims: &[usize]) -> Result<Self, MatError> {
        if task_dims.iter().sum::<usize>() != self.c.nrows() || task_dims.contains(&0) {
            return Err(MatError::Dimension(format!(
                "task dims {task_dims:?} do not partition {} rows",
                self.c.nrows()
            )));
        }
        self.task_dims = task_dims.to_vec();
        Ok(self)
    }

    pub fn offsets(&self) -> Vec<usize> {
        block_offsets(&self.task_dims)
    }

    pub fn c_block(&self, a: usize, b: usize) -> Matrix {
        let off = self.offsets();
        self.c
            .view((off[a], off[b]), (self.task_dims[a], self.task_dims[b]))
            .into_owned()
    }

    /// Block diagonal part C_D of C.
    pub fn c_diag(&self) -> Matrix {
        block_diagonal(&self.c, &self.task_dims)
    }

    pub fn rank(&self) -> usize {
        self.dependent.iter().filter(|d| !**d).count()
    }
}

pub fn block_offsets(dims: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(dims.len() + 1);
    let mut acc = 0;
    off.push(0);
    for d in dims {
        acc += d;
        off.push(acc);
    }
    off
}

pub fn block_diagonal(m: &Matrix, dims: &[usize]) -> Matrix {
    let off = block_offsets(dims);
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    for (a, &d) in dims.iter().enumerate() {
        out.view_mut((off[a], off[a]), (d, d))
            .copy_from(&m.view((off[a], off[a]), (d, d)));
    }
    out
}

fn orthogonalize(v: &mut Vector, basis: &[Vector], coeffs: Option<&mut [f64]>) {
    let mut local = vec![0.0; basis.len()];
    for _pass in 0..2 {
        for (i, q) in basis.iter().enumerate() {
            let h = q.dot(v);
            local[i] += h;
            v.axpy(-h, q, 1.0);
        }
    }
    if let Some(c) = coeffs {
        c.copy_from_slice(&local);
    }
}

/// Next unit vector orthogonal to `basis`, taken from the coordinate axes in index order.
fn complement_vector(basis: &[Vector], n: usize) -> Vector {
    let threshold = 1.0 / (2.0 * n as f64).sqrt();
    for i in 0..n {
        let mut v = Vector::zeros(n);
        v[i] = 1.0;
        orthogonalize(&mut v, basis, None);
        let r = v.norm();
        if r > threshold {
            return v / r;
        }
    }
    unreachable!("complement of a proper subspace always has a large coordinate component")
}

/// Factor J = C·Ĵ with C lower-triangular (nonnegative diagonal) and Ĵ with orthonormal rows.
///
/// Rows are processed in priority order by modified Gram–Schmidt with one
/// reorthogonalization pass. A row whose residual is at most `rank_tol` times its
/// norm is dependent: its diagonal and its whole column in C are zero and the
/// matching row of Ĵ is taken from the orthogonal complement of the row space.
pub fn qr_prioritized(j: &Matrix, rank_tol: f64) -> Result<PrioritizedDecomposition, MatError> {
    let (m, n) = j.shape();
    if m > n {
        return Err(MatError::Dimension(format!("need m <= n, got {m}x{n}")));
    }
    if !(rank_tol > 0.0) {
        return Err(MatError::Dimension(format!("rank_tol must be positive, got {rank_tol}")));
    }
    ensure_finite(j, "J")?;

    let mut c = Matrix::zeros(m, m);
    let mut rows: Vec<Option<Vector>> = vec![None; m];
    let mut basis: Vec<Vector> = Vec::with_capacity(n);
    let mut basis_row: Vec<usize> = Vec::with_capacity(n);
    let mut dependent = vec![false; m];

    for a in 0..m {
        let row = j.row(a).transpose();
        let norm = row.norm();
        let mut v = row;
        let mut coeffs = vec![0.0; basis.len()];
        orthogonalize(&mut v, &basis, Some(&mut coeffs));
        for (h, &b) in coeffs.iter().zip(&basis_row) {
            c[(a, b)] = *h;
        }
        let res = v.norm();
        if res <= rank_tol * norm {
            dependent[a] = true;
        } else {
            c[(a, a)] = res;
            let q = v / res;
            rows[a] = Some(q.clone());
            basis.push(q);
            basis_row.push(a);
        }
    }

    for a in 0..m {
        if rows[a].is_none() {
            let q = complement_vector(&basis, n);
            basis.push(q.clone());
            rows[a] = Some(q);
        }
    }
    let mut j_hat_e = Matrix::zeros(n, n);
    for (a, q) in rows.iter().enumerate() {
        j_hat_e.set_row(a, &q.as_ref().expect("every row assigned").transpose());
    }
    for i in m..n {
        let q = complement_vector(&basis, n);
        j_hat_e.set_row(i, &q.transpose());
        basis.push(q);
    }
    let j_hat = j_hat_e.rows(0, m).into_owned();

    Ok(PrioritizedDecomposition {
        c,
        j_hat,
        j_hat_e,
        task_dims: if m > 0 { vec![m] } else { Vec::new() },
        rank_tol,
        dependent,
    })
}

// ── Cholesky ──

fn ensure_symmetric(w: &Matrix) -> Result<(), MatError> {
    let scale = w.amax().max(1.0);
    let asym = (w - w.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(MatError::NotSymmetric(asym));
    }
    Ok(())
}

/// Upper-triangular R with positive diagonal and RᵀR = W.
pub fn cholesky_upper(w: &Matrix) -> Result<Matrix, MatError> {
    ensure_square(w, "W")?;
    ensure_finite(w, "W")?;
    ensure_symmetric(w)?;
    let n = w.nrows();
    let mut r = Matrix::zeros(n, n);
    for j in 0..n {
        let mut s = w[(j, j)];
        for k in 0..j {
            s -= r[(k, j)] * r[(k, j)];
        }
        if !(s > 0.0) {
            return Err(MatError::NotPositiveDefinite { index: j, value: s });
        }
        let d = s.sqrt();
        r[(j, j)] = d;
        for i in j + 1..n {
            let mut t = w[(j, i)];
            for k in 0..j {
                t -= r[(k, j)] * r[(k, i)];
            }
            r[(j, i)] = t / d;
        }
    }
    Ok(r)
}

fn reverse_indices(m: &Matrix) -> Matrix {
    let (r, c) = m.shape();
    Matrix::from_fn(r, c, |i, j| m[(r - 1 - i, c - 1 - j)])
}

/// Lower-triangular C̃ with positive diagonal and C̃ᵀC̃ = W.
///
/// With P the index reversal and U the upper factor of PWP, C̃ = PUP.
pub fn reverse_cholesky_lower(w: &Matrix) -> Result<Matrix, MatError> {
    let u = cholesky_upper(&reverse_indices(w)).map_err(|e| match e {
        MatError::NotPositiveDefinite { index, value } => MatError::NotPositiveDefinite {
            index: w.nrows() - 1 - index,
            value,
        },
        other => other,
    })?;
    Ok(reverse_indices(&u))
}

// ── spectra ──

pub fn eigenvalues(a: &Matrix) -> Result<Vec<nalgebra::Complex<f64>>, MatError> {
    ensure_square(a, "A")?;
    ensure_finite(a, "A")?;
    if a.is_empty() {
        return Ok(Vec::new());
    }
    Ok(a.clone().complex_eigenvalues().iter().copied().collect())
}

pub fn spectral_radius(a: &Matrix) -> Result<f64, MatError> {
    Ok(eigenvalues(a)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MMatrixWitness {
    pub is_m_matrix: bool,
    pub s: f64,
    pub b: Matrix,
    pub sr_b: f64,
}

/// Test whether a Z-matrix X is a (nonsingular) M-matrix by writing X = sI − B.
pub fn is_m_matrix(x: &Matrix) -> Result<MMatrixWitness, MatError> {
    ensure_square(x, "X")?;
    ensure_finite(x, "X")?;
    let n = x.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && x[(i, j)] > 0.0 {
                return Err(MatError::ZMatrixViolation { row: i, col: j, value: x[(i, j)] });
            }
        }
    }
    let s = (0..n).map(|i| x[(i, i)]).fold(0.0, f64::max);
    let b = Matrix::identity(n, n) * s - x;
    let sr_b = spectral_radius(&b)?;
    Ok(MMatrixWitness { is_m_matrix: n == 0 || sr_b < s, s, b, sr_b })
}

/// Spectral radius of Y⁻¹Z, the quantity in the Plemmons characterization of Y − Z.
pub fn plemmons_radius(y: &Matrix, z: &Matrix) -> Result<f64, MatError> {
    ensure_square(y, "Y")?;
    if y.shape() != z.shape() {
        return Err(MatError::Dimension("Y and Z differ in shape".into()));
    }
    let y_inv = y.clone().try_inverse().ok_or(MatError::Singular)?;
    spectral_radius(&(y_inv * z))
}

/// Σ m_aa² / Σ m_ab².
pub fn diagonalization_number(m: &Matrix) -> Result<f64, MatError> {
    ensure_square(m, "M")?;
    ensure_finite(m, "M")?;
    let total = m.norm_squared();
    if total == 0.0 {
        return Err(MatError::ZeroMatrix);
    }
    let diag: f64 = (0..m.nrows()).map(|i| m[(i, i)].powi(2)).sum();
    Ok(diag / total)
}
