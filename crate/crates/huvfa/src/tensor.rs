//! Dense n-dimensional tensors and CP decomposition.
//!
//! The decomposition is alternating least squares: each sweep solves
//! every factor matrix in closed form from the mode unfolding and the
//! Khatri-Rao product of the remaining factors, with a small ridge on
//! the normal equations. The 2-D case degenerates to a low-rank matrix
//! factorization.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("shape/data mismatch: shape product {expected}, data length {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("rank {rank} exceeds the largest unfolding width {bound}")]
    RankTooLarge { rank: usize, bound: usize },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("tensor order must be at least 2, got {0}")]
    OrderTooSmall(usize),
    #[error("tensor contains non-finite entries")]
    NonFinite,
    #[error("linear solve failed on the normal equations")]
    SolveFailed,
}

/// Row-major dense tensor of arbitrary order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::ShapeMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(DenseTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &len)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < len, "index {ix} out of range for axis {i} (len {len})");
            flat = flat * len + ix;
        }
        flat
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let flat = self.flat_index(index);
        self.data[flat] = value;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mode-`d` unfolding: rows index axis `d`, columns flatten the
    /// remaining axes in increasing axis order, last axis fastest.
    /// Matches the row ordering of [`khatri_rao_excluding`].
    pub fn unfold(&self, mode: usize) -> DMatrix<f64> {
        let n = self.shape[mode];
        let cols: usize = self
            .shape
            .iter()
            .enumerate()
            .filter(|(d, _)| *d != mode)
            .map(|(_, len)| len)
            .product();
        let mut out = DMatrix::zeros(n, cols);
        let mut index = vec![0usize; self.order()];
        for (flat, &v) in self.data.iter().enumerate() {
            // Decode the row-major flat index.
            let mut rem = flat;
            for d in (0..self.order()).rev() {
                index[d] = rem % self.shape[d];
                rem /= self.shape[d];
            }
            let mut col = 0;
            for d in 0..self.order() {
                if d != mode {
                    col = col * self.shape[d] + index[d];
                }
            }
            out[(index[mode], col)] = v;
        }
        out
    }
}

/// One factor matrix per tensor axis, each of shape (axis length, rank).
#[derive(Clone, Debug, PartialEq)]
pub struct CpFactors {
    pub rank: usize,
    pub factors: Vec<DMatrix<f64>>,
}

impl CpFactors {
    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn axis_len(&self, d: usize) -> usize {
        self.factors[d].nrows()
    }

    /// One factor row as a plain vector: the embedding of index `i`
    /// along axis `d`.
    pub fn row(&self, d: usize, i: usize) -> Vec<f64> {
        self.factors[d].row(i).iter().copied().collect()
    }
}

/// ALS result: the factors plus the relative-error trace, one entry
/// per sweep.
#[derive(Clone, Debug)]
pub struct CpDecomposition {
    pub factors: CpFactors,
    pub error_trace: Vec<f64>,
}

/// Reconstructed entry: sum over rank of the product of factor-row
/// entries at the given per-axis indices.
pub fn cp_entry(factors: &CpFactors, index: &[usize]) -> f64 {
    assert_eq!(index.len(), factors.order(), "index order mismatch");
    let mut total = 0.0;
    for r in 0..factors.rank {
        let mut prod = 1.0;
        for (d, &i) in index.iter().enumerate() {
            prod *= factors.factors[d][(i, r)];
        }
        total += prod;
    }
    total
}

/// Full dense reconstruction of the factorization.
pub fn cp_reconstruct(factors: &CpFactors) -> DenseTensor {
    let shape: Vec<usize> = (0..factors.order()).map(|d| factors.axis_len(d)).collect();
    let mut out = DenseTensor::zeros(&shape);
    let mut index = vec![0usize; shape.len()];
    for flat in 0..out.len() {
        let mut rem = flat;
        for d in (0..shape.len()).rev() {
            index[d] = rem % shape[d];
            rem /= shape[d];
        }
        out.data[flat] = cp_entry(factors, &index);
    }
    out
}

/// Relative Frobenius reconstruction error. A zero-norm tensor reports
/// the absolute norm of the reconstruction instead.
pub fn relative_error(tensor: &DenseTensor, factors: &CpFactors) -> f64 {
    let recon = cp_reconstruct(factors);
    let mut diff = 0.0;
    for (a, b) in tensor.data.iter().zip(recon.data.iter()) {
        diff += (a - b) * (a - b);
    }
    let norm = tensor.frobenius_norm();
    if norm == 0.0 {
        diff.sqrt()
    } else {
        diff.sqrt() / norm
    }
}

/// Khatri-Rao style matrix over all axes except `mode`: row `j`
/// corresponds to column `j` of the mode-`mode` unfolding, and equals
/// the elementwise product of the matching factor rows.
fn khatri_rao_excluding(factors: &[DMatrix<f64>], mode: usize, rank: usize) -> DMatrix<f64> {
    let axes: Vec<usize> = (0..factors.len()).filter(|d| *d != mode).collect();
    let rows: usize = axes.iter().map(|&d| factors[d].nrows()).product();
    let mut out = DMatrix::zeros(rows, rank);
    let mut index: Vec<usize> = vec![0; axes.len()];
    for j in 0..rows {
        // Decode j over the included axes, last fastest.
        let mut rem = j;
        for (k, &d) in axes.iter().enumerate().rev() {
            index[k] = rem % factors[d].nrows();
            rem /= factors[d].nrows();
        }
        for r in 0..rank {
            let mut prod = 1.0;
            for (k, &d) in axes.iter().enumerate() {
                prod *= factors[d][(index[k], r)];
            }
            out[(j, r)] = prod;
        }
    }
    out
}

/// Ridge to keep the normal equations solvable when the Gram matrix is
/// singular (duplicate data rows, rank above the matrix rank).
const RIDGE: f64 = 1e-9;

/// Factor initialization for the alternating least squares sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CpInit {
    /// Entries drawn uniformly from [0, 1).
    Uniform,
    /// Leading left singular vectors of each mode unfolding, padded
    /// with small uniform columns past the unfolding rank. Starts the
    /// sweeps inside the dominant (and for value tensors, spatially
    /// smooth) subspace instead of a random one.
    Hosvd,
}

/// [`cp_als`] with an explicit ridge on the normal equations, for
/// callers that need stronger damping of the redundant subspace when
/// the requested rank exceeds what the data determines.
pub fn cp_als_ridged(
    tensor: &DenseTensor,
    rank: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
    ridge: f64,
) -> Result<CpDecomposition, TensorError> {
    cp_als_impl(tensor, rank, max_iters, tol, seed, ridge, CpInit::Uniform, None)
}

/// Fully parameterized decomposition entry point.
pub fn cp_als_with(
    tensor: &DenseTensor,
    rank: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
    ridge: f64,
    init: CpInit,
) -> Result<CpDecomposition, TensorError> {
    cp_als_impl(tensor, rank, max_iters, tol, seed, ridge, init, None)
}

/// Smoothness coupling for one axis of the decomposition: rows of that
/// factor are additionally penalized by `strength * tr(A^T L A)`, where
/// `L` is a graph Laplacian over the axis indices. Used on the goal
/// axis so that goal embeddings vary smoothly with goal position,
/// which is what lets a regression over them extrapolate.
#[derive(Clone, Debug)]
pub struct AxisSmoother {
    pub axis: usize,
    pub laplacian: DMatrix<f64>,
    pub strength: f64,
}

/// Builds a Gaussian-weighted graph Laplacian over points with the
/// given squared-distance function and bandwidth.
pub fn gaussian_laplacian(n: usize, dist2: impl Fn(usize, usize) -> f64, sigma: f64) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w[(i, j)] = (-dist2(i, j) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        let degree: f64 = w.row(i).sum();
        l[(i, i)] = degree;
        for j in 0..n {
            if i != j {
                l[(i, j)] = -w[(i, j)];
            }
        }
    }
    l
}

/// [`cp_als_with`] plus an optional per-axis smoothness penalty.
pub fn cp_als_smoothed(
    tensor: &DenseTensor,
    rank: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
    ridge: f64,
    init: CpInit,
    smoother: Option<&AxisSmoother>,
) -> Result<CpDecomposition, TensorError> {
    cp_als_impl(tensor, rank, max_iters, tol, seed, ridge, init, smoother)
}

/// CP decomposition by alternating least squares.
///
/// Per sweep, each factor is the closed-form least-squares solution
/// against the Khatri-Rao product of the others; after the sweep all
/// but the last factor are column-normalized with the scale absorbed
/// into the last factor. Stops when the relative reconstruction error
/// improves by less than `tol` between sweeps or after `max_iters`
/// sweeps. Deterministic for a fixed `(tensor, rank, seed)`.
pub fn cp_als(
    tensor: &DenseTensor,
    rank: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<CpDecomposition, TensorError> {
    cp_als_impl(tensor, rank, max_iters, tol, seed, RIDGE, CpInit::Uniform, None)
}

#[allow(clippy::too_many_arguments)]
fn cp_als_impl(
    tensor: &DenseTensor,
    rank: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
    ridge: f64,
    init: CpInit,
    smoother: Option<&AxisSmoother>,
) -> Result<CpDecomposition, TensorError> {
    if rank == 0 {
        return Err(TensorError::ZeroRank);
    }
    if tensor.order() < 2 {
        return Err(TensorError::OrderTooSmall(tensor.order()));
    }
    if !tensor.is_finite() {
        return Err(TensorError::NonFinite);
    }
    // The widest unfolding bounds any useful rank; reject absurd requests
    // while still allowing rank above the narrow modes (the goal axis is
    // routinely narrower than the requested embedding rank).
    let bound = (0..tensor.order())
        .map(|d| tensor.len() / tensor.shape[d])
        .max()
        .unwrap();
    if rank > bound {
        return Err(TensorError::RankTooLarge { rank, bound });
    }

    let order = tensor.order();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unfoldings: Vec<DMatrix<f64>> = (0..order).map(|d| tensor.unfold(d)).collect();
    let mut factors: Vec<DMatrix<f64>> = match init {
        CpInit::Uniform => tensor
            .shape
            .iter()
            .map(|&len| DMatrix::from_fn(len, rank, |_, _| rng.gen::<f64>()))
            .collect(),
        CpInit::Hosvd => unfoldings
            .iter()
            .map(|u| {
                let len = u.nrows();
                let svd = u.clone().svd(true, false);
                let basis = svd.u.expect("left singular vectors");
                DMatrix::from_fn(len, rank, |i, r| {
                    if r < basis.ncols() {
                        basis[(i, r)]
                    } else {
                        0.1 * rng.gen::<f64>()
                    }
                })
            })
            .collect(),
    };
    let norm = tensor.frobenius_norm();

    // Eigendecomposition of the smoothing Laplacian, computed once: the
    // coupled row system diagonalizes in the Laplacian's eigenbasis.
    let smooth_eig = smoother.map(|s| {
        let eig = nalgebra::SymmetricEigen::new(s.laplacian.clone());
        (s.axis, eig.eigenvectors, eig.eigenvalues, s.strength)
    });

    let mut error_trace = Vec::new();
    let mut prev_err = f64::INFINITY;
    for _ in 0..max_iters {
        for mode in 0..order {
            let kr = khatri_rao_excluding(&factors, mode, rank);
            // Gram of the Khatri-Rao product is the Hadamard product of
            // the per-factor Grams; computed directly here since every
            // tensor in this crate is small.
            let mut gram = kr.transpose() * &kr;
            for r in 0..rank {
                gram[(r, r)] += ridge;
            }
            let rhs = &unfoldings[mode] * &kr; // (axis_len, rank)
            match &smooth_eig {
                Some((axis, u, mu, strength)) if *axis == mode => {
                    // Rows coupled by strength * tr(A^T L A): rotate into
                    // the Laplacian eigenbasis, solve one ridged system
                    // per eigenvalue, rotate back.
                    let rhs_rot = u.transpose() * &rhs; // (axis_len, rank)
                    let mut solved_rot = DMatrix::zeros(rhs_rot.nrows(), rank);
                    for i in 0..rhs_rot.nrows() {
                        let mut g_i = gram.clone();
                        for r in 0..rank {
                            g_i[(r, r)] += strength * mu[i].max(0.0);
                        }
                        let chol = g_i.cholesky().ok_or(TensorError::SolveFailed)?;
                        let row = chol.solve(&rhs_rot.row(i).transpose());
                        solved_rot.set_row(i, &row.transpose());
                    }
                    factors[mode] = u * solved_rot;
                }
                _ => {
                    // Solve gram * X^T = rhs^T for the new factor.
                    let chol = gram
                        .clone()
                        .cholesky()
                        .ok_or(TensorError::SolveFailed)?;
                    let solved = chol.solve(&rhs.transpose());
                    factors[mode] = solved.transpose();
                }
            }
        }
        rebalance(&mut factors, rank);

        let err = relative_error_vs(&unfoldings[0], &factors, 0, rank, norm);
        error_trace.push(err);
        if prev_err - err < tol {
            break;
        }
        prev_err = err;
    }

    Ok(CpDecomposition {
        factors: CpFactors { rank, factors },
        error_trace,
    })
}

/// Redistributes each rank component's scale evenly across all
/// factors: every column is normalized to unit Euclidean norm and then
/// multiplied by the order-th root of the component's total scale.
/// Reconstructed values are unchanged; the resulting rows are O(1) in
/// magnitude, which is what the stream regressions want to see.
pub fn spread_scale(factors: &CpFactors) -> CpFactors {
    let order = factors.order() as f64;
    let mut out = factors.clone();
    for r in 0..factors.rank {
        let mut total = 1.0f64;
        for f in &factors.factors {
            total *= f.column(r).norm();
        }
        let per_factor = if total > 0.0 {
            total.powf(1.0 / order)
        } else {
            0.0
        };
        for f in &mut out.factors {
            let norm = f.column(r).norm();
            let mut col = f.column_mut(r);
            if norm > 0.0 {
                col *= per_factor / norm;
            } else {
                col.fill(0.0);
            }
        }
    }
    out
}

/// Column-normalizes every factor but the last to unit Euclidean norm,
/// absorbing the scale into the last factor. Leaves reconstructed
/// values unchanged.
fn rebalance(factors: &mut [DMatrix<f64>], rank: usize) {
    let last = factors.len() - 1;
    for r in 0..rank {
        let mut scale = 1.0;
        for factor in factors[..last].iter_mut() {
            let norm = factor.column(r).norm();
            if norm > 0.0 {
                let mut col = factor.column_mut(r);
                col /= norm;
                scale *= norm;
            }
        }
        let mut col = factors[last].column_mut(r);
        col *= scale;
    }
}

/// Relative error computed from the mode-0 unfolding without building
/// the full reconstruction tensor.
fn relative_error_vs(
    unfold0: &DMatrix<f64>,
    factors: &[DMatrix<f64>],
    mode: usize,
    rank: usize,
    norm: f64,
) -> f64 {
    let kr = khatri_rao_excluding(factors, mode, rank);
    let recon = &factors[mode] * kr.transpose();
    let diff = (unfold0 - recon).norm();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}
