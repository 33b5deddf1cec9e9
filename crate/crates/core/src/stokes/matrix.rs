use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::Mat;

use crate::error::{Error, Result};

/// Fixed sparsity pattern of the saddle-point operator, with its symbolic LU.
pub(crate) struct Pattern {
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    lu: SymbolicLu<usize>,
    n_entries: usize,
}

impl Pattern {
    pub(crate) fn new(n: usize, indices: &[(usize, usize)]) -> Result<Self> {
        let pairs: Vec<Pair<usize, usize>> = indices.iter().map(|&(row, col)| Pair { row, col }).collect();
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(n, n, &pairs)
            .map_err(|e| Error::LinearSolver(format!("sparsity pattern: {e:?}")))?;
        let lu = SymbolicLu::try_new(symbolic.as_ref()).map_err(|e| Error::LinearSolver(format!("symbolic LU: {e:?}")))?;
        Ok(Self {
            symbolic,
            argsort,
            lu,
            n_entries: indices.len(),
        })
    }

    pub(crate) fn build(&self, values: &[f64]) -> Result<SparseColMat<usize, f64>> {
        if values.len() != self.n_entries {
            return Err(Error::Consistency("assembly entry count changed between calls".into()));
        }
        SparseColMat::new_from_argsort(self.symbolic.clone(), &self.argsort, values)
            .map_err(|e| Error::LinearSolver(format!("matrix fill: {e:?}")))
    }
}

/// Assembled saddle-point operator `[[A, B^T], [B, 0]]` in reduced unknowns.
#[derive(Clone)]
pub struct SaddleMatrix {
    pub(crate) mat: SparseColMat<usize, f64>,
    pub(crate) n_velocity: usize,
}

impl std::fmt::Debug for SaddleMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SaddleMatrix")
            .field("n", &self.len())
            .field("nnz", &self.nnz())
            .finish()
    }
}

impl SaddleMatrix {
    pub fn len(&self) -> usize {
        self.mat.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_velocity(&self) -> usize {
        self.n_velocity
    }

    pub fn nnz(&self) -> usize {
        self.mat.val().len()
    }

    /// Compressed-column triple `(col_ptr, row_idx, values)`.
    pub fn csc(&self) -> (&[usize], &[usize], &[f64]) {
        let s = self.mat.symbolic();
        (s.col_ptr(), s.row_idx(), self.mat.val())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.len()];
        self.apply_into(x, &mut y);
        y
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let (cp, ri, v) = self.csc();
        y.iter_mut().for_each(|e| *e = 0.0);
        for j in 0..self.len() {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for p in cp[j]..cp[j + 1] {
                y[ri[p]] += v[p] * xj;
            }
        }
    }

    /// `y = A^T x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let (cp, ri, v) = self.csc();
        (0..self.len())
            .map(|j| (cp[j]..cp[j + 1]).map(|p| v[p] * x[ri[p]]).sum())
            .collect()
    }

    /// Largest entrywise difference against a matrix with the same dimension.
    pub fn max_abs_diff(&self, other: &SaddleMatrix) -> f64 {
        let mut diff = 0.0f64;
        let (cp, ri, v) = self.csc();
        let (cq, rj, w) = other.csc();
        if cp.len() != cq.len() {
            return f64::INFINITY;
        }
        // Merge the two sorted columns.
        for j in 0..self.len() {
            let (mut a, mut b) = (cp[j], cq[j]);
            while a < cp[j + 1] || b < cq[j + 1] {
                let ra = if a < cp[j + 1] { ri[a] } else { usize::MAX };
                let rb = if b < cq[j + 1] { rj[b] } else { usize::MAX };
                if ra == rb {
                    diff = diff.max((v[a] - w[b]).abs());
                    a += 1;
                    b += 1;
                } else if ra < rb {
                    diff = diff.max(v[a].abs());
                    a += 1;
                } else {
                    diff = diff.max(w[b].abs());
                    b += 1;
                }
            }
        }
        diff
    }

    pub fn max_abs(&self) -> f64 {
        self.mat.val().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise asymmetry `|K_ij - K_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let (cp, ri, v) = self.csc();
        let mut worst = 0.0f64;
        for j in 0..self.len() {
            for p in cp[j]..cp[j + 1] {
                let i = ri[p];
                let t = self.get(j, i).unwrap_or(0.0);
                worst = worst.max((v[p] - t).abs());
            }
        }
        worst
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (cp, ri, v) = self.csc();
        let rows = &ri[cp[j]..cp[j + 1]];
        rows.binary_search(&i).ok().map(|p| v[cp[j] + p])
    }

    /// Dense copy, intended for small verification problems.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.len();
        let mut d = nalgebra::DMatrix::zeros(n, n);
        let (cp, ri, v) = self.csc();
        for j in 0..n {
            for p in cp[j]..cp[j + 1] {
                d[(ri[p], j)] += v[p];
            }
        }
        d
    }
}

/// Sparse LU factorization of a [`SaddleMatrix`], reused across right-hand sides.
#[derive(Clone)]
pub struct Factorization {
    lu: Lu<usize, f64>,
    n: usize,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("n", &self.n).finish()
    }
}

impl Factorization {
    pub(crate) fn new(pattern: &Pattern, matrix: &SaddleMatrix) -> Result<Self> {
        let lu = Lu::try_new_with_symbolic(pattern.lu.clone(), matrix.mat.as_ref())
            .map_err(|e| Error::LinearSolver(format!("numeric LU: {e:?}")))?;
        Ok(Self { lu, n: matrix.len() })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.n {
            return Err(Error::InvalidArgument("right-hand side length mismatch".into()));
        }
        let mut b = Mat::from_fn(self.n, 1, |i, _| rhs[i]);
        self.lu.solve_in_place(b.as_mut());
        let x: Vec<f64> = (0..self.n).map(|i| b[(i, 0)]).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("LU solve produced non-finite values".into()));
        }
        Ok(x)
    }
}
