//! Flexible GMRES with a block upper-triangular saddle-point preconditioner.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use super::SaddleMatrix;
use crate::error::{Error, Result};

/// `P = [[A, B^T], [0, S]]` with `A` factorized exactly and `S` diagonal.
pub(crate) struct BlockPreconditioner {
    a: Lu<usize, f64>,
    bt: Vec<Vec<(usize, f64)>>,
    s_inv: Vec<f64>,
    nv: usize,
}

impl BlockPreconditioner {
    pub(crate) fn new(k: &SaddleMatrix, schur: Vec<f64>) -> Result<Self> {
        let nv = k.n_velocity();
        let n = k.len();
        let (cp, ri, v) = k.csc();
        let mut trip = Vec::new();
        let mut bt = vec![Vec::new(); n - nv];
        for j in 0..n {
            for p in cp[j]..cp[j + 1] {
                let i = ri[p];
                if i < nv && j < nv {
                    trip.push(Triplet::new(i, j, v[p]));
                } else if i < nv && j >= nv {
                    bt[j - nv].push((i, v[p]));
                }
            }
        }
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(nv, nv, &trip)
            .map_err(|e| Error::LinearSolver(format!("velocity block: {e:?}")))?;
        let a = a.sp_lu().map_err(|e| Error::LinearSolver(format!("velocity block LU: {e:?}")))?;
        if schur.iter().any(|d| !(d.abs() > 0.0)) {
            return Err(Error::Singular("zero Schur complement diagonal".into()));
        }
        Ok(Self {
            a,
            bt,
            s_inv: schur.iter().map(|d| 1.0 / d).collect(),
            nv,
        })
    }

    pub(crate) fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        let nv = self.nv;
        let zp: Vec<f64> = r[nv..].iter().zip(&self.s_inv).map(|(a, b)| a * b).collect();
        let mut rhs = Mat::from_fn(nv, 1, |i, _| r[i]);
        for (col, &z) in self.bt.iter().zip(&zp) {
            for &(i, v) in col {
                rhs[(i, 0)] -= v * z;
            }
        }
        self.a.solve_in_place(rhs.as_mut());
        let mut out: Vec<f64> = (0..nv).map(|i| rhs[(i, 0)]).collect();
        out.extend(zp);
        Ok(out)
    }
}

pub(crate) struct KrylovOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Restarted right-preconditioned flexible GMRES from a zero initial guess.
pub(crate) fn fgmres(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    rtol: f64,
    max_iters: usize,
    restart: usize,
) -> Result<KrylovOutcome> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(KrylovOutcome {
            x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let mut total = 0;
    let mut rel = 1.0;
    while total < max_iters {
        let ax = apply(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
        let beta = dot(&r, &r).sqrt();
        rel = beta / bnorm;
        if rel <= rtol {
            break;
        }
        let m = restart.min(max_iters - total);
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|e| e / beta).collect()];
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut used = 0;
        for j in 0..m {
            let zj = precond(&v[j])?;
            let mut w = apply(&zj);
            z.push(zj);
            for i in 0..=j {
                h[i][j] = dot(&w, &v[i]);
                for (wk, vk) in w.iter_mut().zip(&v[i]) {
                    *wk -= h[i][j] * vk;
                }
            }
            h[j + 1][j] = dot(&w, &w).sqrt();
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let d = h[j][j].hypot(h[j + 1][j]);
            cs[j] = h[j][j] / d;
            sn[j] = h[j + 1][j] / d;
            h[j][j] = d;
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            used = j + 1;
            total += 1;
            rel = g[j + 1].abs() / bnorm;
            if rel <= rtol || w.iter().all(|e| *e == 0.0) {
                break;
            }
            let wn = dot(&w, &w).sqrt();
            v.push(w.iter().map(|e| e / wn).collect());
        }
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let s: f64 = (i + 1..used).map(|k| h[i][k] * y[k]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (yi, zi) in y.iter().zip(&z) {
            for (xk, zk) in x.iter_mut().zip(zi) {
                *xk += yi * zk;
            }
        }
        if rel <= rtol {
            // Confirm with the true residual.
            let ax = apply(&x);
            let tr: f64 = b.iter().zip(&ax).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            rel = tr / bnorm;
            if rel <= rtol * 10.0 {
                return Ok(KrylovOutcome {
                    x,
                    iterations: total,
                    relative_residual: rel,
                    converged: true,
                });
            }
        }
    }
    Ok(KrylovOutcome {
        x,
        iterations: total,
        relative_residual: rel,
        converged: rel <= rtol,
    })
}
