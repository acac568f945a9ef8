//! Thin LP/QP layer over the Clarabel interior-point solver.
//!
//! Everything upstream expresses problems as sparse triplets; this module
//! owns the CSC conversion, the tolerance profile (feasibility 1e-9,
//! optimality 1e-8 for LPs) and the status mapping into crate errors.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sparse matrix under construction, with a dense right-hand side.
#[derive(Debug, Clone, Default)]
pub struct TripletMat {
    pub nrows: usize,
    pub ncols: usize,
    pub triplets: Vec<(usize, usize, f64)>,
    pub rhs: Vec<f64>,
}

impl TripletMat {
    pub fn new(ncols: usize) -> Self {
        TripletMat { nrows: 0, ncols, triplets: Vec::new(), rhs: Vec::new() }
    }

    /// Append one row given as (column, coefficient) pairs and its rhs entry.
    pub fn push_row(&mut self, entries: &[(usize, f64)], rhs: f64) {
        let r = self.nrows;
        for &(c, v) in entries {
            debug_assert!(c < self.ncols);
            if v != 0.0 {
                self.triplets.push((r, c, v));
            }
        }
        self.rhs.push(rhs);
        self.nrows += 1;
    }

    /// Append a dense block of rows: `mat * x(cols) <= / == rhs`.
    pub fn push_matrix_rows(&mut self, mat: &DMatrix<f64>, cols: &[usize], rhs: &DVector<f64>) {
        assert_eq!(mat.ncols(), cols.len());
        assert_eq!(mat.nrows(), rhs.len());
        for r in 0..mat.nrows() {
            let row = self.nrows;
            for (k, &c) in cols.iter().enumerate() {
                let v = mat[(r, k)];
                if v != 0.0 {
                    self.triplets.push((row, c, v));
                }
            }
            self.rhs.push(rhs[r]);
            self.nrows += 1;
        }
    }

    pub fn nnz(&self) -> usize {
        self.triplets.len()
    }

    /// Convert to CSC, summing duplicate entries.
    pub fn to_csc(&self) -> CscMatrix<f64> {
        csc_from_triplets(self.nrows, self.ncols, &self.triplets)
    }

    /// Dense residual `A x - rhs`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r: Vec<f64> = self.rhs.iter().map(|v| -v).collect();
        for &(i, j, v) in &self.triplets {
            r[i] += v * x[j];
        }
        r
    }
}

pub fn csc_from_triplets(m: usize, n: usize, triplets: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
    sorted.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval: Vec<usize> = Vec::with_capacity(sorted.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(sorted.len());
    let mut last: Option<(usize, usize)> = None;
    for &(r, c, v) in &sorted {
        if last == Some((c, r)) {
            *nzval.last_mut().unwrap() += v;
        } else {
            rowval.push(r);
            nzval.push(v);
            colptr[c + 1] += 1;
            last = Some((c, r));
        }
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

/// Outcome of one LP/QP solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    Failure,
}

/// Problem `min 1/2 x'Px + q'x  s.t.  A_eq x = b_eq, A_in x <= b_in`.
#[derive(Debug, Clone)]
pub struct ConicProblem {
    pub n: usize,
    pub quad: Vec<(usize, usize, f64)>,
    pub lin: Vec<f64>,
    pub eq: TripletMat,
    pub ineq: TripletMat,
}

impl ConicProblem {
    pub fn lp(n: usize) -> Self {
        ConicProblem { n, quad: Vec::new(), lin: vec![0.0; n], eq: TripletMat::new(n), ineq: TripletMat::new(n) }
    }

    pub fn solve(&self) -> Result<Solution> {
        self.solve_with(1e-10, 200_000)
    }

    pub fn solve_with(&self, tol: f64, max_iter: u32) -> Result<Solution> {
        let p = csc_from_triplets(self.n, self.n, &self.quad);
        let mut a_triplets = self.eq.triplets.clone();
        for &(r, c, v) in &self.ineq.triplets {
            a_triplets.push((r + self.eq.nrows, c, v));
        }
        let a = csc_from_triplets(self.eq.nrows + self.ineq.nrows, self.n, &a_triplets);
        let mut b = self.eq.rhs.clone();
        b.extend_from_slice(&self.ineq.rhs);
        let cones = [
            SupportedConeT::ZeroConeT(self.eq.nrows),
            SupportedConeT::NonnegativeConeT(self.ineq.nrows),
        ];
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(max_iter)
            .tol_feas(tol)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .build()
            .map_err(|e| Error::SolverFailure(format!("settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &self.lin, &a, &b, &cones, settings)
            .map_err(|e| Error::SolverFailure(format!("setup: {e:?}")))?;
        solver.solve();
        let status = match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                SolveStatus::Unbounded
            }
            _ => SolveStatus::Failure,
        };
        Ok(Solution {
            x: solver.solution.x.clone(),
            objective: solver.solution.obj_val,
            status,
        })
    }
}

/// Maximize `d'x` over `{x : H x <= h}`. Used for support values of general
/// H-polytopes; boxes and low-complexity shapes have closed forms upstream.
pub fn support_lp(h_mat: &DMatrix<f64>, h_vec: &DVector<f64>, d: &DVector<f64>) -> Result<f64> {
    let n = d.len();
    let mut prob = ConicProblem::lp(n);
    prob.lin = (-d).iter().cloned().collect();
    prob.ineq.push_matrix_rows(h_mat, &(0..n).collect::<Vec<_>>(), h_vec);
    let sol = prob.solve_with(1e-11, 200_000)?;
    match sol.status {
        SolveStatus::Optimal => Ok(-sol.objective),
        SolveStatus::Infeasible => Err(Error::InfeasibleSet),
        SolveStatus::Unbounded => Err(Error::Unbounded),
        SolveStatus::Failure => Err(Error::LPFailure("support LP did not converge".into())),
    }
}
