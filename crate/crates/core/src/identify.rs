//! Set-membership identification of multi-step predictors.
//!
//! For every state `i` and horizon `j = 1..=p` a predictor row
//! `x_i(k+j) ~ psi_j(k)' theta` is identified from data: the smallest
//! residual bound `lambda` consistent with all records (an LP), the
//! feasible-parameter box (coordinate LPs over the FPS), and a nominal
//! parameter vector minimizing the worst-case prediction bound `tau`.
//!
//! The FPS threshold is a validated bound `eps_hat = (1 + inflation) * lambda`
//! rather than the raw LP optimum: the raw minimum can slightly overfit the
//! disturbance realization, which would exclude the true parameters from the
//! FPS. The same `eps_hat` enters `tau`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxSet;
use crate::model::{ExactLift, LiftedMatrices, MultiStepModel, ParamBlock, Trajectory};
use crate::solve::{ConicProblem, SolveStatus};

/// Raw identification data: states `x_0..x_N` and inputs `u_0..u_{N-1}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        Dataset { states: t.states.clone(), inputs: t.inputs.clone() }
    }

    pub fn n_steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn n_x(&self) -> usize {
        self.states.first().map_or(0, |x| x.len())
    }

    pub fn n_u(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    /// CSV with header `k,x1..xn,u1..um`; the final row carries the terminal
    /// state and empty input columns.
    pub fn to_csv(&self) -> String {
        let n_x = self.n_x();
        let n_u = self.n_u();
        let mut s = String::from("k");
        for i in 1..=n_x {
            s.push_str(&format!(",x{i}"));
        }
        for i in 1..=n_u {
            s.push_str(&format!(",u{i}"));
        }
        s.push('\n');
        for k in 0..self.states.len() {
            s.push_str(&format!("{k}"));
            for v in self.states[k].iter() {
                s.push_str(&format!(",{v:.17e}"));
            }
            if k < self.inputs.len() {
                for v in self.inputs[k].iter() {
                    s.push_str(&format!(",{v:.17e}"));
                }
            } else {
                for _ in 0..n_u {
                    s.push(',');
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Config("empty dataset CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let n_x = cols.iter().filter(|c| c.starts_with('x')).count();
        let n_u = cols.iter().filter(|c| c.starts_with('u')).count();
        if n_x == 0 || cols.first() != Some(&"k") {
            return Err(Error::Config("dataset CSV header must be k,x1..xn,u1..um".into()));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Config(format!("bad number {s:?}: {e}")))
        };
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 1 + n_x + n_u {
                return Err(Error::Config(format!("dataset CSV row has {} fields", f.len())));
            }
            let mut x = DVector::zeros(n_x);
            for i in 0..n_x {
                x[i] = parse(f[1 + i])?;
            }
            states.push(x);
            let u_fields = &f[1 + n_x..];
            if u_fields.iter().all(|s| !s.is_empty()) {
                let mut u = DVector::zeros(n_u);
                for (i, s) in u_fields.iter().enumerate() {
                    u[i] = parse(s)?;
                }
                inputs.push(u);
            }
        }
        if states.len() != inputs.len() + 1 {
            return Err(Error::Config("dataset CSV must end with a terminal state row".into()));
        }
        Ok(Dataset { states, inputs })
    }
}

/// One record of the horizon-`j` regression for one state coordinate.
#[derive(Debug, Clone)]
pub struct Regressor {
    /// `[x_k', u_k', ..., u_{k+j-1}']'`, length `n_x + n_u*j`.
    pub psi: DVector<f64>,
    /// `x_i(k+j)`.
    pub target: f64,
}

/// Identification result for one predictor row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentifiedRow {
    pub state_index: usize,
    pub step: usize,
    pub theta_box: BoxSet,
    pub theta_hat_row: DVector<f64>,
    pub lambda_min: f64,
    pub eps_hat: f64,
    pub tau_hat: f64,
}

/// Regressor/target pairs without the excitation check (the worst-case
/// bound and validation paths accept arbitrary record counts).
pub fn raw_regressors(ds: &Dataset, step: usize, state_index: usize) -> Result<Vec<Regressor>> {
    let n_x = ds.n_x();
    let n_u = ds.n_u();
    if step < 1 || ds.n_steps() < step {
        return Err(Error::DimensionMismatch(format!(
            "dataset has {} steps, horizon {step} requested",
            ds.n_steps()
        )));
    }
    let d = n_x + n_u * step;
    let n_records = ds.n_steps() - step + 1;
    let mut out = Vec::with_capacity(n_records);
    for k in 0..n_records {
        let mut psi = DVector::zeros(d);
        psi.rows_mut(0, n_x).copy_from(&ds.states[k]);
        for s in 0..step {
            psi.rows_mut(n_x + s * n_u, n_u).copy_from(&ds.inputs[k + s]);
        }
        out.push(Regressor { psi, target: ds.states[k + step][state_index] });
    }
    Ok(out)
}

/// Regressor/target pairs for state `i` over horizon `j`, with the
/// persistence-of-excitation check on the Gram matrix.
pub fn build_regressors(ds: &Dataset, step: usize, state_index: usize) -> Result<Vec<Regressor>> {
    let out = raw_regressors(ds, step, state_index)?;
    let d = out.first().map_or(0, |r| r.psi.len());
    // PE check: Gram = sum psi psi' must be numerically full rank.
    let mut gram = DMatrix::zeros(d, d);
    for r in &out {
        gram += &r.psi * r.psi.transpose();
    }
    let eig = gram.symmetric_eigenvalues();
    let max_e = eig.max();
    let min_e = eig.min();
    let ratio = if max_e > 0.0 { min_e / max_e } else { 0.0 };
    if ratio < 1e-8 {
        return Err(Error::PEViolation { ratio });
    }
    Ok(out)
}

/// LP `min lambda s.t. |target - psi' theta| <= lambda` over all records.
pub fn min_error_bound(regs: &[Regressor]) -> Result<(f64, DVector<f64>)> {
    let d = regs.first().map_or(0, |r| r.psi.len());
    if d == 0 {
        return Err(Error::DimensionMismatch("no regressors".into()));
    }
    // variables [theta (d), lambda]
    let n = d + 1;
    let mut prob = ConicProblem::lp(n);
    prob.lin[d] = 1.0;
    for r in regs {
        let mut row: Vec<(usize, f64)> = r.psi.iter().cloned().enumerate().collect();
        row.push((d, -1.0));
        prob.ineq.push_row(&row, r.target); // psi'th - lam <= target
        let mut row: Vec<(usize, f64)> = r.psi.iter().map(|v| -v).enumerate().collect();
        row.push((d, -1.0));
        prob.ineq.push_row(&row, -r.target); // -psi'th - lam <= -target
    }
    prob.ineq.push_row(&[(d, -1.0)], 0.0); // lambda >= 0
    let sol = prob.solve()?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::LPFailure(format!("min_error_bound status {:?}", sol.status)));
    }
    let theta = DVector::from_iterator(d, sol.x[..d].iter().cloned());
    Ok((sol.x[d].max(0.0), theta))
}

/// Bounding box of the FPS `{theta : |target - psi' theta| <= lambda}` via
/// 2d coordinate LPs, inflated by 1e-9 per side.
pub fn feasible_parameter_box(regs: &[Regressor], lambda: f64) -> Result<BoxSet> {
    let d = regs.first().map_or(0, |r| r.psi.len());
    if d == 0 {
        return Err(Error::DimensionMismatch("no regressors".into()));
    }
    let mut lo = DVector::zeros(d);
    let mut hi = DVector::zeros(d);
    for m in 0..d {
        for maximize in [false, true] {
            let mut prob = ConicProblem::lp(d);
            prob.lin[m] = if maximize { -1.0 } else { 1.0 };
            for r in regs {
                let row: Vec<(usize, f64)> = r.psi.iter().cloned().enumerate().collect();
                prob.ineq.push_row(&row, r.target + lambda);
                let row: Vec<(usize, f64)> = r.psi.iter().map(|v| -v).enumerate().collect();
                prob.ineq.push_row(&row, lambda - r.target);
            }
            let sol = prob.solve()?;
            match sol.status {
                SolveStatus::Optimal => {
                    if maximize {
                        hi[m] = -sol.objective;
                    } else {
                        lo[m] = sol.objective;
                    }
                }
                SolveStatus::Unbounded => return Err(Error::UnboundedParameter { coord: m }),
                SolveStatus::Infeasible => {
                    return Err(Error::Infeasible("FPS empty (lambda too small)".into()))
                }
                SolveStatus::Failure => {
                    return Err(Error::LPFailure("FPS coordinate LP failed".into()))
                }
            }
        }
    }
    const SLACK: f64 = 1e-9;
    let center = (&lo + &hi) * 0.5;
    let radius = (&hi - &lo) * 0.5 + DVector::from_element(d, SLACK);
    BoxSet::new(center, radius)
}

/// Worst-case prediction bound of a candidate nominal `theta_hat` over the
/// observed regressors: `max_k |psi(k)'(c - th)| + |psi(k)|' r + eps_hat`.
pub fn tau_of(regs: &[Regressor], theta_box: &BoxSet, theta_hat: &DVector<f64>, eps_hat: f64) -> f64 {
    let mut t: f64 = 0.0;
    for reg in regs {
        let off = reg.psi.dot(&(&theta_box.center - theta_hat)).abs();
        let spread = reg.psi.abs().dot(&theta_box.radius);
        t = t.max(off + spread);
    }
    t + eps_hat
}

/// Epigraph LP for `argmin_{theta_hat in box} max_k |psi'(c - th)| + |psi|'r`,
/// returning the minimizer (projected into the box) and the achieved
/// `tau = t* + eps_hat`.
pub fn nominal_parameters(
    regs: &[Regressor],
    theta_box: &BoxSet,
    eps_hat: f64,
) -> Result<(DVector<f64>, f64)> {
    let d = theta_box.dim();
    // variables [theta_hat (d), t]
    let mut prob = ConicProblem::lp(d + 1);
    prob.lin[d] = 1.0;
    for r in regs {
        let spread = r.psi.abs().dot(&theta_box.radius);
        let base = r.psi.dot(&theta_box.center);
        // psi'(c - th) + spread <= t  and  -psi'(c - th) + spread <= t
        let mut row: Vec<(usize, f64)> = r.psi.iter().map(|v| -v).enumerate().collect();
        row.push((d, -1.0));
        prob.ineq.push_row(&row, -base - spread);
        let mut row: Vec<(usize, f64)> = r.psi.iter().cloned().enumerate().collect();
        row.push((d, -1.0));
        prob.ineq.push_row(&row, base - spread);
    }
    for m in 0..d {
        prob.ineq.push_row(&[(m, 1.0)], theta_box.center[m] + theta_box.radius[m]);
        prob.ineq.push_row(&[(m, -1.0)], theta_box.radius[m] - theta_box.center[m]);
    }
    let sol = prob.solve()?;
    if sol.status != SolveStatus::Optimal {
        return Err(Error::LPFailure(format!("nominal_parameters status {:?}", sol.status)));
    }
    let mut theta_hat = DVector::from_iterator(d, sol.x[..d].iter().cloned());
    for m in 0..d {
        let lo = theta_box.center[m] - theta_box.radius[m];
        let hi = theta_box.center[m] + theta_box.radius[m];
        theta_hat[m] = theta_hat[m].clamp(lo, hi);
    }
    let tau = tau_of(regs, theta_box, &theta_hat, eps_hat);
    Ok((theta_hat, tau))
}

/// How the lumped disturbance boxes `W_x`, `W_y` are obtained.
pub enum DisturbanceBounds<'a> {
    /// The experiment generator knows the disturbance path: exact lumped maps
    /// from the true plant and the declared per-step box.
    Exact { lift: &'a ExactLift, w_step: &'a BoxSet },
    /// Estimated from identification residual bounds (used when the plant is
    /// unknown; absorbs parameter error and is therefore conservative).
    Estimated,
}

/// Identify every row `(i, j)`, `j = 1..=p`, and return them in `(j, i)` order.
pub fn identify_rows(ds: &Dataset, p: usize, inflation: f64) -> Result<Vec<IdentifiedRow>> {
    let n_x = ds.n_x();
    let mut rows = Vec::with_capacity(p * n_x);
    for step in 1..=p {
        for i in 0..n_x {
            let regs = build_regressors(ds, step, i)?;
            let (lambda, _) = min_error_bound(&regs)?;
            let eps_hat = (1.0 + inflation) * lambda;
            let theta_box = feasible_parameter_box(&regs, eps_hat)?;
            let (theta_hat_row, tau_hat) = nominal_parameters(&regs, &theta_box, eps_hat)?;
            rows.push(IdentifiedRow {
                state_index: i,
                step,
                theta_box,
                theta_hat_row,
                lambda_min: lambda,
                eps_hat,
                tau_hat,
            });
        }
    }
    Ok(rows)
}

/// Assemble the affine multi-step model from identified rows. The nominal
/// parameters are absorbed into the base matrices; the residual box is the
/// per-row FPS box shifted by the nominal.
pub fn assemble_multistep_model(
    rows: &[IdentifiedRow],
    n_x: usize,
    n_u: usize,
    p: usize,
    disturbance: DisturbanceBounds<'_>,
) -> Result<MultiStepModel> {
    let find = |i: usize, j: usize| -> Result<&IdentifiedRow> {
        rows.iter()
            .find(|r| r.state_index == i && r.step == j)
            .ok_or(Error::MissingRow { i, j })
    };
    let n_y = n_x * (p - 1);
    let n_up = n_u * p;
    let mut base = LiftedMatrices {
        a_bar: DMatrix::zeros(n_x, n_x),
        b_bar: DMatrix::zeros(n_x, n_up),
        c_bar: DMatrix::zeros(n_y, n_x),
        d_bar: DMatrix::zeros(n_y, n_up),
    };
    let mut blocks = Vec::with_capacity(p * n_x);
    let mut centers: Vec<f64> = Vec::new();
    let mut radii: Vec<f64> = Vec::new();
    let mut offset = 0;
    for step in 1..=p {
        for i in 0..n_x {
            let row = find(i, step)?;
            let len = n_x + n_u * step;
            if row.theta_hat_row.len() != len || row.theta_box.dim() != len {
                return Err(Error::DimensionMismatch(format!(
                    "row ({i},{step}) has {} parameters, expected {len}",
                    row.theta_hat_row.len()
                )));
            }
            // scatter the nominal into the base matrices
            for c in 0..len {
                let v = row.theta_hat_row[c];
                if step == p {
                    if c < n_x {
                        base.a_bar[(i, c)] = v;
                    } else {
                        base.b_bar[(i, c - n_x)] = v;
                    }
                } else {
                    let r = (step - 1) * n_x + i;
                    if c < n_x {
                        base.c_bar[(r, c)] = v;
                    } else {
                        base.d_bar[(r, c - n_x)] = v;
                    }
                }
            }
            for c in 0..len {
                centers.push(row.theta_box.center[c] - row.theta_hat_row[c]);
                radii.push(row.theta_box.radius[c]);
            }
            blocks.push(ParamBlock { state_index: i, step, offset, len });
            offset += len;
        }
    }
    let n_p = offset;
    let (wx, wy) = match disturbance {
        DisturbanceBounds::Exact { lift, w_step } => {
            if lift.p != p {
                return Err(Error::DimensionMismatch("lift horizon != p".into()));
            }
            let stack = |v: &DVector<f64>| -> DVector<f64> {
                let nw = v.len();
                DVector::from_fn(nw * p, |i, _| v[i % nw])
            };
            let c_stack = stack(&w_step.center);
            let r_stack = stack(&w_step.radius);
            let wx = BoxSet::new(
                &lift.m_bar * &c_stack,
                crate::geometry::abs_matrix(&lift.m_bar) * &r_stack,
            )?;
            let wy = BoxSet::new(
                &lift.n_bar * &c_stack,
                crate::geometry::abs_matrix(&lift.n_bar) * &r_stack,
            )?;
            (wx, wy)
        }
        DisturbanceBounds::Estimated => {
            let mut wx_r = DVector::zeros(n_x);
            for i in 0..n_x {
                wx_r[i] = find(i, p)?.eps_hat;
            }
            let mut wy_r = DVector::zeros(n_y);
            for step in 1..p {
                for i in 0..n_x {
                    wy_r[(step - 1) * n_x + i] = find(i, step)?.eps_hat;
                }
            }
            (BoxSet::centered(wx_r), BoxSet::centered(wy_r))
        }
    };
    Ok(MultiStepModel {
        p,
        n_x,
        n_u,
        base,
        blocks,
        theta: BoxSet::new(DVector::from_vec(centers), DVector::from_vec(radii))?,
        theta_hat: DVector::zeros(n_p),
        wx,
        wy,
    })
}

/// `n_p = p n_x^2 + n_x n_u p(p+1)/2`.
pub fn parameter_count(n_x: usize, n_u: usize, p: usize) -> usize {
    p * n_x * n_x + n_x * n_u * p * (p + 1) / 2
}
