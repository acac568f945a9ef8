//! Comparison controllers: rigid-tube multi-rate MPC built on the worst-case
//! prediction bound, the one-step homothetic tube controller (the `p = 1`
//! instance of the main builder), and the complexity reporter.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::ControllerDesign;
use crate::error::{Error, Result};
use crate::geometry::{rpi_outer_approx, BoxSet};
use crate::identify::{raw_regressors, Dataset, IdentifiedRow};
use crate::model::MultiStepModel;
use crate::mpc::{ConstraintSets, CostMode, MpcConfig, QPSpec, QpMeta, VariableMap};
use crate::solve::{ConicProblem, SolveStatus, TripletMat};

/// How the worst-case parameter mismatch is maximized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TauMode {
    /// Max over the regressors observed in the identification data
    /// (less conservative; guarantees tied to the observed operating range).
    Observed,
    /// Max over the constraint box hull of `X x U^j`.
    WorstCase,
}

/// Worst-case bound table and the rigid cross-section built from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigidTubeConfig {
    /// `tau_{j,i}` including the residual bound (rows j = 1..=p).
    pub tau_total: DMatrix<f64>,
    /// Parameter-mismatch part only (drives the RPI recursion; the residual
    /// part is disturbance and enters through `W_x`).
    pub tau_param: DMatrix<f64>,
    pub mode: TauMode,
    /// Box RPI cross-section for `e+ = Acl e + tau_param-box (+) W_x`.
    pub rpi_box: BoxSet,
}

/// `tau_{j,i}` tables. `rows` must hold every `(i, j)` identification result.
pub fn worst_case_tau(
    model: &MultiStepModel,
    rows: &[IdentifiedRow],
    mode: TauMode,
    dataset: Option<&Dataset>,
    sets: &ConstraintSets,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = model.p;
    let n_x = model.n_x;
    let n_u = model.n_u;
    let mut tau_total = DMatrix::zeros(p, n_x);
    let mut tau_param = DMatrix::zeros(p, n_x);
    // box hull of X and U for the worst-case mode
    let hull = |poly: &crate::geometry::HPolytope| -> Result<(DVector<f64>, DVector<f64>)> {
        let n = poly.dim();
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for c in 0..n {
            let e = DVector::from_fn(n, |i, _| if i == c { 1.0 } else { 0.0 });
            hi[c] = poly.support(&e)?;
            lo[c] = -poly.support(&(-e))?;
        }
        Ok((lo, hi))
    };
    let xu_hull = match mode {
        TauMode::WorstCase => Some((hull(&sets.x_poly)?, hull(&sets.u_poly)?)),
        TauMode::Observed => None,
    };
    for row in rows {
        let (i, j) = (row.state_index, row.step);
        let center_off = &row.theta_box.center - &row.theta_hat_row;
        let radius = &row.theta_box.radius;
        let spread = match mode {
            TauMode::Observed => {
                let ds = dataset.ok_or(Error::MissingDataset)?;
                let regs = raw_regressors(ds, j, i)?;
                regs.iter()
                    .map(|r| r.psi.dot(&center_off).abs() + r.psi.abs().dot(radius))
                    .fold(0.0, f64::max)
            }
            TauMode::WorstCase => {
                let ((x_lo, x_hi), (u_lo, u_hi)) = xu_hull.as_ref().unwrap();
                // phi ranges over the box hull of X x U^j; for each sign of the
                // center term the maximum is coordinatewise separable
                let d = n_x + n_u * j;
                let coord_bounds = |c: usize| -> (f64, f64) {
                    if c < n_x {
                        (x_lo[c], x_hi[c])
                    } else {
                        let cu = (c - n_x) % n_u;
                        (u_lo[cu], u_hi[cu])
                    }
                };
                let mut best: f64 = 0.0;
                for sign in [1.0, -1.0] {
                    let mut acc = 0.0;
                    for c in 0..d {
                        let (lo, hi) = coord_bounds(c);
                        let w = sign * center_off[c];
                        // max over phi_c in [lo, hi] of w*phi + r*|phi|
                        let r = radius[c];
                        acc += (w * hi + r * hi.abs()).max(w * lo + r * lo.abs());
                    }
                    best = best.max(acc);
                }
                best
            }
        };
        tau_param[(j - 1, i)] = spread;
        tau_total[(j - 1, i)] = spread + row.eps_hat;
    }
    Ok((tau_total, tau_param))
}

/// Assemble the rigid cross-section and bound table.
pub fn rigid_tube_config(
    model: &MultiStepModel,
    design: &ControllerDesign,
    rows: &[IdentifiedRow],
    mode: TauMode,
    dataset: Option<&Dataset>,
    sets: &ConstraintSets,
    rpi_eps: f64,
) -> Result<RigidTubeConfig> {
    let (tau_total, tau_param) = worst_case_tau(model, rows, mode, dataset, sets)?;
    let nom = model.nominal();
    let a_cl = &nom.a_bar + &nom.b_bar * &design.k_gain;
    let tau_p = tau_param.row(model.p - 1).transpose();
    let driver = BoxSet::new(model.wx.center.clone(), &model.wx.radius + tau_p)?;
    let rpi_box = rpi_outer_approx(&a_cl, &driver, rpi_eps)?;
    Ok(RigidTubeConfig { tau_total, tau_param, mode, rpi_box })
}

/// The rigid-tube multi-rate QP: nominal `(z, V)` with a fixed cross-section,
/// constant support tightenings, and output rows tightened by `tau_{j,i}`
/// plus the tube-carried term.
pub fn rigid_tube_qp(
    x_j: &DVector<f64>,
    model: &MultiStepModel,
    design: &ControllerDesign,
    rigid: &RigidTubeConfig,
    sets: &ConstraintSets,
    cost: &CostMode,
    horizon: usize,
) -> Result<QPSpec> {
    if design.model_hash != model.content_hash() {
        return Err(Error::UnverifiedDesign);
    }
    let n_x = model.n_x;
    let n_up = model.n_up();
    let n_y = model.n_y();
    let n_u = model.n_u;
    let c_x = sets.x_poly.n_rows();
    let c_u = sets.u_poly.n_rows();
    let k_gain = &design.k_gain;
    let nom = model.nominal();
    let c_cl = if model.p > 1 {
        &nom.c_bar + &nom.d_bar * k_gain
    } else {
        DMatrix::zeros(0, n_x)
    };

    let mut groups = Vec::new();
    let mut cursor = 0usize;
    let alloc = |name: &str, len: usize, groups: &mut Vec<(String, std::ops::Range<usize>)>,
                 cursor: &mut usize| {
        let r = *cursor..*cursor + len;
        groups.push((name.to_string(), r.clone()));
        *cursor += len;
        r
    };
    let z_range = alloc("z", (horizon + 1) * n_x, &mut groups, &mut cursor);
    let v_range = alloc("V", horizon * n_up, &mut groups, &mut cursor);
    let uh_range = alloc("Uhat", horizon * n_up, &mut groups, &mut cursor);
    let yh_range = alloc("Yhat", horizon * n_y, &mut groups, &mut cursor);
    let n_vars = cursor;
    let z_at = |l: usize, c: usize| z_range.start + l * n_x + c;
    let v_at = |l: usize, c: usize| v_range.start + l * n_up + c;
    let uh_at = |l: usize, c: usize| uh_range.start + l * n_up + c;
    let yh_at = |l: usize, c: usize| yh_range.start + l * n_y + c;

    let mut eq = TripletMat::new(n_vars);
    let mut ineq = TripletMat::new(n_vars);

    // initial membership |X_j - z_0| <= rpi radius (about the rpi center)
    for c in 0..n_x {
        let hi = rigid.rpi_box.center[c] + rigid.rpi_box.radius[c];
        let lo = rigid.rpi_box.center[c] - rigid.rpi_box.radius[c];
        ineq.push_row(&[(z_at(0, c), 1.0)], x_j[c] - lo);
        ineq.push_row(&[(z_at(0, c), -1.0)], hi - x_j[c]);
    }
    // state rows with constant rpi support
    for l in 0..=horizon {
        for r in 0..c_x {
            let f_row = sets.x_poly.h_mat.row(r).transpose();
            let tight = rigid.rpi_box.support(&f_row) - rigid.rpi_box.center.dot(&f_row)
                + rigid.rpi_box.center.dot(&f_row);
            let row: Vec<(usize, f64)> =
                (0..n_x).map(|c| (z_at(l, c), sets.x_poly.h_mat[(r, c)])).collect();
            ineq.push_row(&row, sets.x_poly.h_vec[r] - tight);
        }
    }
    // input rows G_p V <= 1 - support of G_p K over the rpi box
    for l in 0..horizon {
        for blk in 0..model.p {
            for r in 0..c_u {
                let mut krow = DVector::zeros(n_x);
                for cu in 0..n_u {
                    krow += k_gain.row(blk * n_u + cu).transpose() * sets.u_poly.h_mat[(r, cu)];
                }
                let tight = rigid.rpi_box.support(&krow);
                let mut row: Vec<(usize, f64)> = Vec::new();
                for cu in 0..n_u {
                    row.push((v_at(l, blk * n_u + cu), sets.u_poly.h_mat[(r, cu)]));
                }
                ineq.push_row(&row, sets.u_poly.h_vec[r] - tight);
            }
        }
    }
    // output rows: F Yhat_block <= 1 - |F| tau_j - support of F C_cl,j over rpi
    for l in 0..horizon {
        for jb in 0..model.p - 1 {
            for r in 0..c_x {
                let mut tight = 0.0;
                for i in 0..n_x {
                    tight += sets.x_poly.h_mat[(r, i)].abs() * rigid.tau_total[(jb, i)];
                }
                let mut carried = DVector::zeros(n_x);
                for i in 0..n_x {
                    carried += c_cl.row(jb * n_x + i).transpose() * sets.x_poly.h_mat[(r, i)];
                }
                tight += rigid.rpi_box.support(&carried);
                let row: Vec<(usize, f64)> = (0..n_x)
                    .map(|c| (yh_at(l, jb * n_x + c), sets.x_poly.h_mat[(r, c)]))
                    .collect();
                ineq.push_row(&row, sets.x_poly.h_vec[r] - tight);
            }
        }
    }
    // nominal equalities: z_{l+1} = A z_l + B Uhat_l, Uhat_l = V_l,
    // Yhat_l = C z_l + D Uhat_l
    for l in 0..horizon {
        for c in 0..n_up {
            eq.push_row(&[(uh_at(l, c), 1.0), (v_at(l, c), -1.0)], 0.0);
        }
        for r in 0..n_x {
            let mut row: Vec<(usize, f64)> = vec![(z_at(l + 1, r), 1.0)];
            for c in 0..n_x {
                row.push((z_at(l, c), -nom.a_bar[(r, c)]));
            }
            for c in 0..n_up {
                row.push((uh_at(l, c), -nom.b_bar[(r, c)]));
            }
            eq.push_row(&row, 0.0);
        }
        for r in 0..n_y {
            let mut row: Vec<(usize, f64)> = vec![(yh_at(l, r), 1.0)];
            for c in 0..n_x {
                row.push((z_at(l, c), -nom.c_bar[(r, c)]));
            }
            for c in 0..n_up {
                row.push((uh_at(l, c), -nom.d_bar[(r, c)]));
            }
            eq.push_row(&row, 0.0);
        }
    }

    let mut quad: Vec<(usize, usize, f64)> = Vec::new();
    let mut lin = vec![0.0; n_vars];
    match cost {
        CostMode::Quadratic => {
            let w = &design.weights;
            for l in 0..horizon {
                for c in 0..n_x {
                    quad.push((z_at(l, c), z_at(l, c), 2.0 * w.q_diag[c]));
                }
                for c in 0..n_y {
                    quad.push((yh_at(l, c), yh_at(l, c), 2.0 * w.q_diag[c % n_x]));
                }
                for blk in 0..model.p {
                    for r in 0..n_u {
                        for c in 0..n_u {
                            let v = w.r_mat[(r, c)];
                            if v != 0.0 {
                                quad.push((
                                    uh_at(l, blk * n_u + r),
                                    uh_at(l, blk * n_u + c),
                                    2.0 * v,
                                ));
                            }
                        }
                    }
                }
            }
            for r in 0..n_x {
                for c in 0..n_x {
                    let v = design.p_mat[(r, c)];
                    if v != 0.0 {
                        quad.push((z_at(horizon, r), z_at(horizon, c), 2.0 * v));
                    }
                }
            }
        }
        CostMode::Linear { c, .. } => {
            if c.len() != n_x {
                return Err(Error::Config("linear cost vector length".into()));
            }
            for l in 1..=horizon {
                for j in 0..n_x {
                    lin[z_at(l, j)] += c[j];
                }
            }
        }
    }

    let index_map = VariableMap { groups };
    Ok(QPSpec {
        n_vars,
        quad,
        lin,
        eq,
        ineq,
        index_map,
        meta: QpMeta {
            p: model.p,
            n_x,
            n_u,
            horizon,
            n_vertices: 0,
            lambda_mode: crate::mpc::LambdaMode::BoxClosedForm,
            terminal: false,
            k_xj: (k_gain * x_j).iter().cloned().collect(),
            x_j: x_j.iter().cloned().collect(),
        },
    })
}

/// Rigid-controller optimizer.
#[derive(Debug, Clone)]
pub struct RigidSolution {
    pub z: Vec<DVector<f64>>,
    pub v_seq: Vec<DVector<f64>>,
    pub y_hat: Vec<DVector<f64>>,
    pub objective: f64,
    /// `V_0 + K (X_j - z_0)`.
    pub applied_input: DVector<f64>,
}

pub fn solve_rigid(qp: &QPSpec, k_gain: &DMatrix<f64>) -> Result<RigidSolution> {
    let prob = ConicProblem {
        n: qp.n_vars,
        quad: qp.quad.clone(),
        lin: qp.lin.clone(),
        eq: qp.eq.clone(),
        ineq: qp.ineq.clone(),
    };
    let sol = prob.solve_with(1e-9, 200_000)?;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            return Err(Error::Infeasible("rigid tube QP infeasible".into()))
        }
        _ => return Err(Error::SolverFailure("rigid tube QP failed".into())),
    }
    let meta = &qp.meta;
    let n_x = meta.n_x;
    let n_up = meta.n_u * meta.p;
    let n_y = n_x * (meta.p - 1);
    let horizon = meta.horizon;
    let zr = qp.index_map.range("z");
    let vr = qp.index_map.range("V");
    let yr = qp.index_map.range("Yhat");
    let take = |start: usize, l: usize, width: usize| -> DVector<f64> {
        DVector::from_fn(width, |c, _| sol.x[start + l * width + c])
    };
    let z: Vec<DVector<f64>> = (0..=horizon).map(|l| take(zr.start, l, n_x)).collect();
    let v_seq: Vec<DVector<f64>> = (0..horizon).map(|l| take(vr.start, l, n_up)).collect();
    let y_hat: Vec<DVector<f64>> = (0..horizon).map(|l| take(yr.start, l, n_y)).collect();
    let x_j = DVector::from_fn(n_x, |c, _| meta.x_j[c]);
    let applied_input = &v_seq[0] + k_gain * (&x_j - &z[0]);
    Ok(RigidSolution { z, v_seq, y_hat, objective: sol.objective, applied_input })
}

/// The one-step homothetic tube controller is exactly the main builder at
/// `p = 1` with a per-instant horizon; this delegation is the whole
/// implementation.
pub fn one_step_homothetic_qp(
    x_k: &DVector<f64>,
    one_step_model: &MultiStepModel,
    design: &ControllerDesign,
    sets: &ConstraintSets,
    cfg: &MpcConfig,
) -> Result<QPSpec> {
    if one_step_model.p != 1 {
        return Err(Error::DimensionMismatch("one-step baseline needs a p = 1 model".into()));
    }
    crate::mpc::build_qp(x_k, one_step_model, design, sets, cfg)
}

/// Reference values from the comparison table reported alongside our counts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReferenceCounts {
    pub n_var: f64,
    pub n_ineq: f64,
    pub n_eq: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub controller: String,
    pub n_var: usize,
    pub n_ineq: usize,
    pub n_eq: usize,
    pub reference: Option<ReferenceCounts>,
    pub note: String,
}

/// Variable/row counts per controller, CSV formatted, with the published
/// reference values alongside for comparison.
pub fn complexity_report(rows: &[ComplexityRow]) -> String {
    let mut s = String::from(
        "controller,n_var,n_ineq,n_eq,ref_n_var,ref_n_ineq,ref_n_eq,note\n",
    );
    for r in rows {
        let (rv, ri, re) = match &r.reference {
            Some(c) => (
                format!("{:.1e}", c.n_var),
                format!("{:.1e}", c.n_ineq),
                c.n_eq.map(|v| format!("{v:.1e}")).unwrap_or_default(),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.controller, r.n_var, r.n_ineq, r.n_eq, rv, ri, re, r.note
        ));
    }
    s
}

pub fn counts_of(qp: &QPSpec) -> (usize, usize, usize) {
    (qp.n_vars, qp.n_ineq_rows(), qp.n_eq_rows())
}

/// Per-axis tube interval `[lower, upper]` of a homothetic cross-section.
pub fn homothetic_axis_interval(
    z: &DVector<f64>,
    alpha: f64,
    x0: &crate::geometry::LowComplexityPolytope,
    axis: usize,
) -> (f64, f64) {
    let extent = x0.axis_extent(axis);
    (z[axis] - alpha * extent, z[axis] + alpha * extent)
}

/// Per-axis tube interval of a rigid cross-section.
pub fn rigid_axis_interval(z: &DVector<f64>, rpi: &BoxSet, axis: usize) -> (f64, f64) {
    (
        z[axis] + rpi.center[axis] - rpi.radius[axis],
        z[axis] + rpi.center[axis] + rpi.radius[axis],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{
        choose_tube_shape, precompute_tightenings, synthesize_kp, DesignWeights, Tightenings,
    };
    use crate::geometry::HPolytope;
    use crate::model::{LiftedMatrices, ParamBlock};
    use crate::mpc::{build_qp, solve_step, LambdaMode};
    use nalgebra::{dmatrix, dvector};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn box_poly(n: usize, half: f64) -> HPolytope {
        let mut h = DMatrix::zeros(2 * n, n);
        for i in 0..n {
            h[(i, i)] = 1.0 / half;
            h[(n + i, i)] = -1.0 / half;
        }
        HPolytope::new(h, DVector::from_element(2 * n, 1.0)).unwrap()
    }

    fn small_model(p: usize, radius: f64, w_radius: f64) -> MultiStepModel {
        let n_x = 2;
        let n_u = 1;
        let mut blocks = Vec::new();
        let mut offset = 0;
        for step in 1..=p {
            for i in 0..n_x {
                let len = n_x + n_u * step;
                blocks.push(ParamBlock { state_index: i, step, offset, len });
                offset += len;
            }
        }
        let a_bar = dmatrix![0.5, 0.1; -0.05, 0.4];
        let b_bar = if p == 1 { dmatrix![1.0; 0.4] } else { dmatrix![1.0, 0.3; 0.4, 0.9] };
        let (c_bar, d_bar) = if p > 1 {
            (dmatrix![0.7, 0.0; 0.1, 0.6], dmatrix![0.8, 0.0; 0.2, 0.0])
        } else {
            (DMatrix::zeros(0, 2), DMatrix::zeros(0, p))
        };
        MultiStepModel {
            p,
            n_x,
            n_u,
            base: LiftedMatrices { a_bar, b_bar, c_bar, d_bar },
            blocks,
            theta: BoxSet::centered(DVector::from_element(offset, radius)),
            theta_hat: DVector::zeros(offset),
            wx: BoxSet::centered(DVector::from_element(n_x, w_radius)),
            wy: BoxSet::centered(DVector::from_element(n_x * (p - 1), w_radius)),
        }
    }

    fn design_for(model: &MultiStepModel, sets: &ConstraintSets) -> ControllerDesign {
        let weights = DesignWeights::identity(model.n_x, model.n_u);
        let (k, p_mat) = synthesize_kp(model, &weights).unwrap();
        let (x0, rep) = choose_tube_shape(model, &k).unwrap();
        let tight: Tightenings = precompute_tightenings(
            &sets.x_poly,
            &sets.u_poly,
            &x0,
            &k,
            &model.wx,
            &model.wy,
            model.p,
        )
        .unwrap();
        ControllerDesign {
            k_gain: k,
            p_mat,
            x0,
            eta: None,
            tightenings: tight,
            weights,
            rho_nominal: rep.rho_nominal,
            rho_robust_bound: rep.rho_robust_bound,
            model_hash: model.content_hash(),
        }
    }

    fn rows_for(model: &MultiStepModel) -> Vec<IdentifiedRow> {
        // synthetic identification rows consistent with the model's box
        model
            .blocks
            .iter()
            .map(|b| IdentifiedRow {
                state_index: b.state_index,
                step: b.step,
                theta_box: BoxSet::new(
                    DVector::from_fn(b.len, |c, _| model.theta.center[b.offset + c]),
                    DVector::from_fn(b.len, |c, _| model.theta.radius[b.offset + c]),
                )
                .unwrap(),
                theta_hat_row: DVector::zeros(b.len),
                lambda_min: 0.0,
                eps_hat: 0.0,
                tau_hat: 0.0,
            })
            .collect()
    }

    #[test]
    fn tau_zero_without_uncertainty() {
        let model = small_model(2, 0.0, 0.0);
        let sets = ConstraintSets { x_poly: box_poly(2, 5.0), u_poly: box_poly(1, 5.0) };
        let rows = rows_for(&model);
        let (total, param) =
            worst_case_tau(&model, &rows, TauMode::WorstCase, None, &sets).unwrap();
        assert!(total.amax() < 1e-9 + 1e-12);
        assert!(param.amax() < 1e-9 + 1e-12);
    }

    #[test]
    fn tau_single_regressor_formula() {
        let model = small_model(1, 0.1, 0.0);
        let sets = ConstraintSets { x_poly: box_poly(2, 5.0), u_poly: box_poly(1, 5.0) };
        let mut rows = rows_for(&model);
        for r in rows.iter_mut() {
            r.eps_hat = 0.02;
        }
        let ds = Dataset {
            states: vec![dvector![1.0, -2.0], dvector![0.3, 0.1]],
            inputs: vec![dvector![0.5]],
        };
        let (total, _) =
            worst_case_tau(&model, &rows, TauMode::Observed, Some(&ds), &sets).unwrap();
        // |phi|' r + eps with phi = [1, -2, 0.5], r = 0.1 per coordinate
        let expect = 3.5 * 0.1 + 0.02;
        assert!((total[(0, 0)] - expect).abs() < 1e-9);
    }

    #[test]
    fn tau_observed_mode_requires_dataset() {
        let model = small_model(1, 0.1, 0.0);
        let sets = ConstraintSets { x_poly: box_poly(2, 5.0), u_poly: box_poly(1, 5.0) };
        let rows = rows_for(&model);
        match worst_case_tau(&model, &rows, TauMode::Observed, None, &sets) {
            Err(Error::MissingDataset) => {}
            other => panic!("expected MissingDataset, got {other:?}"),
        }
    }

    #[test]
    fn tau_validity_monte_carlo() {
        let model = small_model(2, 0.05, 1e-3);
        let sets = ConstraintSets { x_poly: box_poly(2, 5.0), u_poly: box_poly(1, 5.0) };
        let rows = rows_for(&model);
        let (_, param) =
            worst_case_tau(&model, &rows, TauMode::WorstCase, None, &sets).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        let nominal = model.at_center();
        for _ in 0..10_000 {
            let x = dvector![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let u = dvector![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let theta = model.theta.sample(&mut rng);
            let mats = model.evaluate(&theta);
            let mismatch = (&mats.a_bar - &nominal.a_bar) * &x + (&mats.b_bar - &nominal.b_bar) * &u;
            for i in 0..2 {
                assert!(
                    mismatch[i].abs() <= param[(model.p - 1, i)] + 1e-9,
                    "tau violated: {} > {}",
                    mismatch[i].abs(),
                    param[(model.p - 1, i)]
                );
            }
        }
    }

    #[test]
    fn degenerate_rigid_agrees_with_proposed() {
        // singleton parameters, zero disturbance: rigid tube collapses to
        // nominal MPC and must coincide with the homothetic controller
        let model = small_model(2, 0.0, 0.0);
        let sets = ConstraintSets { x_poly: box_poly(2, 5.0), u_poly: box_poly(1, 5.0) };
        let design = design_for(&model, &sets);
        let rows = rows_for(&model);
        let rigid =
            rigid_tube_config(&model, &design, &rows, TauMode::WorstCase, None, &sets, 1e-3)
                .unwrap();
        assert!(rigid.rpi_box.radius.amax() < 1e-8);
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..5 {
            let x0 = dvector![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let cfg = MpcConfig {
                horizon: 4,
                cost: CostMode::Quadratic,
                terminal: false,
                lambda_mode: LambdaMode::BoxClosedForm,
                warm_start: false,
            };
            let qp = build_qp(&x0, &model, &design, &sets, &cfg).unwrap();
            let sol = solve_step(&qp).unwrap();
            let rqp =
                rigid_tube_qp(&x0, &model, &design, &rigid, &sets, &cfg.cost, 4).unwrap();
            let rsol = solve_rigid(&rqp, &design.k_gain).unwrap();
            assert!(
                (&sol.applied_input - &rsol.applied_input).amax() < 1e-6,
                "applied inputs differ: {:?} vs {:?}",
                sol.applied_input.as_slice(),
                rsol.applied_input.as_slice()
            );
            assert!((sol.objective - rsol.objective).abs() < 1e-6);
        }
    }

    #[test]
    fn rigid_infeasible_on_tight_output_bound_while_proposed_survives() {
        // output band tight relative to the worst-case tau: the rigid
        // tightening eats the whole band, the homothetic tube does not
        let model = small_model(2, 0.04, 1e-4);
        let mut h = DMatrix::zeros(4, 2);
        h[(0, 0)] = 1.0 / 5.0;
        h[(1, 1)] = 1.0 / 0.05; // |x2| <= 0.05, both sides
        h[(2, 0)] = -1.0 / 5.0;
        h[(3, 1)] = -1.0 / 0.05;
        let x_poly = HPolytope::new(h, DVector::from_element(4, 1.0)).unwrap();
        let sets = ConstraintSets { x_poly, u_poly: box_poly(1, 5.0) };
        let design = design_for(&model, &sets);
        let rows = rows_for(&model);
        let rigid =
            rigid_tube_config(&model, &design, &rows, TauMode::WorstCase, None, &sets, 1e-3)
                .unwrap();
        let x0 = dvector![0.0, 0.0];
        let rqp = rigid_tube_qp(&x0, &model, &design, &rigid, &sets, &CostMode::Quadratic, 3)
            .unwrap();
        match solve_rigid(&rqp, &design.k_gain) {
            Err(Error::Infeasible(_)) => {}
            other => panic!("expected rigid infeasible, got {:?}", other.map(|_| ())),
        }
        let cfg = MpcConfig {
            horizon: 3,
            cost: CostMode::Quadratic,
            terminal: false,
            lambda_mode: LambdaMode::BoxClosedForm,
            warm_start: false,
        };
        let qp = build_qp(&x0, &model, &design, &sets, &cfg).unwrap();
        assert!(solve_step(&qp).is_ok(), "proposed controller must stay feasible");
    }

    #[test]
    fn one_step_delegation_is_identical() {
        let model = small_model(1, 0.02, 1e-3);
        let sets = ConstraintSets { x_poly: box_poly(2, 5.0), u_poly: box_poly(1, 5.0) };
        let design = design_for(&model, &sets);
        let cfg = MpcConfig {
            horizon: 6,
            cost: CostMode::Quadratic,
            terminal: false,
            lambda_mode: LambdaMode::BoxClosedForm,
            warm_start: false,
        };
        let x0 = dvector![0.2, -0.3];
        let a = one_step_homothetic_qp(&x0, &model, &design, &sets, &cfg).unwrap();
        let b = build_qp(&x0, &model, &design, &sets, &cfg).unwrap();
        assert_eq!(a.n_vars, b.n_vars);
        assert_eq!(a.eq.triplets, b.eq.triplets);
        assert_eq!(a.ineq.triplets, b.ineq.triplets);
    }

    #[test]
    fn complexity_report_format_and_empty_qp() {
        let empty = QPSpec {
            n_vars: 0,
            quad: vec![],
            lin: vec![],
            eq: TripletMat::new(0),
            ineq: TripletMat::new(0),
            index_map: VariableMap { groups: vec![] },
            meta: QpMeta {
                p: 1,
                n_x: 0,
                n_u: 0,
                horizon: 0,
                n_vertices: 0,
                lambda_mode: LambdaMode::BoxClosedForm,
                terminal: false,
                k_xj: vec![],
                x_j: vec![],
            },
        };
        let (v, i, e) = counts_of(&empty);
        assert_eq!((v, i, e), (0, 0, 0));
        let csv = complexity_report(&[ComplexityRow {
            controller: "proposed".into(),
            n_var: v,
            n_ineq: i,
            n_eq: e,
            reference: Some(ReferenceCounts { n_var: 1.2e5, n_ineq: 1.2e5, n_eq: Some(6.1e5) }),
            note: "equality count reported, not gated".into(),
        }]);
        assert!(csv.starts_with("controller,n_var,n_ineq,n_eq"));
        assert!(csv.contains("proposed,0,0,0,1.2e5,1.2e5,6.1e5"));
    }
}
