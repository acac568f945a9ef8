//! Online layer: assembly and solution of the homothetic-tube QP.
//!
//! The tube is a sequence of translated/scaled copies `z_l (+) alpha_l X0`
//! of the offline shape. Robust containment of every parameter/disturbance
//! realization reduces to linear rows per tube vertex and stage. Two
//! equivalent encodings of the inner maximization over the parameter box are
//! provided:
//!
//! * `BoxClosedForm` (default): the dual multipliers are eliminated; the
//!   per-row worst case `|H_p E^v|_r' radius` factors through auxiliary
//!   variables `s >= |[X^v; U^v]|`, entering with nonnegative coefficients,
//!   so the projected feasible set is unchanged.
//! * `Explicit`: sparse nonnegative multipliers with the equality coupling
//!   rows, kept for general polytopic parameter sets, for the duality
//!   cross-checks, and for complexity accounting.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::design::ControllerDesign;
use crate::error::{Error, Result};
use crate::geometry::HPolytope;
use crate::model::MultiStepModel;
use crate::solve::{ConicProblem, SolveStatus, TripletMat};

/// State and input constraint sets in normalized form `Fx <= 1`, `Gu <= 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintSets {
    pub x_poly: HPolytope,
    pub u_poly: HPolytope,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CostMode {
    /// Stage cost on the nominal prediction plus the terminal cost.
    Quadratic,
    /// `sum_l c' Xhat_l` over the horizon, plus a small tube regularization
    /// `alpha_reg * sum_l alpha_l` that selects the tightest feasible tube.
    Linear { c: Vec<f64>, alpha_reg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaMode {
    BoxClosedForm,
    Explicit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Number of p-step blocks in the prediction horizon.
    pub horizon: usize,
    pub cost: CostMode,
    pub terminal: bool,
    pub lambda_mode: LambdaMode,
    pub warm_start: bool,
}

/// Named, disjoint variable ranges of the stacked decision vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableMap {
    pub groups: Vec<(String, std::ops::Range<usize>)>,
}

impl VariableMap {
    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
            .unwrap_or_else(|| panic!("unknown variable group {name}"))
    }

    pub fn n_vars(&self) -> usize {
        self.groups.last().map_or(0, |(_, r)| r.end)
    }

    /// Groups must partition `0..n_vars` exactly once.
    pub fn is_partition(&self) -> bool {
        let mut next = 0;
        for (_, r) in &self.groups {
            if r.start != next || r.end < r.start {
                return false;
            }
            next = r.end;
        }
        true
    }
}

/// Bookkeeping carried alongside the assembled program.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpMeta {
    pub p: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
    pub n_vertices: usize,
    pub lambda_mode: LambdaMode,
    pub terminal: bool,
    /// `K X_j`, so the applied block input is `V_0 + k_xj`.
    pub k_xj: Vec<f64>,
    pub x_j: Vec<f64>,
}

/// Sparse quadratic program `min 1/2 o'Po + q'o  s.t.  A_eq o = b, A_in o <= b`.
#[derive(Debug, Clone)]
pub struct QPSpec {
    pub n_vars: usize,
    /// Solver-convention quadratic part (includes the factor 2).
    pub quad: Vec<(usize, usize, f64)>,
    pub lin: Vec<f64>,
    pub eq: TripletMat,
    pub ineq: TripletMat,
    pub index_map: VariableMap,
    pub meta: QpMeta,
}

impl QPSpec {
    pub fn n_eq_rows(&self) -> usize {
        self.eq.nrows
    }

    pub fn n_ineq_rows(&self) -> usize {
        self.ineq.nrows
    }

    /// Plain-text sparse export: `row col value` triplets under COST/EQ/INEQ
    /// section headers (linear cost and right-hand sides in LINEAR/EQ_RHS/
    /// INEQ_RHS sections).
    pub fn export_triplets(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("NVARS {}\n", self.n_vars));
        s.push_str("COST\n");
        for &(r, c, v) in &self.quad {
            s.push_str(&format!("{r} {c} {v:.17e}\n"));
        }
        s.push_str("LINEAR\n");
        for (i, v) in self.lin.iter().enumerate() {
            if *v != 0.0 {
                s.push_str(&format!("{i} {v:.17e}\n"));
            }
        }
        s.push_str("EQ\n");
        for &(r, c, v) in &self.eq.triplets {
            s.push_str(&format!("{r} {c} {v:.17e}\n"));
        }
        s.push_str("EQ_RHS\n");
        for (i, v) in self.eq.rhs.iter().enumerate() {
            s.push_str(&format!("{i} {v:.17e}\n"));
        }
        s.push_str("INEQ\n");
        for &(r, c, v) in &self.ineq.triplets {
            s.push_str(&format!("{r} {c} {v:.17e}\n"));
        }
        s.push_str("INEQ_RHS\n");
        for (i, v) in self.ineq.rhs.iter().enumerate() {
            s.push_str(&format!("{i} {v:.17e}\n"));
        }
        s
    }
}

/// Tube decision variables of one solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeDecision {
    pub z: Vec<DVector<f64>>,
    pub alpha: Vec<f64>,
    pub v_seq: Vec<DVector<f64>>,
}

/// Nominal prediction at the nominal parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NominalTrajectory {
    pub x_hat: Vec<DVector<f64>>,
    pub u_hat: Vec<DVector<f64>>,
    pub y_hat: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolutionStatus {
    Optimal,
    /// Solver failed but the shifted candidate from the previous step was
    /// feasible and is returned instead.
    CandidateFallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MPCSolution {
    pub tube: TubeDecision,
    pub nominal: NominalTrajectory,
    pub objective: f64,
    pub status: SolutionStatus,
    /// `V_0 + K X_j`, the block input applied over the next p instants.
    pub applied_input: DVector<f64>,
    pub eq_residual: f64,
    pub ineq_residual: f64,
}

/// Rows of `H_p = blkdiag(H_x, F_p)` with their predictor-step linkage.
struct HpRow {
    /// Coefficients over predictor state indices (length n_x).
    h: RowDVector<f64>,
    /// Which predictor step this row constrains (p for the H_x block).
    step: usize,
    /// Right-hand side kind: state rows get alpha_{l+1}, output rows get 1.
    is_state_row: bool,
    /// Tightening `w_bar` entry.
    w_bar: f64,
}

fn hp_rows(model: &MultiStepModel, design: &ControllerDesign, x_poly: &HPolytope) -> Vec<HpRow> {
    let h_x = design.x0.to_hpolytope();
    let mut rows = Vec::new();
    for r in 0..h_x.n_rows() {
        rows.push(HpRow {
            h: h_x.h_mat.row(r).into_owned(),
            step: model.p,
            is_state_row: true,
            w_bar: design.tightenings.wx_bar[r],
        });
    }
    let c_x = x_poly.n_rows();
    for jb in 0..model.p.saturating_sub(1) {
        for rr in 0..c_x {
            rows.push(HpRow {
                h: x_poly.h_mat.row(rr).into_owned(),
                step: jb + 1,
                is_state_row: false,
                w_bar: design.tightenings.wy_bar[jb * c_x + rr],
            });
        }
    }
    rows
}

/// Absolute-value coefficient row over `[X^v; U^v]` coordinates:
/// `W[c] = sum_i |h_i| * radius(block(i, step), c)`.
fn abs_coefficients(model: &MultiStepModel, row: &HpRow) -> DVector<f64> {
    let n_x = model.n_x;
    let width = n_x + model.n_up();
    let mut w = DVector::zeros(width);
    for b in model.blocks.iter().filter(|b| b.step == row.step) {
        let h_i = row.h[b.state_index].abs();
        if h_i == 0.0 {
            continue;
        }
        for c in 0..b.len {
            w[c] += h_i * model.theta.radius[b.offset + c];
        }
    }
    w
}

/// Assemble the tube QP for the current lifted state.
pub fn build_qp(
    x_j: &DVector<f64>,
    model: &MultiStepModel,
    design: &ControllerDesign,
    sets: &ConstraintSets,
    cfg: &MpcConfig,
) -> Result<QPSpec> {
    if design.model_hash != model.content_hash() {
        return Err(Error::UnverifiedDesign);
    }
    let n_x = model.n_x;
    if x_j.len() != n_x || sets.x_poly.dim() != n_x || sets.u_poly.dim() != model.n_u {
        return Err(Error::DimensionMismatch("build_qp inputs".into()));
    }
    if !x_j.iter().all(|v| v.is_finite()) {
        return Err(Error::DimensionMismatch("x_j must be finite".into()));
    }
    let horizon = cfg.horizon;
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    if cfg.terminal && design.eta.is_none() {
        return Err(Error::Config("terminal constraint requested but no eta in design".into()));
    }
    let n_up = model.n_up();
    let n_y = model.n_y();
    let verts = design.x0.vertices().to_vec();
    let n_v = verts.len();
    let k_gain = &design.k_gain;
    let c_x = sets.x_poly.n_rows();
    let c_u = sets.u_poly.n_rows();
    let rows = hp_rows(model, design, &sets.x_poly);
    let width = n_x + n_up;

    // variable layout
    let mut groups: Vec<(String, std::ops::Range<usize>)> = Vec::new();
    let mut cursor = 0usize;
    let alloc = |name: String, len: usize, groups: &mut Vec<(String, std::ops::Range<usize>)>,
                     cursor: &mut usize| {
        let r = *cursor..*cursor + len;
        groups.push((name, r.clone()));
        *cursor += len;
        r
    };
    let z_range = alloc("z".into(), (horizon + 1) * n_x, &mut groups, &mut cursor);
    let a_range = alloc("alpha".into(), horizon + 1, &mut groups, &mut cursor);
    let v_range = alloc("V".into(), horizon * n_up, &mut groups, &mut cursor);
    let s_range = if cfg.lambda_mode == LambdaMode::BoxClosedForm {
        alloc("s_abs".into(), horizon * n_v * width, &mut groups, &mut cursor)
    } else {
        // sparse multipliers: two per (stage, vertex, row, linked parameter)
        let per_stage_vertex: usize = rows
            .iter()
            .map(|row| {
                2 * model
                    .blocks
                    .iter()
                    .filter(|b| b.step == row.step && row.h[b.state_index] != 0.0)
                    .map(|b| b.len)
                    .sum::<usize>()
            })
            .sum();
        alloc("Lambda".into(), horizon * n_v * per_stage_vertex, &mut groups, &mut cursor)
    };
    let xh_range = alloc("Xhat".into(), (horizon + 1) * n_x, &mut groups, &mut cursor);
    let uh_range = alloc("Uhat".into(), horizon * n_up, &mut groups, &mut cursor);
    let yh_range = alloc("Yhat".into(), horizon * n_y, &mut groups, &mut cursor);
    let n_vars = cursor;

    let z_at = |l: usize, c: usize| z_range.start + l * n_x + c;
    let a_at = |l: usize| a_range.start + l;
    let v_at = |l: usize, c: usize| v_range.start + l * n_up + c;
    let s_at = |l: usize, v: usize, c: usize| s_range.start + (l * n_v + v) * width + c;
    let xh_at = |l: usize, c: usize| xh_range.start + l * n_x + c;
    let uh_at = |l: usize, c: usize| uh_range.start + l * n_up + c;
    let yh_at = |l: usize, c: usize| yh_range.start + l * n_y + c;

    let mut eq = TripletMat::new(n_vars);
    let mut ineq = TripletMat::new(n_vars);

    let at_center = model.at_center();
    let a_c = &at_center.a_bar;
    let b_c = &at_center.b_bar;
    let c_c = &at_center.c_bar;
    let d_c = &at_center.d_bar;
    let base = model.nominal();

    // (9a) state tightening at every stage including the last
    for l in 0..=horizon {
        for r in 0..c_x {
            let mut row: Vec<(usize, f64)> = (0..n_x)
                .map(|c| (z_at(l, c), sets.x_poly.h_mat[(r, c)]))
                .collect();
            row.push((a_at(l), design.tightenings.f_bar[r]));
            ineq.push_row(&row, sets.x_poly.h_vec[r]);
        }
    }
    // (9b) input tightening
    let gpk = {
        // rows of G_p K: block b, constraint row r -> G row applied to input block b
        let mut m = DMatrix::zeros(c_u * model.p, n_x);
        for blk in 0..model.p {
            for r in 0..c_u {
                let mut acc = RowDVector::zeros(n_x);
                for cu in 0..model.n_u {
                    acc += k_gain.row(blk * model.n_u + cu) * sets.u_poly.h_mat[(r, cu)];
                }
                m.row_mut(blk * c_u + r).copy_from(&acc);
            }
        }
        m
    };
    for l in 0..horizon {
        for gr in 0..c_u * model.p {
            let blk = gr / c_u;
            let r = gr % c_u;
            let mut row: Vec<(usize, f64)> =
                (0..n_x).map(|c| (z_at(l, c), gpk[(gr, c)])).collect();
            for cu in 0..model.n_u {
                row.push((v_at(l, blk * model.n_u + cu), sets.u_poly.h_mat[(r, cu)]));
            }
            row.push((a_at(l), design.tightenings.g_bar[gr]));
            ineq.push_row(&row, sets.u_poly.h_vec[r]);
        }
    }
    // (9c) initial membership H_x (X_j - z_0) <= alpha_0 1
    let h_x = design.x0.to_hpolytope();
    for r in 0..h_x.n_rows() {
        let mut row: Vec<(usize, f64)> =
            (0..n_x).map(|c| (z_at(0, c), -h_x.h_mat[(r, c)])).collect();
        row.push((a_at(0), -1.0));
        let rhs = -(h_x.h_mat.row(r) * x_j)[0];
        ineq.push_row(&row, rhs);
    }
    // alpha >= 0
    for l in 0..=horizon {
        ineq.push_row(&[(a_at(l), -1.0)], 0.0);
    }

    // tube propagation rows per stage and vertex
    for l in 0..horizon {
        for (v_i, xv) in verts.iter().enumerate() {
            let kxv = k_gain * xv;
            // coefficient helpers for X^v = z_l + alpha_l x^v and
            // U^v = V_l + K X^v as linear forms over (z_l, alpha_l, V_l)
            let xv_alpha = xv; // d X^v / d alpha_l
            match cfg.lambda_mode {
                LambdaMode::BoxClosedForm => {
                    // s-epigraph rows: s >= |X^v|, s >= |U^v|
                    for c in 0..n_x {
                        for sign in [1.0, -1.0] {
                            let row = vec![
                                (z_at(l, c), sign),
                                (a_at(l), sign * xv_alpha[c]),
                                (s_at(l, v_i, c), -1.0),
                            ];
                            ineq.push_row(&row, 0.0);
                        }
                    }
                    for c in 0..n_up {
                        for sign in [1.0, -1.0] {
                            let mut row: Vec<(usize, f64)> = (0..n_x)
                                .map(|j| (z_at(l, j), sign * k_gain[(c, j)]))
                                .collect();
                            row.push((a_at(l), sign * kxv[c]));
                            row.push((v_at(l, c), sign));
                            row.push((s_at(l, v_i, n_x + c), -1.0));
                            ineq.push_row(&row, 0.0);
                        }
                    }
                }
                LambdaMode::Explicit => {}
            }

            // one inequality per H_p row
            let mut lambda_cursor = match cfg.lambda_mode {
                LambdaMode::Explicit => {
                    // recompute the per-(l, v) lambda offset
                    let per: usize = rows
                        .iter()
                        .map(|row| {
                            2 * model
                                .blocks
                                .iter()
                                .filter(|b| b.step == row.step && row.h[b.state_index] != 0.0)
                                .map(|b| b.len)
                                .sum::<usize>()
                        })
                        .sum();
                    s_range.start + (l * n_v + v_i) * per
                }
                LambdaMode::BoxClosedForm => 0,
            };
            for (ri, hp_row) in rows.iter().enumerate() {
                // center/base row through the predictor block `step`
                let (h_m, h_b): (RowDVector<f64>, RowDVector<f64>) = if hp_row.is_state_row {
                    (
                        (&hp_row.h * a_c).into_owned(),
                        (&hp_row.h * b_c).into_owned(),
                    )
                } else {
                    let jb = hp_row.step - 1;
                    (
                        (&hp_row.h * c_c.rows(jb * n_x, n_x)).into_owned(),
                        (&hp_row.h * d_c.rows(jb * n_x, n_x)).into_owned(),
                    )
                };
                let (h_m0, h_b0): (RowDVector<f64>, RowDVector<f64>) = if hp_row.is_state_row {
                    (
                        (&hp_row.h * &base.a_bar).into_owned(),
                        (&hp_row.h * &base.b_bar).into_owned(),
                    )
                } else {
                    let jb = hp_row.step - 1;
                    (
                        (&hp_row.h * base.c_bar.rows(jb * n_x, n_x)).into_owned(),
                        (&hp_row.h * base.d_bar.rows(jb * n_x, n_x)).into_owned(),
                    )
                };
                match cfg.lambda_mode {
                    LambdaMode::BoxClosedForm => {
                        // (h_m + h_b K) X^v + h_b-free V + W_abs s [- z_{l+1} - alpha_{l+1}] <= rhs
                        let eff = (&h_m + &h_b * k_gain).into_owned();
                        let mut row: Vec<(usize, f64)> = Vec::new();
                        for c in 0..n_x {
                            row.push((z_at(l, c), eff[c]));
                        }
                        let alpha_coef = (&eff * xv)[(0, 0)];
                        row.push((a_at(l), alpha_coef));
                        for c in 0..n_up {
                            row.push((v_at(l, c), h_b[c]));
                        }
                        let w_abs = abs_coefficients(model, hp_row);
                        for c in 0..width {
                            if w_abs[c] != 0.0 {
                                row.push((s_at(l, v_i, c), w_abs[c]));
                            }
                        }
                        let rhs = if hp_row.is_state_row {
                            for c in 0..n_x {
                                row.push((z_at(l + 1, c), -hp_row.h[c]));
                            }
                            row.push((a_at(l + 1), -1.0));
                            -hp_row.w_bar
                        } else {
                            1.0 - hp_row.w_bar
                        };
                        ineq.push_row(&row, rhs);
                    }
                    LambdaMode::Explicit => {
                        // (9d): base row + lambda' h_theta <= Phi - w_bar
                        let eff0 = (&h_m0 + &h_b0 * k_gain).into_owned();
                        let mut row: Vec<(usize, f64)> = Vec::new();
                        for c in 0..n_x {
                            row.push((z_at(l, c), eff0[c]));
                        }
                        row.push((a_at(l), (&eff0 * xv)[(0, 0)]));
                        for c in 0..n_up {
                            row.push((v_at(l, c), h_b0[c]));
                        }
                        let linked: Vec<(usize, usize)> = model
                            .blocks
                            .iter()
                            .enumerate()
                            .filter(|(_, b)| {
                                b.step == hp_row.step && hp_row.h[b.state_index] != 0.0
                            })
                            .flat_map(|(bi, b)| (0..b.len).map(move |c| (bi, c)))
                            .collect();
                        let lam_base = lambda_cursor;
                        for (slot, &(bi, c)) in linked.iter().enumerate() {
                            let b = &model.blocks[bi];
                            let m = b.offset + c;
                            let (cm, rm) = (model.theta.center[m], model.theta.radius[m]);
                            // lambda_plus * (c + r) + lambda_minus * (r - c)
                            row.push((lam_base + 2 * slot, cm + rm));
                            row.push((lam_base + 2 * slot + 1, rm - cm));
                        }
                        let rhs = if hp_row.is_state_row {
                            for c in 0..n_x {
                                row.push((z_at(l + 1, c), -hp_row.h[c]));
                            }
                            row.push((a_at(l + 1), -1.0));
                            -hp_row.w_bar
                        } else {
                            1.0 - hp_row.w_bar
                        };
                        ineq.push_row(&row, rhs);
                        // (9e): [H_p E^v]_{r,m} = lambda_plus - lambda_minus
                        for (slot, &(bi, c)) in linked.iter().enumerate() {
                            let b = &model.blocks[bi];
                            let h_i = hp_row.h[b.state_index];
                            let mut erow: Vec<(usize, f64)> = Vec::new();
                            if c < n_x {
                                // h_i * (z_l[c] + alpha_l xv[c])
                                erow.push((z_at(l, c), h_i));
                                erow.push((a_at(l), h_i * xv[c]));
                            } else {
                                let cu = c - n_x;
                                // h_i * (V_l[cu] + K_row(cu) (z_l + alpha_l xv))
                                erow.push((v_at(l, cu), h_i));
                                for j in 0..n_x {
                                    erow.push((z_at(l, j), h_i * k_gain[(cu, j)]));
                                }
                                erow.push((a_at(l), h_i * kxv[cu]));
                            }
                            erow.push((lam_base + 2 * slot, -1.0));
                            erow.push((lam_base + 2 * slot + 1, 1.0));
                            eq.push_row(&erow, 0.0);
                            // lambda >= 0
                            ineq.push_row(&[(lam_base + 2 * slot, -1.0)], 0.0);
                            ineq.push_row(&[(lam_base + 2 * slot + 1, -1.0)], 0.0);
                        }
                        lambda_cursor += 2 * linked.len();
                    }
                }
                let _ = ri;
            }
        }
    }

    // terminal inclusion z_N (+) alpha_N X0 ⊆ eta X0, vertex rows
    if cfg.terminal {
        let eta = design.eta.expect("checked above");
        for xv in &verts {
            for r in 0..h_x.n_rows() {
                let mut row: Vec<(usize, f64)> =
                    (0..n_x).map(|c| (z_at(horizon, c), h_x.h_mat[(r, c)])).collect();
                row.push((a_at(horizon), (h_x.h_mat.row(r) * xv)[0]));
                ineq.push_row(&row, eta);
            }
        }
    }

    // nominal prediction equalities at the nominal parameters
    for c in 0..n_x {
        eq.push_row(&[(xh_at(0, c), 1.0)], x_j[c]);
    }
    for l in 0..horizon {
        // Uhat_l = K Xhat_l + V_l
        for c in 0..n_up {
            let mut row: Vec<(usize, f64)> = vec![(uh_at(l, c), 1.0), (v_at(l, c), -1.0)];
            for j in 0..n_x {
                row.push((xh_at(l, j), -k_gain[(c, j)]));
            }
            eq.push_row(&row, 0.0);
        }
        // Xhat_{l+1} = A Xhat_l + B Uhat_l
        for r in 0..n_x {
            let mut row: Vec<(usize, f64)> = vec![(xh_at(l + 1, r), 1.0)];
            for c in 0..n_x {
                row.push((xh_at(l, c), -base.a_bar[(r, c)]));
            }
            for c in 0..n_up {
                row.push((uh_at(l, c), -base.b_bar[(r, c)]));
            }
            eq.push_row(&row, 0.0);
        }
        // Yhat_l = C Xhat_l + D Uhat_l
        for r in 0..n_y {
            let mut row: Vec<(usize, f64)> = vec![(yh_at(l, r), 1.0)];
            for c in 0..n_x {
                row.push((xh_at(l, c), -base.c_bar[(r, c)]));
            }
            for c in 0..n_up {
                row.push((uh_at(l, c), -base.d_bar[(r, c)]));
            }
            eq.push_row(&row, 0.0);
        }
    }

    // cost
    let mut quad: Vec<(usize, usize, f64)> = Vec::new();
    let mut lin = vec![0.0; n_vars];
    match &cfg.cost {
        CostMode::Quadratic => {
            let w = &design.weights;
            for l in 0..horizon {
                for c in 0..n_x {
                    quad.push((xh_at(l, c), xh_at(l, c), 2.0 * w.q_diag[c]));
                }
                for c in 0..n_y {
                    quad.push((yh_at(l, c), yh_at(l, c), 2.0 * w.q_diag[c % n_x]));
                }
                for blk in 0..model.p {
                    for r in 0..model.n_u {
                        for c in 0..model.n_u {
                            let v = w.r_mat[(r, c)];
                            if v != 0.0 {
                                quad.push((
                                    uh_at(l, blk * model.n_u + r),
                                    uh_at(l, blk * model.n_u + c),
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
                        quad.push((xh_at(horizon, r), xh_at(horizon, c), 2.0 * v));
                    }
                }
            }
        }
        CostMode::Linear { c, alpha_reg } => {
            if c.len() != n_x {
                return Err(Error::Config("linear cost vector length".into()));
            }
            for l in 1..=horizon {
                for j in 0..n_x {
                    lin[xh_at(l, j)] += c[j];
                }
            }
            for l in 0..=horizon {
                lin[a_at(l)] += *alpha_reg;
            }
        }
    }

    let index_map = VariableMap { groups };
    debug_assert!(index_map.is_partition());
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
            n_u: model.n_u,
            horizon,
            n_vertices: n_v,
            lambda_mode: cfg.lambda_mode,
            terminal: cfg.terminal,
            k_xj: (k_gain * x_j).iter().cloned().collect(),
            x_j: x_j.iter().cloned().collect(),
        },
    })
}

/// Solve the assembled program and extract the tube decision.
pub fn solve_step(qp: &QPSpec) -> Result<MPCSolution> {
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
            return Err(Error::Infeasible("tube QP infeasible at current state".into()))
        }
        SolveStatus::Unbounded => {
            return Err(Error::SolverFailure("tube QP unbounded (cost not bounded below)".into()))
        }
        SolveStatus::Failure => {
            return Err(Error::SolverFailure("tube QP solver did not converge".into()))
        }
    }
    extract_solution(qp, &sol.x, sol.objective)
}

pub fn extract_solution(qp: &QPSpec, x: &[f64], objective: f64) -> Result<MPCSolution> {
    let eq_res = qp.eq.residual(x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let ineq_res = qp.ineq.residual(x).iter().fold(0.0f64, |m, v| m.max(*v));
    if eq_res > 1e-6 || ineq_res > 1e-6 {
        return Err(Error::SolverFailure(format!(
            "optimal solution fails residual check (eq {eq_res:.2e}, ineq {ineq_res:.2e})"
        )));
    }
    let meta = &qp.meta;
    let n_x = meta.n_x;
    let n_up = meta.n_u * meta.p;
    let n_y = n_x * (meta.p - 1);
    let zr = qp.index_map.range("z");
    let ar = qp.index_map.range("alpha");
    let vr = qp.index_map.range("V");
    let xr = qp.index_map.range("Xhat");
    let ur = qp.index_map.range("Uhat");
    let yr = qp.index_map.range("Yhat");
    let take = |r: &std::ops::Range<usize>, l: usize, width: usize| -> DVector<f64> {
        DVector::from_fn(width, |c, _| x[r.start + l * width + c])
    };
    let horizon = meta.horizon;
    let tube = TubeDecision {
        z: (0..=horizon).map(|l| take(&zr, l, n_x)).collect(),
        alpha: (0..=horizon).map(|l| x[ar.start + l]).collect(),
        v_seq: (0..horizon).map(|l| take(&vr, l, n_up)).collect(),
    };
    let nominal = NominalTrajectory {
        x_hat: (0..=horizon).map(|l| take(&xr, l, n_x)).collect(),
        u_hat: (0..horizon).map(|l| take(&ur, l, n_up)).collect(),
        y_hat: (0..horizon).map(|l| take(&yr, l, n_y)).collect(),
    };
    let applied_input =
        DVector::from_fn(n_up, |c, _| tube.v_seq[0][c] + meta.k_xj[c]);
    Ok(MPCSolution {
        tube,
        nominal,
        objective,
        status: SolutionStatus::Optimal,
        applied_input,
        eq_residual: eq_res,
        ineq_residual: ineq_res,
    })
}

/// Monte-Carlo tube containment certificate.
#[derive(Debug, Clone)]
pub struct ContainmentReport {
    pub max_state_violation: f64,
    pub max_output_violation: f64,
    pub samples: usize,
}

/// Sample parameters, tube states and disturbances; check that every
/// propagated state lands in the next tube cross-section and every
/// intermediate prediction satisfies the output constraints.
pub fn verify_tube(
    solution: &MPCSolution,
    model: &MultiStepModel,
    design: &ControllerDesign,
    sets: &ConstraintSets,
    n_samples: usize,
    seed: u64,
) -> ContainmentReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let horizon = solution.tube.z.len() - 1;
    let h_x = design.x0.to_hpolytope();
    let mut max_state: f64 = f64::NEG_INFINITY;
    let mut max_output: f64 = f64::NEG_INFINITY;
    let n_v = design.x0.vertices().len();
    for s in 0..n_samples {
        let l = s % horizon;
        // theta: alternate box vertices and uniform draws
        let theta = if s % 2 == 0 {
            DVector::from_fn(model.n_p(), |m, _| {
                let sign: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                model.theta.center[m] + sign * model.theta.radius[m]
            })
        } else {
            model.theta.sample(&mut rng)
        };
        // x in the stage-l cross-section: vertex or interior sample of X0
        let x = if s % 3 == 0 {
            let xv = &design.x0.vertices()[rng.random_range(0..n_v)];
            &solution.tube.z[l] + xv * solution.tube.alpha[l]
        } else {
            &solution.tube.z[l] + design.x0.sample(&mut rng) * solution.tube.alpha[l]
        };
        let u = &design.k_gain * &x + &solution.tube.v_seq[l];
        let mats = model.evaluate(&theta);
        let wx = model.wx.sample(&mut rng);
        let next = &mats.a_bar * &x + &mats.b_bar * &u + wx;
        let memb = &h_x.h_mat * (&next - &solution.tube.z[l + 1]);
        max_state = max_state.max(memb.max() - solution.tube.alpha[l + 1]);
        if model.p > 1 {
            let wy = model.wy.sample(&mut rng);
            let y = &mats.c_bar * &x + &mats.d_bar * &u + wy;
            for jb in 0..model.p - 1 {
                let yj = y.rows(jb * model.n_x, model.n_x).into_owned();
                let viol = (&sets.x_poly.h_mat * yj - &sets.x_poly.h_vec).max();
                max_output = max_output.max(viol);
            }
        }
    }
    ContainmentReport {
        max_state_violation: max_state,
        max_output_violation: max_output,
        samples: n_samples,
    }
}

/// One stage/vertex worth of reformulation data for the duality check.
#[derive(Debug, Clone)]
pub struct StageData {
    /// `H_p E^v` (rows x n_p).
    pub e_mat: DMatrix<f64>,
    /// `H_p e^v`.
    pub e_vec: DVector<f64>,
    /// `Phi_{l+1} - w_bar`.
    pub rhs: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct DualEquivalence {
    pub lambda_feasible: bool,
    pub vertex_feasible: bool,
    pub max_value_gap: f64,
}

impl DualEquivalence {
    pub fn agrees(&self) -> bool {
        self.lambda_feasible == self.vertex_feasible
    }
}

/// Check that multiplier feasibility of the reformulated rows is equivalent
/// to the brute-force vertex maximization over the parameter polytope.
pub fn dual_equivalence_check(stage: &StageData, theta: &HPolytope, tol: f64) -> Result<DualEquivalence> {
    let n_rows = stage.e_mat.nrows();
    let q_t = theta.n_rows();
    let n_p = theta.dim();
    if stage.e_vec.len() != n_rows || stage.rhs.len() != n_rows || stage.e_mat.ncols() != n_p {
        return Err(Error::DimensionMismatch("dual_equivalence_check".into()));
    }
    // multiplier side: per row, minimize h' lambda s.t. H' lambda = g, lambda >= 0
    let mut lambda_feasible = true;
    let mut lambda_values = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        let mut prob = ConicProblem::lp(q_t);
        prob.lin = theta.h_vec.iter().cloned().collect();
        for c in 0..n_p {
            let row: Vec<(usize, f64)> = (0..q_t).map(|k| (k, theta.h_mat[(k, c)])).collect();
            prob.eq.push_row(&row, stage.e_mat[(r, c)]);
        }
        for k in 0..q_t {
            prob.ineq.push_row(&[(k, -1.0)], 0.0);
        }
        let sol = prob.solve()?;
        match sol.status {
            SolveStatus::Optimal => {
                lambda_values.push(sol.objective);
                if sol.objective + stage.e_vec[r] > stage.rhs[r] + tol {
                    lambda_feasible = false;
                }
            }
            SolveStatus::Infeasible => {
                lambda_feasible = false;
                lambda_values.push(f64::INFINITY);
            }
            _ => return Err(Error::LPFailure("multiplier LP failed".into())),
        }
    }
    // vertex side
    let verts = crate::geometry::enumerate_vertices(theta, 1e-9);
    if verts.is_empty() {
        return Err(Error::InfeasibleSet);
    }
    let mut vertex_feasible = true;
    let mut max_gap: f64 = 0.0;
    for r in 0..n_rows {
        let best = verts
            .iter()
            .map(|t| (stage.e_mat.row(r) * t)[0])
            .fold(f64::NEG_INFINITY, f64::max);
        if best + stage.e_vec[r] > stage.rhs[r] + tol {
            vertex_feasible = false;
        }
        if lambda_values[r].is_finite() {
            max_gap = max_gap.max((lambda_values[r] - best).abs());
        }
    }
    Ok(DualEquivalence { lambda_feasible, vertex_feasible, max_value_gap: max_gap })
}

/// Support value of a linear functional over the QP's feasible set
/// (cost ignored). Directions address the full variable vector.
pub fn feasible_support(qp: &QPSpec, direction: &[f64]) -> Result<f64> {
    let mut prob = ConicProblem {
        n: qp.n_vars,
        quad: Vec::new(),
        lin: direction.iter().map(|v| -v).collect(),
        eq: qp.eq.clone(),
        ineq: qp.ineq.clone(),
    };
    // pad direction if shorter than the variable vector
    prob.lin.resize(qp.n_vars, 0.0);
    let sol = prob.solve_with(1e-10, 200_000)?;
    match sol.status {
        SolveStatus::Optimal => Ok(-sol.objective),
        SolveStatus::Infeasible => Err(Error::Infeasible("feasible set empty".into())),
        SolveStatus::Unbounded => Err(Error::Unbounded),
        SolveStatus::Failure => Err(Error::LPFailure("support LP failed".into())),
    }
}

/// The recursive-feasibility candidate: shift the previous decision by one
/// stage and append the terminal stage `z = 0, alpha = eta, V = 0`.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub z: Vec<DVector<f64>>,
    pub alpha: Vec<f64>,
    pub v_seq: Vec<DVector<f64>>,
}

pub fn shifted_candidate(prev: &MPCSolution, design: &ControllerDesign) -> Option<Candidate> {
    let eta = design.eta?;
    let horizon = prev.tube.z.len() - 1;
    let n_x = prev.tube.z[0].len();
    let n_up = prev.tube.v_seq.first()?.len();
    let mut z: Vec<DVector<f64>> = prev.tube.z[1..].to_vec();
    z.push(DVector::zeros(n_x));
    let mut alpha: Vec<f64> = prev.tube.alpha[1..].to_vec();
    alpha.push(eta);
    let mut v_seq: Vec<DVector<f64>> = prev.tube.v_seq[1..].to_vec();
    v_seq.push(DVector::zeros(n_up));
    debug_assert_eq!(z.len(), horizon + 1);
    Some(Candidate { z, alpha, v_seq })
}

/// Assemble the full decision vector for a (z, alpha, V) candidate in
/// box-closed-form layout: auxiliary variables take their tight values, the
/// nominal trajectory is rolled out from `x_j`.
pub fn candidate_vector(
    qp: &QPSpec,
    design: &ControllerDesign,
    model: &MultiStepModel,
    cand: &Candidate,
) -> Option<Vec<f64>> {
    if qp.meta.lambda_mode != LambdaMode::BoxClosedForm {
        return None;
    }
    let meta = &qp.meta;
    let n_x = meta.n_x;
    let n_up = meta.n_u * meta.p;
    let n_y = n_x * (meta.p - 1);
    let width = n_x + n_up;
    let horizon = meta.horizon;
    let mut x = vec![0.0; qp.n_vars];
    let zr = qp.index_map.range("z");
    let ar = qp.index_map.range("alpha");
    let vr = qp.index_map.range("V");
    for l in 0..=horizon {
        for c in 0..n_x {
            x[zr.start + l * n_x + c] = cand.z[l][c];
        }
        x[ar.start + l] = cand.alpha[l];
    }
    for l in 0..horizon {
        for c in 0..n_up {
            x[vr.start + l * n_up + c] = cand.v_seq[l][c];
        }
    }
    let verts = design.x0.vertices();
    let n_v = verts.len();
    let sr = qp.index_map.range("s_abs");
    for l in 0..horizon {
        for (v_i, xv) in verts.iter().enumerate() {
            let xvx = &cand.z[l] + xv * cand.alpha[l];
            let uvx = &design.k_gain * &xvx + &cand.v_seq[l];
            for c in 0..n_x {
                x[sr.start + (l * n_v + v_i) * width + c] = xvx[c].abs();
            }
            for c in 0..n_up {
                x[sr.start + (l * n_v + v_i) * width + n_x + c] = uvx[c].abs();
            }
        }
    }
    // nominal rollout
    let base = model.nominal();
    let xr = qp.index_map.range("Xhat");
    let ur = qp.index_map.range("Uhat");
    let yr = qp.index_map.range("Yhat");
    let mut xh = DVector::from_fn(n_x, |c, _| meta.x_j[c]);
    for l in 0..=horizon {
        for c in 0..n_x {
            x[xr.start + l * n_x + c] = xh[c];
        }
        if l == horizon {
            break;
        }
        let uh = &design.k_gain * &xh + &cand.v_seq[l];
        for c in 0..n_up {
            x[ur.start + l * n_up + c] = uh[c];
        }
        let yh = &base.c_bar * &xh + &base.d_bar * &uh;
        for c in 0..n_y {
            x[yr.start + l * n_y + c] = yh[c];
        }
        xh = &base.a_bar * &xh + &base.b_bar * &uh;
    }
    Some(x)
}

/// Solve with the optional shifted-candidate fallback (the proof's candidate
/// stands in when the solver stalls numerically; genuine infeasibility is
/// still surfaced).
pub fn step_with_fallback(
    qp: &QPSpec,
    design: &ControllerDesign,
    model: &MultiStepModel,
    prev: Option<&MPCSolution>,
) -> Result<MPCSolution> {
    match solve_step(qp) {
        Ok(sol) => Ok(sol),
        Err(e @ Error::Infeasible(_)) => Err(e),
        Err(e) => {
            let Some(prev) = prev else { return Err(e) };
            let Some(cand) = shifted_candidate(prev, design) else { return Err(e) };
            let Some(x) = candidate_vector(qp, design, model, &cand) else {
                return Err(e);
            };
            let eq_res = qp.eq.residual(&x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let ineq_res = qp.ineq.residual(&x).iter().fold(0.0f64, |m, v| m.max(*v));
            if eq_res > 1e-6 || ineq_res > 1e-6 {
                return Err(e);
            }
            let obj = {
                let mut o = 0.0;
                for &(r, c, v) in &qp.quad {
                    o += 0.5 * v * x[r] * x[c];
                }
                for (i, v) in qp.lin.iter().enumerate() {
                    o += v * x[i];
                }
                o
            };
            let mut sol = extract_solution(qp, &x, obj)?;
            sol.status = SolutionStatus::CandidateFallback;
            Ok(sol)
        }
    }
}
