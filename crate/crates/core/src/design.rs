//! Offline synthesis: tube feedback `K`, diagonal terminal cost `P`, the
//! low-complexity tube shape, terminal scaling `eta`, and the precomputed
//! constraint tightenings.
//!
//! The terminal-cost condition couples `P` with the uncertain closed loop
//! over the whole parameter box. Because every predictor row carries its own
//! independent parameters and `P`, `Q` are diagonal, the condition decomposes
//! into per-row dominance constraints that only involve each row's own
//! vertex set (never the full box). The synthesis path here:
//!
//! 1. `K` from the infinite-horizon design on the nominal lifted system
//!    (a Riccati iteration with the output cross terms folded in);
//! 2. per-row dominating matrices `S` with `S >= c(v)' c(v)` at every vertex
//!    `v` of the row's box, computed from the extreme points of the row
//!    zonotope via a minimum-volume-ellipsoid iteration;
//! 3. a cutting-plane pass for the diagonal entries of `P` on
//!    `diag(p) >= sum_i p_i S_i + Q + sum_{i,j} q_i S_{i,j} + K'R_p K`.
//!
//! The contract is the verifier, not the solver: whatever path produced
//! `(K, P)`, [`verify_terminal_cost`] must report a nonnegative margin.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxSet, HPolytope, LowComplexityPolytope};
use crate::model::MultiStepModel;
use crate::solve::{ConicProblem, SolveStatus};

/// Stage-cost weights. `Q` is diagonal positive definite (the per-row
/// decomposition requires it); `R` is any positive definite matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignWeights {
    pub q_diag: DVector<f64>,
    pub r_mat: DMatrix<f64>,
}

impl DesignWeights {
    pub fn new(q_diag: DVector<f64>, r_mat: DMatrix<f64>) -> Result<Self> {
        if q_diag.iter().any(|&q| q <= 0.0) {
            return Err(Error::Config("Q diagonal entries must be positive".into()));
        }
        if r_mat.nrows() != r_mat.ncols() {
            return Err(Error::Config("R must be square".into()));
        }
        let sym = (&r_mat + r_mat.transpose()) * 0.5;
        if nalgebra::Cholesky::new(sym).is_none() {
            return Err(Error::Config("R must be positive definite".into()));
        }
        Ok(DesignWeights { q_diag, r_mat })
    }

    pub fn identity(n_x: usize, n_u: usize) -> Self {
        DesignWeights {
            q_diag: DVector::from_element(n_x, 1.0),
            r_mat: DMatrix::identity(n_u, n_u),
        }
    }

    pub fn q_mat(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.q_diag)
    }

    /// blockdiag(Q, ..., Q), p-1 blocks (empty for p = 1).
    pub fn qp_block(&self, p: usize) -> DMatrix<f64> {
        let n = self.q_diag.len();
        let m = n * (p - 1);
        let mut out = DMatrix::zeros(m, m);
        for b in 0..p - 1 {
            for i in 0..n {
                out[(b * n + i, b * n + i)] = self.q_diag[i];
            }
        }
        out
    }

    /// blockdiag(R, ..., R), p blocks.
    pub fn rp_block(&self, p: usize) -> DMatrix<f64> {
        let n = self.r_mat.nrows();
        let mut out = DMatrix::zeros(n * p, n * p);
        for b in 0..p {
            out.view_mut((b * n, b * n), (n, n)).copy_from(&self.r_mat);
        }
        out
    }
}

/// Support-value tightenings used by every controller.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tightenings {
    /// `max_{x in X0} [F]_i x`, one per state-constraint row.
    pub f_bar: DVector<f64>,
    /// `max_{x in X0} [G_p K]_j x`, one per stacked input row.
    pub g_bar: DVector<f64>,
    /// Support of `W_x` along the rows of `H_x = [V; -V]`.
    pub wx_bar: DVector<f64>,
    /// Support of `W_y` along the rows of `F_p`.
    pub wy_bar: DVector<f64>,
}

/// Everything the online layer needs, plus the hash of the model it was
/// designed for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerDesign {
    pub k_gain: DMatrix<f64>,
    pub p_mat: DMatrix<f64>,
    pub x0: LowComplexityPolytope,
    pub eta: Option<f64>,
    pub tightenings: Tightenings,
    pub weights: DesignWeights,
    pub rho_nominal: f64,
    pub rho_robust_bound: f64,
    pub model_hash: String,
}

impl ControllerDesign {
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("design serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        format!("{:x}", h.finalize())
    }
}

/// Affine family of one closed-loop predictor row:
/// `row(theta) = center + sum_m s_m * generators[m]`, `s in [-1,1]^d`.
#[derive(Debug, Clone)]
pub struct RowFamily {
    pub state_index: usize,
    pub step: usize,
    pub center: RowDVector<f64>,
    pub generators: Vec<RowDVector<f64>>,
}

/// Closed-loop row families of `C_cl(theta)` (step < p) and `A_cl(theta)`
/// (step = p), expanded around the parameter-box center.
pub fn closed_loop_rows(model: &MultiStepModel, k_gain: &DMatrix<f64>) -> Vec<RowFamily> {
    let n_x = model.n_x;
    let at_center = model.at_center();
    let a_cl = &at_center.a_bar + &at_center.b_bar * k_gain;
    let c_cl = if model.p > 1 {
        &at_center.c_bar + &at_center.d_bar * k_gain
    } else {
        DMatrix::zeros(0, n_x)
    };
    model
        .blocks
        .iter()
        .map(|b| {
            let center = if b.step == model.p {
                a_cl.row(b.state_index).into_owned()
            } else {
                c_cl.row((b.step - 1) * n_x + b.state_index).into_owned()
            };
            let generators = (0..b.len)
                .map(|c| {
                    let r = model.theta.radius[b.offset + c];
                    let dir: RowDVector<f64> = if c < n_x {
                        RowDVector::from_fn(n_x, |_, j| if j == c { 1.0 } else { 0.0 })
                    } else {
                        k_gain.row(c - n_x).into_owned()
                    };
                    dir * r
                })
                .collect();
            RowFamily { state_index: b.state_index, step: b.step, center, generators }
        })
        .collect()
}

impl RowFamily {
    /// Row at a sign assignment of the box vertices.
    pub fn at_signs(&self, signs: &[f64]) -> RowDVector<f64> {
        let mut r = self.center.clone();
        for (g, s) in self.generators.iter().zip(signs) {
            r += g * *s;
        }
        r
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }
}

/// Candidate extreme points of the symmetric zonotope spanned by the given
/// generators (the row at all box vertices, symmetrized). Exact for n <= 3;
/// falls back to full sign enumeration for small generator counts.
fn zonotope_candidates(gens: &[RowDVector<f64>]) -> Vec<DVector<f64>> {
    fn push_pt(pts: &mut Vec<DVector<f64>>, p: DVector<f64>) {
        if !pts.iter().any(|q| (q - &p).amax() < 1e-13 || (q + &p).amax() < 1e-13) {
            pts.push(p);
        }
    }
    fn vertex_for(
        pts: &mut Vec<DVector<f64>>,
        gens: &[RowDVector<f64>],
        normal: &DVector<f64>,
        free: &[usize],
    ) {
        // sign(g'normal) for decided generators, both signs for the free ones
        let n = normal.len();
        let base: DVector<f64> = gens.iter().enumerate().fold(DVector::zeros(n), |acc, (m, g)| {
            if free.contains(&m) {
                acc
            } else {
                let s = g.transpose().dot(normal);
                if s >= 0.0 {
                    acc + g.transpose()
                } else {
                    acc - g.transpose()
                }
            }
        });
        for k in 0..(1usize << free.len()) {
            let mut v = base.clone();
            for (bit, &m) in free.iter().enumerate() {
                if (k >> bit) & 1 == 1 {
                    v += gens[m].transpose();
                } else {
                    v -= gens[m].transpose();
                }
            }
            push_pt(pts, v);
        }
    }

    let n = gens.first().map_or(0, |g| g.len());
    let d = gens.len();
    let mut pts: Vec<DVector<f64>> = Vec::new();
    match n {
        1 => {
            let v: f64 = gens.iter().map(|g| g[0].abs()).sum();
            push_pt(&mut pts, DVector::from_vec(vec![v]));
        }
        2 => {
            for m in 0..d {
                let normal = DVector::from_vec(vec![-gens[m][1], gens[m][0]]);
                if normal.amax() < 1e-14 {
                    continue;
                }
                vertex_for(&mut pts, gens, &normal, &[m]);
            }
        }
        3 => {
            for a in 0..d {
                for b in a + 1..d {
                    let ga = gens[a].transpose();
                    let gb = gens[b].transpose();
                    let normal = DVector::from_vec(vec![
                        ga[1] * gb[2] - ga[2] * gb[1],
                        ga[2] * gb[0] - ga[0] * gb[2],
                        ga[0] * gb[1] - ga[1] * gb[0],
                    ]);
                    if normal.amax() < 1e-14 {
                        continue;
                    }
                    vertex_for(&mut pts, gens, &normal, &[a, b]);
                }
            }
        }
        _ => {}
    }
    if pts.is_empty() && d <= 16 {
        for signs in crate::geometry::sign_vectors(d) {
            let mut v = DVector::zeros(n);
            for (m, g) in gens.iter().enumerate() {
                v += g.transpose() * signs[m];
            }
            push_pt(&mut pts, v);
        }
    }
    pts
}

/// Smallest-practical PSD matrix `S` with `S >= y y'` for every vertex `y`
/// of the row family.
///
/// The vertex set spans only `span(center, generators)`; the minimum-volume
/// centered ellipsoid is computed in that subspace (where it is full rank)
/// and rescaled against the enumerated vertices, so rank-deficient families
/// (tiny boxes, single points) stay tight.
pub fn dominating_matrix(family: &RowFamily) -> DMatrix<f64> {
    let n = family.dim();
    let mut gens: Vec<RowDVector<f64>> = vec![family.center.clone()];
    gens.extend(family.generators.iter().cloned());
    let gens: Vec<RowDVector<f64>> = gens.into_iter().filter(|g| g.amax() > 0.0).collect();
    if gens.is_empty() {
        return DMatrix::zeros(n, n);
    }
    // orthonormal basis of the generator span
    let mut gen_gram: DMatrix<f64> = DMatrix::zeros(n, n);
    for g in &gens {
        gen_gram += g.transpose() * g;
    }
    let eig = gen_gram.symmetric_eigen();
    let max_e = eig.eigenvalues.max();
    let mut basis_cols: Vec<DVector<f64>> = Vec::new();
    for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 1e-26 * max_e {
            basis_cols.push(eig.eigenvectors.column(idx).into_owned());
        }
    }
    let r = basis_cols.len();
    if r == 0 {
        return DMatrix::zeros(n, n);
    }
    let mut basis = DMatrix::zeros(n, r);
    for (c, col) in basis_cols.iter().enumerate() {
        basis.column_mut(c).copy_from(col);
    }
    let project = |y: &DVector<f64>| -> DVector<f64> { basis.transpose() * y };

    let pts: Vec<DVector<f64>> = zonotope_candidates(&gens).iter().map(|y| project(y)).collect();
    let scale = pts.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if scale < 1e-150 {
        return DMatrix::zeros(n, n);
    }
    // Khachiyan iteration in the r-dimensional span.
    let m = pts.len();
    let mut u = vec![1.0 / m as f64; m];
    let mut s_r: DMatrix<f64> = DMatrix::identity(r, r) * (scale * scale);
    for _ in 0..300 {
        let mut lam: DMatrix<f64> = DMatrix::zeros(r, r);
        for (k, y) in pts.iter().enumerate() {
            lam += y * y.transpose() * u[k];
        }
        let lam_inv = match lam.clone().try_inverse() {
            Some(inv) => inv,
            None => break,
        };
        let scores: Vec<f64> = pts.iter().map(|y| (y.transpose() * &lam_inv * y)[0]).collect();
        let (kmax, &wmax) = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        s_r = lam * wmax;
        if wmax <= r as f64 * (1.0 + 1e-9) {
            break;
        }
        let beta = (wmax - r as f64) / (r as f64 * (wmax - 1.0));
        for w in u.iter_mut() {
            *w *= 1.0 - beta;
        }
        u[kmax] += beta;
    }
    s_r = (&s_r + s_r.transpose()) * 0.5;
    // Rescale against the enumerated vertices (full set when small enough).
    let d = family.generators.len();
    let reg = DMatrix::identity(r, r) * (1e-14 * scale * scale);
    let chol = match nalgebra::Cholesky::new(&s_r + &reg) {
        Some(c) => c,
        None => {
            let mut fallback: DMatrix<f64> = DMatrix::zeros(r, r);
            for y in &pts {
                fallback += y * y.transpose();
            }
            s_r = fallback;
            nalgebra::Cholesky::new(&s_r + &reg).expect("gram plus jitter is PD")
        }
    };
    let mut worst: f64 = 0.0;
    if d <= 16 {
        for signs in crate::geometry::sign_vectors(d) {
            let y = project(&family.at_signs(&signs).transpose());
            worst = worst.max(y.dot(&chol.solve(&y)));
        }
    } else {
        for y in &pts {
            worst = worst.max(y.dot(&chol.solve(y)));
        }
    }
    let s_r = (&s_r + &reg) * (worst.max(1e-12) * (1.0 + 1e-9));
    &basis * s_r * basis.transpose() + DMatrix::identity(n, n) * (1e-14 * scale * scale)
}

/// Infinite-horizon gain on the nominal lifted system with the intermediate
/// predictions folded into the stage cost (Riccati iteration with cross
/// terms). Returns `K` such that `U = K X` is the unconstrained optimum.
pub fn nominal_lqr_gain(model: &MultiStepModel, weights: &DesignWeights) -> Result<DMatrix<f64>> {
    let nom = model.nominal();
    let p = model.p;
    let q_p = weights.qp_block(p);
    let r_p = weights.rp_block(p);
    let q_t = weights.q_mat() + nom.c_bar.transpose() * &q_p * &nom.c_bar;
    let cross = nom.c_bar.transpose() * &q_p * &nom.d_bar;
    let r_t = &r_p + nom.d_bar.transpose() * &q_p * &nom.d_bar;
    let a = &nom.a_bar;
    let b = &nom.b_bar;
    let mut p_mat = q_t.clone();
    for _ in 0..100_000 {
        let gram = &r_t + b.transpose() * &p_mat * b;
        let gram_inv = gram
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SolverFailure("Riccati gram singular".into()))?;
        let lin = b.transpose() * &p_mat * a + cross.transpose();
        let next = &q_t + a.transpose() * &p_mat * a - lin.transpose() * &gram_inv * &lin;
        let next = (&next + next.transpose()) * 0.5;
        let diff = (&next - &p_mat).amax();
        p_mat = next;
        if diff <= 1e-13 * (1.0 + p_mat.amax()) {
            let gram = &r_t + b.transpose() * &p_mat * b;
            let gram_inv = gram
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::SolverFailure("Riccati gram singular".into()))?;
            let k = -(&gram_inv * (b.transpose() * &p_mat * a + cross.transpose()));
            return Ok(k);
        }
    }
    Err(Error::SolverFailure("Riccati iteration did not converge".into()))
}

/// Synthesize `(K, P)` with diagonal `P` valid over the whole parameter box.
///
/// The gain comes from the nominal infinite-horizon design; if no diagonal
/// `P` exists for that closed loop (companion-form lifts are often too
/// non-normal for a diagonal Lyapunov function), the gain is recomputed with
/// progressively cheaper input cost, which drives the closed loop toward
/// deadbeat and re-enables the diagonal decomposition. The cost matrices in
/// the condition itself are always the caller's. Reports the worst per-row
/// block on infeasibility. The returned pair is only contractual through
/// [`verify_terminal_cost`].
pub fn synthesize_kp(
    model: &MultiStepModel,
    weights: &DesignWeights,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut last_err = None;
    for r_scale in [1.0, 1e-2, 1e-4, 1e-6] {
        let gain_weights = DesignWeights {
            q_diag: weights.q_diag.clone(),
            r_mat: &weights.r_mat * r_scale,
        };
        let k_gain = nominal_lqr_gain(model, &gain_weights)?;
        match diagonal_p_for_gain(model, weights, &k_gain) {
            Ok(p_mat) => return Ok((k_gain, p_mat)),
            Err(e @ Error::Infeasible(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::SolverFailure("gain search exhausted".into())))
}

/// Diagonal `P` for a fixed gain via cutting planes on the decomposed
/// condition `diag(p) >= sum_i p_i S_i + Q + sum q_i S_ij + K'R_p K`.
pub fn diagonal_p_for_gain(
    model: &MultiStepModel,
    weights: &DesignWeights,
    k_gain: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n_x = model.n_x;
    if weights.q_diag.len() != n_x || weights.r_mat.nrows() != model.n_u {
        return Err(Error::DimensionMismatch("weights vs model".into()));
    }
    let families = closed_loop_rows(model, k_gain);
    let mut s_a: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n_x, n_x); n_x];
    let mut g_bar = weights.q_mat()
        + k_gain.transpose() * weights.rp_block(model.p) * k_gain;
    for fam in &families {
        let s = dominating_matrix(fam);
        if fam.step == model.p {
            s_a[fam.state_index] = s;
        } else {
            g_bar += s * weights.q_diag[fam.state_index];
        }
    }
    g_bar = (&g_bar + g_bar.transpose()) * 0.5;

    // Cutting planes on  diag(p) >= sum_i p_i S_i + G  (linear in p).
    let delta = 1e-9 * (1.0 + g_bar.amax());
    let mut cuts: Vec<(DVector<f64>, f64)> = Vec::new(); // (coefficients, rhs)
    let eval = |p: &DVector<f64>| -> (f64, DVector<f64>) {
        let mut m = g_bar.clone();
        for i in 0..n_x {
            m += &s_a[i] * p[i];
            m[(i, i)] -= p[i];
        }
        let eig = m.symmetric_eigen();
        let (idx, lam) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, &l)| (i, l))
            .unwrap();
        (lam, eig.eigenvectors.column(idx).into_owned())
    };
    let mut p_try = weights.q_diag.clone() * 2.0;
    for iter in 0..500 {
        let (lam, u) = eval(&p_try);
        if lam <= 1e-10 && iter > 0 {
            return Ok(DMatrix::from_diagonal(&p_try));
        }
        let coef = DVector::from_fn(n_x, |i, _| (u.transpose() * &s_a[i] * &u)[0] - u[i] * u[i]);
        let rhs = -(u.transpose() * &g_bar * &u)[0] - delta;
        cuts.push((coef, rhs));
        let mut lp = ConicProblem::lp(n_x);
        lp.lin = vec![1.0; n_x];
        for (c, r) in &cuts {
            let row: Vec<(usize, f64)> = c.iter().cloned().enumerate().collect();
            lp.ineq.push_row(&row, *r);
        }
        for i in 0..n_x {
            lp.ineq.push_row(&[(i, -1.0)], -1e-9); // p_i >= 1e-9
        }
        let sol = lp.solve()?;
        match sol.status {
            SolveStatus::Optimal => {
                p_try = DVector::from_iterator(n_x, sol.x.iter().cloned());
            }
            SolveStatus::Infeasible => {
                // report the row block that dominates the violated direction
                let worst = families
                    .iter()
                    .map(|f| {
                        let s = dominating_matrix(f);
                        ((u.transpose() * &s * &u)[0], (f.state_index, f.step))
                    })
                    .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                    .map(|(_, b)| b)
                    .unwrap_or((0, 0));
                return Err(Error::Infeasible(format!(
                    "no diagonal P exists for the given parameter box at iteration {iter}; \
                     worst row block (state {}, step {})",
                    worst.0, worst.1
                )));
            }
            _ => return Err(Error::SolverFailure("P cutting-plane LP failed".into())),
        }
    }
    Err(Error::SolverFailure("P cutting-plane pass did not converge".into()))
}

/// Margin report of the terminal-cost inequality over the parameter box.
#[derive(Debug, Clone)]
pub struct MarginReport {
    /// Margin of the decomposed certificate (per-row dominance plus the
    /// assembled matrix inequality); `None` when `P` is not diagonal and the
    /// box is not a singleton.
    pub decomposed_margin: Option<f64>,
    /// Smallest per-block dominance margin across the enumerated row
    /// vertex sets.
    pub per_block_margin: f64,
    pub worst_block: (usize, usize),
    /// Smallest margin of `P - lhs(theta)` over sampled parameters.
    pub sampled_margin: f64,
    pub min_margin: f64,
}

/// Evaluate `min-eig(P - lhs(theta))` certificates: per-row vertex blocks of
/// the decomposition plus uniform samples from the box.
pub fn verify_terminal_cost(
    model: &MultiStepModel,
    k_gain: &DMatrix<f64>,
    p_mat: &DMatrix<f64>,
    weights: &DesignWeights,
    n_samples: usize,
    seed: u64,
) -> MarginReport {
    let n_x = model.n_x;
    let families = closed_loop_rows(model, k_gain);
    let is_diag = {
        let mut d = true;
        for r in 0..n_x {
            for c in 0..n_x {
                if r != c && p_mat[(r, c)].abs() > 1e-14 {
                    d = false;
                }
            }
        }
        d
    };

    // Per-block dominance margins over full vertex enumeration.
    let mut per_block = f64::INFINITY;
    let mut worst_block = (0usize, 0usize);
    let mut s_a: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n_x, n_x); n_x];
    let mut s_c_sum = DMatrix::zeros(n_x, n_x);
    for fam in &families {
        let s = dominating_matrix(fam);
        let weight = if fam.step == model.p {
            if is_diag {
                p_mat[(fam.state_index, fam.state_index)]
            } else {
                1.0
            }
        } else {
            weights.q_diag[fam.state_index]
        };
        let d = fam.generators.len();
        if d <= 16 {
            for signs in crate::geometry::sign_vectors(d) {
                let row = fam.at_signs(&signs);
                let gap = (&s - row.transpose() * &row) * weight;
                let eig = gap.symmetric_eigenvalues();
                let margin = eig.min();
                if margin < per_block {
                    per_block = margin;
                    worst_block = (fam.state_index, fam.step);
                }
            }
        }
        if fam.step == model.p {
            s_a[fam.state_index] = s;
        } else {
            s_c_sum += s * weights.q_diag[fam.state_index];
        }
    }

    // Assembled decomposed certificate (diagonal P only).
    let decomposed_margin = if is_diag {
        let mut m = weights.q_mat()
            + k_gain.transpose() * weights.rp_block(model.p) * k_gain
            + &s_c_sum;
        for i in 0..n_x {
            m += &s_a[i] * p_mat[(i, i)];
        }
        let gap = p_mat - m;
        Some(((&gap + gap.transpose()) * 0.5).symmetric_eigenvalues().min())
    } else if model.theta.radius.amax() == 0.0 {
        let lhs = exact_lhs(model, &model.theta.center, k_gain, p_mat, weights);
        let gap = p_mat - lhs;
        Some(((&gap + gap.transpose()) * 0.5).symmetric_eigenvalues().min())
    } else {
        None
    };

    // Sampled certificate.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut sampled = f64::INFINITY;
    for _ in 0..n_samples {
        let theta = model.theta.sample(&mut rng);
        let lhs = exact_lhs(model, &theta, k_gain, p_mat, weights);
        let gap = p_mat - lhs;
        let margin = ((&gap + gap.transpose()) * 0.5).symmetric_eigenvalues().min();
        sampled = sampled.min(margin);
    }
    if n_samples == 0 {
        sampled = f64::INFINITY;
    }

    let min_margin = per_block
        .min(sampled)
        .min(decomposed_margin.unwrap_or(f64::INFINITY));
    MarginReport { decomposed_margin, per_block_margin: per_block, worst_block, sampled_margin: sampled, min_margin }
}

fn exact_lhs(
    model: &MultiStepModel,
    theta: &DVector<f64>,
    k_gain: &DMatrix<f64>,
    p_mat: &DMatrix<f64>,
    weights: &DesignWeights,
) -> DMatrix<f64> {
    let m = model.evaluate(theta);
    let a_cl = &m.a_bar + &m.b_bar * k_gain;
    let r_p = weights.rp_block(model.p);
    let mut lhs =
        weights.q_mat() + k_gain.transpose() * &r_p * k_gain + a_cl.transpose() * p_mat * &a_cl;
    if model.p > 1 {
        let q_p = weights.qp_block(model.p);
        let c_cl = &m.c_bar + &m.d_bar * k_gain;
        lhs += c_cl.transpose() * &q_p * &c_cl;
    }
    lhs
}

/// Report of the tube-shape construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeShapeReport {
    pub rho_nominal: f64,
    pub rho_robust_bound: f64,
    pub used_identity_fallback: bool,
}

/// Low-complexity tube shape from the (real-ified) eigenbasis of the nominal
/// closed loop, so that `|V Acl V^{-1}|_inf` is small. Row blocks are then
/// rescaled so the lumped disturbance has comparable support along every
/// face, which keeps a single terminal scaling meaningful. Falls back to the
/// identity shape when the eigenbasis is too ill-conditioned.
pub fn choose_tube_shape(
    model: &MultiStepModel,
    k_gain: &DMatrix<f64>,
) -> Result<(LowComplexityPolytope, TubeShapeReport)> {
    let nom = model.nominal();
    let a_cl = &nom.a_bar + &nom.b_bar * k_gain;
    let n = a_cl.nrows();
    let rho = crate::geometry::spectral_radius(&a_cl);
    if rho >= 1.0 {
        return Err(Error::UnstableNominal { rho });
    }
    let basis = real_eigenbasis(&a_cl);
    let (mut v_mat, blocks, fallback) = match basis {
        Some((t, blocks)) => {
            let svd = t.clone().svd(false, false);
            let cond = svd.singular_values.max() / svd.singular_values.min().max(1e-300);
            match (cond <= 1e8, t.clone().try_inverse()) {
                (true, Some(inv)) => (normalize_rows(&inv), blocks, false),
                _ => (DMatrix::identity(n, n), vec![1; n], true),
            }
        }
        None => (DMatrix::identity(n, n), vec![1; n], true),
    };
    // balance row blocks against the lumped disturbance support (scaling a
    // whole eigen-block leaves |V Acl V^{-1}|_inf unchanged)
    let support = |row: usize, v: &DMatrix<f64>| -> f64 {
        let r = v.row(row).transpose();
        model.wx.support(&r).abs()
    };
    let global_max = (0..n).map(|r| support(r, &v_mat)).fold(0.0, f64::max);
    if global_max > 0.0 {
        let mut r0 = 0;
        for &sz in &blocks {
            let blk_max = (r0..r0 + sz).map(|r| support(r, &v_mat)).fold(0.0, f64::max);
            let scale = if blk_max > 0.0 {
                (1.0 / blk_max).min(1e4 / global_max)
            } else {
                1.0 / global_max
            };
            for r in r0..r0 + sz {
                let scaled = v_mat.row(r) * scale;
                v_mat.row_mut(r).copy_from(&scaled);
            }
            r0 += sz;
        }
    }
    let x0 = LowComplexityPolytope::new(v_mat.clone())?;
    let lam = &v_mat * &a_cl * x0.shape_inv();
    let rho_nominal = crate::geometry::inf_norm(&lam);
    let rho_robust_bound = robust_contraction_bound(model, k_gain, &x0);
    Ok((x0, TubeShapeReport { rho_nominal, rho_robust_bound, used_identity_fallback: fallback }))
}

/// Upper bound on `max_theta |V A_cl(theta) V^{-1}|_inf` over the box.
pub fn robust_contraction_bound(
    model: &MultiStepModel,
    k_gain: &DMatrix<f64>,
    x0: &LowComplexityPolytope,
) -> f64 {
    let at_center = model.at_center();
    let a_cl = &at_center.a_bar + &at_center.b_bar * k_gain;
    let center_m = &x0.shape * a_cl * x0.shape_inv();
    let n = model.n_x;
    // per-entry absolute deviations: parameter m of an A-block perturbs row i
    // of A_cl by sel(c); in V-coordinates entry (r, c2) moves by
    // V[r,i] * (sel V^{-1})[c2] * radius.
    let mut dev: DMatrix<f64> = DMatrix::zeros(n, n);
    for b in &model.blocks {
        if b.step != model.p {
            continue;
        }
        for c in 0..b.len {
            let radius = model.theta.radius[b.offset + c];
            if radius == 0.0 {
                continue;
            }
            let sel: RowDVector<f64> = if c < n {
                RowDVector::from_fn(n, |_, j| if j == c { 1.0 } else { 0.0 })
            } else {
                k_gain.row(c - n).into_owned()
            };
            let img = sel * x0.shape_inv();
            for r in 0..n {
                for c2 in 0..n {
                    dev[(r, c2)] += (x0.shape[(r, b.state_index)] * img[c2]).abs() * radius;
                }
            }
        }
    }
    (0..n)
        .map(|r| {
            (0..n)
                .map(|c| center_m[(r, c)].abs() + dev[(r, c)])
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn normalize_rows(v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = v.clone();
    for r in 0..out.nrows() {
        let norm = out.row(r).norm();
        if norm > 0.0 {
            let scaled = out.row(r) / norm;
            out.row_mut(r).copy_from(&scaled);
        }
    }
    out
}

/// Real block eigenbasis columns of `a`: real eigenvectors for real
/// eigenvalues, (Re v, Im v) column pairs for complex pairs. Returns the
/// basis and the block sizes (1 or 2) in column order.
fn real_eigenbasis(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, Vec<usize>)> {
    let n = a.nrows();
    let eigs = a.complex_eigenvalues();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut blocks: Vec<usize> = Vec::new();
    let mut used = vec![false; n];
    for i in 0..n {
        if used[i] {
            continue;
        }
        let lam = eigs[i];
        if lam.im.abs() < 1e-10 {
            used[i] = true;
            let shifted = a - DMatrix::identity(n, n) * lam.re;
            let v = null_vector(&shifted)?;
            cols.push(v);
            blocks.push(1);
        } else {
            // find the conjugate partner
            let mut partner = None;
            for j in i + 1..n {
                if !used[j] && (eigs[j].re - lam.re).abs() < 1e-8 && (eigs[j].im + lam.im).abs() < 1e-8
                {
                    partner = Some(j);
                    break;
                }
            }
            let j = partner?;
            used[i] = true;
            used[j] = true;
            // [[A - aI, bI], [-bI, A - aI]] [vr; vi] = 0
            let (alpha, beta) = (lam.re, lam.im.abs());
            let mut big = DMatrix::zeros(2 * n, 2 * n);
            let shifted = a - DMatrix::identity(n, n) * alpha;
            big.view_mut((0, 0), (n, n)).copy_from(&shifted);
            big.view_mut((0, n), (n, n)).copy_from(&(DMatrix::identity(n, n) * beta));
            big.view_mut((n, 0), (n, n)).copy_from(&(DMatrix::identity(n, n) * (-beta)));
            big.view_mut((n, n), (n, n)).copy_from(&shifted);
            let v = null_vector(&big)?;
            let vr = v.rows(0, n).into_owned();
            let vi = v.rows(n, n).into_owned();
            if vr.amax() < 1e-12 && vi.amax() < 1e-12 {
                return None;
            }
            cols.push(vr);
            cols.push(vi);
            blocks.push(2);
        }
    }
    if cols.len() != n {
        return None;
    }
    let mut t = DMatrix::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        t.column_mut(c).copy_from(col);
    }
    Some((t, blocks))
}

fn null_vector(m: &DMatrix<f64>) -> Option<DVector<f64>> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t?;
    let last = v_t.nrows() - 1;
    Some(v_t.row(last).transpose())
}

/// Support tightenings for the stacked constraint sets.
///
/// `x_poly` and `u_poly` must be in normalized form `Fx <= 1`, `Gu <= 1`.
pub fn precompute_tightenings(
    x_poly: &HPolytope,
    u_poly: &HPolytope,
    x0: &LowComplexityPolytope,
    k_gain: &DMatrix<f64>,
    wx: &BoxSet,
    wy: &BoxSet,
    p: usize,
) -> Result<Tightenings> {
    let n_x = x0.dim();
    let c_x = x_poly.n_rows();
    let c_u = u_poly.n_rows();
    if x_poly.dim() != n_x || k_gain.nrows() != u_poly.dim() * p || k_gain.ncols() != n_x {
        return Err(Error::DimensionMismatch("tightening dimensions".into()));
    }
    let f_bar = DVector::from_fn(c_x, |i, _| x0.support(&x_poly.h_mat.row(i).transpose()));
    // rows of G_p K: block b row r -> G row r applied to input block b
    let n_u = u_poly.dim();
    let mut g_bar = DVector::zeros(c_u * p);
    for b in 0..p {
        for r in 0..c_u {
            let mut row = DVector::zeros(n_x);
            for cu in 0..n_u {
                row += k_gain.row(b * n_u + cu).transpose() * u_poly.h_mat[(r, cu)];
            }
            g_bar[b * c_u + r] = x0.support(&row);
        }
    }
    let h_x = x0.to_hpolytope();
    let wx_bar = DVector::from_fn(h_x.n_rows(), |i, _| wx.support(&h_x.h_mat.row(i).transpose()));
    let mut wy_bar = DVector::zeros(c_x * (p - 1));
    for b in 0..p - 1 {
        for r in 0..c_x {
            let mut d = DVector::zeros(wy.dim());
            for c in 0..n_x {
                d[b * n_x + c] = x_poly.h_mat[(r, c)];
            }
            wy_bar[b * c_x + r] = wy.support(&d);
        }
    }
    Ok(Tightenings { f_bar, g_bar, wx_bar, wy_bar })
}

/// Largest `eta > 0` such that `X_f = eta X0` is robustly invariant and
/// constraint admissible (bisection-polished closed form).
pub fn terminal_set_eta(
    model: &MultiStepModel,
    k_gain: &DMatrix<f64>,
    x0: &LowComplexityPolytope,
    tight: &Tightenings,
    x_poly: &HPolytope,
) -> Result<f64> {
    let n_x = model.n_x;
    let p = model.p;
    let at_center = model.at_center();
    let a_cl_c = &at_center.a_bar + &at_center.b_bar * k_gain;
    let c_cl_c = if p > 1 {
        &at_center.c_bar + &at_center.d_bar * k_gain
    } else {
        DMatrix::zeros(0, n_x)
    };
    let h_x = x0.to_hpolytope();
    let verts = x0.vertices();
    let c_x = x_poly.n_rows();

    // robust row values max_{v, theta} h' M_cl(theta) x^v for each h row,
    // exploiting that parameter m perturbs exactly one predictor row.
    let row_value = |h_row: &RowDVector<f64>, output_block: Option<usize>| -> f64 {
        let mut best = f64::NEG_INFINITY;
        for xv in verts {
            let u_v = k_gain * xv;
            let base = match output_block {
                None => (h_row * &a_cl_c * xv)[0],
                Some(jb) => {
                    let rows = c_cl_c.rows(jb * n_x, n_x);
                    (h_row * rows * xv)[0]
                }
            };
            let mut spread = 0.0;
            for b in &model.blocks {
                let matches = match output_block {
                    None => b.step == p,
                    Some(jb) => b.step == jb + 1,
                };
                if !matches {
                    continue;
                }
                let h_i = h_row[b.state_index];
                if h_i == 0.0 {
                    continue;
                }
                for c in 0..b.len {
                    let xi = if c < n_x { xv[c] } else { u_v[c - n_x] };
                    spread += (h_i * xi).abs() * model.theta.radius[b.offset + c];
                }
            }
            best = best.max(base + spread);
        }
        best
    };

    let mut eta_lb: f64 = 0.0;
    let mut eta_ub = f64::INFINITY;
    // (i) invariance rows: eta * a_r + wx_r <= eta
    for r in 0..h_x.n_rows() {
        let a_r = row_value(&h_x.h_mat.row(r).into_owned(), None);
        let w_r = tight.wx_bar[r];
        if a_r < 1.0 {
            eta_lb = eta_lb.max(w_r / (1.0 - a_r));
        } else if w_r > 1e-15 {
            return Err(Error::NoInvariantScaling(format!(
                "tube row {r} not contractive (value {a_r:.6}) under nonzero disturbance"
            )));
        }
    }
    // terminal set inside the state constraints: eta * f_bar <= 1
    for i in 0..tight.f_bar.len() {
        if tight.f_bar[i] > 0.0 {
            eta_ub = eta_ub.min(1.0 / tight.f_bar[i]);
        }
    }
    // (ii) input rows: eta * g_bar <= 1
    for i in 0..tight.g_bar.len() {
        if tight.g_bar[i] > 0.0 {
            eta_ub = eta_ub.min(1.0 / tight.g_bar[i]);
        }
    }
    // (iii) output rows: eta * c_r + wy_r <= 1
    for jb in 0..p.saturating_sub(1) {
        for r in 0..c_x {
            let c_r = row_value(&x_poly.h_mat.row(r).into_owned(), Some(jb));
            let w_r = tight.wy_bar[jb * c_x + r];
            if 1.0 - w_r < 0.0 {
                return Err(Error::NoInvariantScaling(format!(
                    "output disturbance exceeds constraint row {r} in block {jb}"
                )));
            }
            if c_r > 0.0 {
                eta_ub = eta_ub.min((1.0 - w_r) / c_r);
            }
        }
    }
    if !eta_ub.is_finite() {
        eta_ub = 1e6;
    }
    if eta_ub < eta_lb || eta_ub <= 0.0 {
        return Err(Error::NoInvariantScaling(format!(
            "required eta >= {eta_lb:.3e} exceeds admissible eta <= {eta_ub:.3e}"
        )));
    }
    // bisection polish against the direct predicate
    let feasible = |eta: f64| -> bool {
        if eta <= 0.0 {
            return false;
        }
        for r in 0..h_x.n_rows() {
            let a_r = row_value(&h_x.h_mat.row(r).into_owned(), None);
            if eta * a_r + tight.wx_bar[r] > eta * (1.0 + 1e-12) + 1e-12 {
                return false;
            }
        }
        for i in 0..tight.f_bar.len() {
            if eta * tight.f_bar[i] > 1.0 + 1e-12 {
                return false;
            }
        }
        for i in 0..tight.g_bar.len() {
            if eta * tight.g_bar[i] > 1.0 + 1e-12 {
                return false;
            }
        }
        for jb in 0..p.saturating_sub(1) {
            for r in 0..c_x {
                let c_r = row_value(&x_poly.h_mat.row(r).into_owned(), Some(jb));
                if eta * c_r + tight.wy_bar[jb * c_x + r] > 1.0 + 1e-12 {
                    return false;
                }
            }
        }
        true
    };
    if feasible(eta_ub) {
        return Ok(eta_ub);
    }
    let mut lo = eta_lb.max(1e-12);
    let mut hi = eta_ub;
    if !feasible(lo) {
        return Err(Error::NoInvariantScaling("no feasible terminal scaling found".into()));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= 1e-4 * hi {
            break;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{enumerate_vertices, BoxSet};
    use crate::identify::{assemble_multistep_model, identify_rows, DisturbanceBounds};
    use crate::model::{
        discretize_zoh, lift_exact, simulate, DisturbanceSource, GroundTruthModel,
        LiftedMatrices, MultiStepModel, ParamBlock,
    };
    use nalgebra::{dmatrix, dvector};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sec5_plant() -> GroundTruthModel {
        let (a, b) = discretize_zoh(&[1.0, 11.6, 32.0, 160.0], 160.0, 0.1).unwrap();
        GroundTruthModel::new(a, b, dmatrix![1.0; 0.1; 0.1], BoxSet::centered(dvector![0.01]), 0.1)
            .unwrap()
    }

    fn identified_model(p: usize, n_samples: usize, seed: u64) -> MultiStepModel {
        let gt = sec5_plant();
        let mut rng = StdRng::seed_from_u64(seed);
        let inputs: Vec<_> =
            (0..n_samples).map(|_| dvector![rng.random_range(-1.0..1.0)]).collect();
        // disturbance stream must be decorrelated from the input stream
        let traj = simulate(&gt, &DVector::zeros(3), &inputs, DisturbanceSource::Seeded(seed ^ 0xd15)).unwrap();
        let ds = crate::identify::Dataset::from_trajectory(&traj);
        let rows = identify_rows(&ds, p, 0.25).unwrap();
        let lift = lift_exact(&gt, p).unwrap();
        assemble_multistep_model(&rows, 3, 1, p, DisturbanceBounds::Exact {
            lift: &lift,
            w_step: &gt.w,
        })
        .unwrap()
    }

    /// Model with no parametric uncertainty built directly from the lift.
    fn singleton_model(gt: &GroundTruthModel, p: usize) -> MultiStepModel {
        let lift = lift_exact(gt, p).unwrap();
        let n_x = gt.n_x();
        let n_u = gt.n_u();
        let mut blocks = Vec::new();
        let mut offset = 0;
        for step in 1..=p {
            for i in 0..n_x {
                let len = n_x + n_u * step;
                blocks.push(ParamBlock { state_index: i, step, offset, len });
                offset += len;
            }
        }
        let stack = |v: &DVector<f64>| DVector::from_fn(gt.n_w() * p, |i, _| v[i % gt.n_w()]);
        MultiStepModel {
            p,
            n_x,
            n_u,
            base: LiftedMatrices {
                a_bar: lift.a_bar.clone(),
                b_bar: lift.b_bar.clone(),
                c_bar: lift.c_bar.clone(),
                d_bar: lift.d_bar.clone(),
            },
            blocks,
            theta: BoxSet::centered(DVector::zeros(offset)),
            theta_hat: DVector::zeros(offset),
            wx: BoxSet::new(
                &lift.m_bar * stack(&gt.w.center),
                crate::geometry::abs_matrix(&lift.m_bar) * stack(&gt.w.radius),
            )
            .unwrap(),
            wy: BoxSet::new(
                &lift.n_bar * stack(&gt.w.center),
                crate::geometry::abs_matrix(&lift.n_bar) * stack(&gt.w.radius),
            )
            .unwrap(),
        }
    }

    #[test]
    fn dominating_matrix_covers_all_vertices() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..20 {
            let d = rng.random_range(1..10);
            let fam = RowFamily {
                state_index: 0,
                step: 1,
                center: RowDVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
                generators: (0..d)
                    .map(|_| RowDVector::from_fn(3, |_, _| rng.random_range(-0.2..0.2)))
                    .collect(),
            };
            let s = dominating_matrix(&fam);
            for signs in crate::geometry::sign_vectors(d) {
                let y = fam.at_signs(&signs);
                let gap = &s - y.transpose() * &y;
                assert!(
                    gap.symmetric_eigenvalues().min() > -1e-9,
                    "dominance violated"
                );
            }
        }
    }

    #[test]
    fn deadbeat_zero_closed_loop_gives_p_equal_q() {
        // A_bar = 0, C_bar = 0: condition collapses to Q <= P.
        let n_x = 3;
        let mut blocks = Vec::new();
        let mut offset = 0;
        for i in 0..n_x {
            blocks.push(ParamBlock { state_index: i, step: 1, offset, len: n_x + 1 });
            offset += n_x + 1;
        }
        let model = MultiStepModel {
            p: 1,
            n_x,
            n_u: 1,
            base: LiftedMatrices {
                a_bar: DMatrix::zeros(3, 3),
                b_bar: DMatrix::zeros(3, 1),
                c_bar: DMatrix::zeros(0, 3),
                d_bar: DMatrix::zeros(0, 1),
            },
            blocks,
            theta: BoxSet::centered(DVector::zeros(offset)),
            theta_hat: DVector::zeros(offset),
            wx: BoxSet::centered(DVector::zeros(3)),
            wy: BoxSet::centered(DVector::zeros(0)),
        };
        let weights = DesignWeights::identity(3, 1);
        let (k, p) = synthesize_kp(&model, &weights).unwrap();
        assert!(k.amax() < 1e-12);
        for i in 0..3 {
            assert!(p[(i, i)] >= 1.0 - 1e-9 && p[(i, i)] <= 1.0 + 1e-6, "P ~ Q");
        }
    }

    #[test]
    fn singleton_p1_satisfies_lyapunov_inequality() {
        // draft 2-state system, no uncertainty, p = 1
        let a = dmatrix![1.7062, -0.8521; 1.0, 0.0];
        let b = dmatrix![1.0; 0.0];
        let gt = GroundTruthModel::new(a, b, dmatrix![1.0; 0.0], BoxSet::centered(dvector![0.0]), 0.1)
            .unwrap();
        let model = singleton_model(&gt, 1);
        let weights = DesignWeights::identity(2, 1);
        let (k, p) = synthesize_kp(&model, &weights).unwrap();
        let a_cl = &model.base.a_bar + &model.base.b_bar * &k;
        let lhs = a_cl.transpose() * &p * &a_cl + weights.q_mat() + k.transpose() * &weights.r_mat * &k;
        let gap = &p - lhs;
        assert!(gap.symmetric_eigenvalues().min() > -1e-8);
    }

    #[test]
    fn synthesized_design_verifies_on_identified_model() {
        let model = identified_model(4, 600, 21);
        let weights = DesignWeights::identity(3, 1);
        let (k, p) = synthesize_kp(&model, &weights).unwrap();
        let report = verify_terminal_cost(&model, &k, &p, &weights, 1000, 99);
        assert!(report.min_margin >= -1e-8, "margin {:?}", report);
    }

    #[test]
    fn verify_detects_halved_p() {
        let model = identified_model(4, 400, 22);
        let weights = DesignWeights::identity(3, 1);
        let (k, p) = synthesize_kp(&model, &weights).unwrap();
        let report = verify_terminal_cost(&model, &k, &(&p * 0.5), &weights, 200, 7);
        assert!(report.min_margin < 0.0, "halved P must violate: {report:?}");
    }

    #[test]
    fn verify_accepts_lyapunov_solution_on_singleton() {
        let gt = sec5_plant();
        let model = singleton_model(&gt, 2);
        let weights = DesignWeights::identity(3, 1);
        let k = nominal_lqr_gain(&model, &weights).unwrap();
        // dense Lyapunov fixed point via iteration
        let nom = model.nominal();
        let a_cl = &nom.a_bar + &nom.b_bar * &k;
        let c_cl = &nom.c_bar + &nom.d_bar * &k;
        let q_term = weights.q_mat()
            + c_cl.transpose() * weights.qp_block(2) * &c_cl
            + k.transpose() * weights.rp_block(2) * &k;
        let mut p = q_term.clone();
        for _ in 0..10_000 {
            let next = a_cl.transpose() * &p * &a_cl + &q_term;
            if (&next - &p).amax() < 1e-15 {
                break;
            }
            p = next;
        }
        let report = verify_terminal_cost(&model, &k, &p, &weights, 100, 3);
        assert!(report.min_margin >= -1e-10, "report {report:?}");
    }

    #[test]
    fn tube_shape_diagonal_case() {
        let mut model = identified_model(2, 300, 23);
        // overwrite with a diagonal closed loop: A = diag(0.5, 0.2, 0.1), B = 0
        model.base.a_bar = DMatrix::from_diagonal(&dvector![0.5, 0.2, 0.1]);
        model.base.b_bar = DMatrix::zeros(3, 2 * 1);
        model.theta = BoxSet::centered(DVector::zeros(model.n_p()));
        let k = DMatrix::zeros(2, 3);
        let (x0, report) = choose_tube_shape(&model, &k).unwrap();
        assert!(report.rho_nominal <= 0.5 + 1e-9);
        assert!(!report.used_identity_fallback);
        // V diagonal up to row scaling: off-diagonal mass ~ 0
        for r in 0..3 {
            for c in 0..3 {
                if r != c {
                    assert!(x0.shape[(r, c)].abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn tube_shape_rotation_dominant_case() {
        // eigenvalues ~ r e^{+-i pi/2}: block [0, r; -r, 0] has inf-norm r
        let mut model = identified_model(2, 300, 24);
        model.base.a_bar = dmatrix![0.0, 0.7, 0.0; -0.7, 0.0, 0.0; 0.0, 0.0, 0.3];
        model.base.b_bar = DMatrix::zeros(3, 2);
        model.theta = BoxSet::centered(DVector::zeros(model.n_p()));
        let k = DMatrix::zeros(2, 3);
        let (_, report) = choose_tube_shape(&model, &k).unwrap();
        assert!(
            report.rho_nominal <= 0.7 + 1e-6,
            "rho {} should be ~ spectral radius",
            report.rho_nominal
        );
    }

    #[test]
    fn tube_shape_rejects_unstable() {
        let mut model = identified_model(2, 300, 25);
        model.base.a_bar = DMatrix::identity(3, 3) * 1.1;
        model.base.b_bar = DMatrix::zeros(3, 2);
        let k = DMatrix::zeros(2, 3);
        match choose_tube_shape(&model, &k) {
            Err(Error::UnstableNominal { .. }) => {}
            other => panic!("expected UnstableNominal, got {:?}", other.map(|_| ())),
        }
    }

    fn box_constraints(n: usize, half_width: f64) -> HPolytope {
        let mut h = DMatrix::zeros(2 * n, n);
        for i in 0..n {
            h[(i, i)] = 1.0 / half_width;
            h[(n + i, i)] = -1.0 / half_width;
        }
        HPolytope::new(h, DVector::from_element(2 * n, 1.0)).unwrap()
    }

    #[test]
    fn tightenings_unit_cube_and_zero_gain() {
        let x0 = LowComplexityPolytope::new(DMatrix::identity(3, 3)).unwrap();
        let x_poly = HPolytope::new(DMatrix::identity(3, 3), DVector::from_element(3, 1.0)).unwrap();
        let u_poly = box_constraints(1, 1.0);
        let k = DMatrix::zeros(2, 3); // p = 2, n_u = 1
        let wx = BoxSet::centered(DVector::zeros(3));
        let wy = BoxSet::centered(DVector::zeros(3));
        let t = precompute_tightenings(&x_poly, &u_poly, &x0, &k, &wx, &wy, 2).unwrap();
        for i in 0..3 {
            assert!((t.f_bar[i] - 1.0).abs() < 1e-12);
        }
        assert!(t.g_bar.amax() < 1e-14);
    }

    #[test]
    fn tightenings_match_vertex_oracle_on_sec5_sets() {
        let model = identified_model(3, 500, 26);
        let weights = DesignWeights::identity(3, 1);
        let k = nominal_lqr_gain(&model, &weights).unwrap();
        let (x0, _) = choose_tube_shape(&model, &k).unwrap();
        // X = [-10,10]^3 with x3 >= -1 (normalized rows), U = [-10,10]
        let mut h = DMatrix::zeros(6, 3);
        for i in 0..3 {
            h[(i, i)] = 0.1;
        }
        h[(3, 0)] = -0.1;
        h[(4, 1)] = -0.1;
        h[(5, 2)] = -1.0;
        let x_poly = HPolytope::new(h, DVector::from_element(6, 1.0)).unwrap();
        let u_poly = box_constraints(1, 10.0);
        let t = precompute_tightenings(
            &x_poly,
            &u_poly,
            &x0,
            &k,
            &model.wx,
            &model.wy,
            model.p,
        )
        .unwrap();
        // oracle: maximize each row over the enumerated vertices of X0
        let x0_h = x0.to_hpolytope();
        let verts = enumerate_vertices(&x0_h, 1e-9);
        assert_eq!(verts.len(), 8);
        for i in 0..x_poly.n_rows() {
            let brute = verts
                .iter()
                .map(|v| (x_poly.h_mat.row(i) * v)[0])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((t.f_bar[i] - brute).abs() < 1e-8);
        }
        for r in 0..t.g_bar.len() {
            let mut row = DVector::zeros(3);
            let (b, rr) = (r / u_poly.n_rows(), r % u_poly.n_rows());
            for cu in 0..1 {
                row += k.row(b * 1 + cu).transpose() * u_poly.h_mat[(rr, cu)];
            }
            let brute = verts.iter().map(|v| row.dot(v)).fold(f64::NEG_INFINITY, f64::max);
            assert!((t.g_bar[r] - brute).abs() < 1e-8);
        }
    }

    #[test]
    fn eta_constraint_only_case() {
        // A_cl = 0, no disturbance: eta = min over rows of 1/(row support)
        let gt = sec5_plant();
        let mut model = singleton_model(&gt, 2);
        model.base.a_bar = DMatrix::zeros(3, 3);
        model.base.b_bar = DMatrix::zeros(3, 2);
        model.base.c_bar = DMatrix::zeros(6, 3);
        model.base.d_bar = DMatrix::zeros(6, 2);
        model.wx = BoxSet::centered(DVector::zeros(3));
        model.wy = BoxSet::centered(DVector::zeros(6));
        let k = DMatrix::zeros(2, 3);
        let x0 = LowComplexityPolytope::new(DMatrix::identity(3, 3)).unwrap();
        let x_poly = box_constraints(3, 2.0);
        let u_poly = box_constraints(1, 1.0);
        let t = precompute_tightenings(&x_poly, &u_poly, &x0, &k, &model.wx, &model.wy, 2).unwrap();
        let eta = terminal_set_eta(&model, &k, &x0, &t, &x_poly).unwrap();
        // f_bar rows: support of e_i/2 over unit cube = 0.5 -> eta = 2
        assert!((eta - 2.0).abs() < 1e-6, "eta = {eta}");
    }

    #[test]
    fn eta_infeasible_when_disturbance_dominates() {
        let gt = sec5_plant();
        let mut model = singleton_model(&gt, 2);
        model.wx = BoxSet::centered(dvector![10.0, 10.0, 10.0]);
        let weights = DesignWeights::identity(3, 1);
        let (k, _) = synthesize_kp(&model, &weights).unwrap();
        let (x0, _) = choose_tube_shape(&model, &k).unwrap();
        let x_poly = box_constraints(3, 10.0);
        let u_poly = box_constraints(1, 10.0);
        let t =
            precompute_tightenings(&x_poly, &u_poly, &x0, &k, &model.wx, &model.wy, 2).unwrap();
        match terminal_set_eta(&model, &k, &x0, &t, &x_poly) {
            Err(Error::NoInvariantScaling(_)) => {}
            other => panic!("expected NoInvariantScaling, got {other:?}"),
        }
    }

    #[test]
    fn eta_invariance_monte_carlo_certificate() {
        let model = identified_model(4, 600, 27);
        let weights = DesignWeights::identity(3, 1);
        let (k, _) = synthesize_kp(&model, &weights).unwrap();
        let (x0, _) = choose_tube_shape(&model, &k).unwrap();
        let x_poly = box_constraints(3, 10.0);
        let u_poly = box_constraints(1, 10.0);
        let t = precompute_tightenings(
            &x_poly, &u_poly, &x0, &k, &model.wx, &model.wy, model.p,
        )
        .unwrap();
        let eta = terminal_set_eta(&model, &k, &x0, &t, &x_poly).unwrap();
        assert!(eta > 0.0);
        let mut rng = StdRng::seed_from_u64(31);
        let h_x = x0.to_hpolytope();
        let g_p = {
            // blockdiag of U rows times K, evaluated directly
            |x: &DVector<f64>| -> bool {
                let u = &k * x;
                u.amax() <= 10.0 + 1e-8
            }
        };
        for _ in 0..1000 {
            // theta at a random box vertex, x at a random vertex of eta X0
            let theta = DVector::from_fn(model.n_p(), |m, _| {
                let s: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                model.theta.center[m] + s * model.theta.radius[m]
            });
            let xv = &x0.vertices()[rng.random_range(0..x0.vertices().len())] * eta;
            let w = DVector::from_fn(3, |i, _| {
                let s: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                model.wx.center[i] + s * model.wx.radius[i]
            });
            let mats = model.evaluate(&theta);
            let a_cl = &mats.a_bar + &mats.b_bar * &k;
            let next = &a_cl * &xv + &w;
            // membership in eta X0 via H_x rows
            let hv = &h_x.h_mat * &next;
            assert!(hv.max() <= eta + 1e-8, "invariance violated: {} > {eta}", hv.max());
            assert!(g_p(&xv), "input constraint violated");
            if model.p > 1 {
                let c_cl = &mats.c_bar + &mats.d_bar * &k;
                let wy = model.wy.sample(&mut rng);
                let y = &c_cl * &xv + &wy;
                assert!(y.amax() <= 10.0 + 1e-8, "output constraint violated");
            }
        }
    }

    #[test]
    fn eta_monotone_in_disturbance() {
        let model = identified_model(4, 600, 28);
        let weights = DesignWeights::identity(3, 1);
        let (k, _) = synthesize_kp(&model, &weights).unwrap();
        let (x0, _) = choose_tube_shape(&model, &k).unwrap();
        let x_poly = box_constraints(3, 10.0);
        let u_poly = box_constraints(1, 10.0);
        let t_full = precompute_tightenings(
            &x_poly, &u_poly, &x0, &k, &model.wx, &model.wy, model.p,
        )
        .unwrap();
        let eta_full = terminal_set_eta(&model, &k, &x0, &t_full, &x_poly).unwrap();
        let mut smaller = model.clone();
        smaller.wx = BoxSet::new(model.wx.center.clone(), &model.wx.radius * 0.5).unwrap();
        let t_half = precompute_tightenings(
            &x_poly, &u_poly, &x0, &k, &smaller.wx, &smaller.wy, model.p,
        )
        .unwrap();
        let eta_half = terminal_set_eta(&smaller, &k, &x0, &t_half, &x_poly).unwrap();
        assert!(eta_half >= eta_full - 1e-9, "eta must not shrink when Wx shrinks");
    }

    #[test]
    fn tightening_consistency_sampled() {
        let model = identified_model(3, 400, 29);
        let weights = DesignWeights::identity(3, 1);
        let k = nominal_lqr_gain(&model, &weights).unwrap();
        let (x0, _) = choose_tube_shape(&model, &k).unwrap();
        let x_poly = box_constraints(3, 10.0);
        let u_poly = box_constraints(1, 10.0);
        let t = precompute_tightenings(
            &x_poly, &u_poly, &x0, &k, &model.wx, &model.wy, model.p,
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(33);
        for _ in 0..200 {
            let x = x0.sample(&mut rng);
            let z = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let alpha: f64 = rng.random_range(0.0..2.0);
            let lhs = x_poly.h_mat.clone() * (&z + &x * alpha);
            let rhs = x_poly.h_mat.clone() * &z + &t.f_bar * alpha;
            for i in 0..lhs.len() {
                assert!(lhs[i] <= rhs[i] + 1e-9);
            }
        }
    }
}
