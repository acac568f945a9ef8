//! Polytope and box primitives.
//!
//! Three set representations are enough for the whole pipeline:
//! general H-polytopes `{x : Hx <= h}`, axis-aligned boxes, and
//! low-complexity polytopes `{x : |Vx|_inf <= 1}` with cached vertices.
//! Support values over boxes and low-complexity shapes are closed form;
//! general polytopes go through a small LP.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solve;

/// `{x : Hx <= h}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HPolytope {
    pub h_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
}

impl HPolytope {
    pub fn new(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self> {
        if h_mat.nrows() != h_vec.len() || h_mat.nrows() == 0 || h_mat.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "H is {}x{}, h has {} entries",
                h_mat.nrows(),
                h_mat.ncols(),
                h_vec.len()
            )));
        }
        for r in 0..h_mat.nrows() {
            if h_mat.row(r).amax() == 0.0 {
                return Err(Error::DimensionMismatch(format!("row {r} of H is all-zero")));
            }
        }
        Ok(HPolytope { h_mat, h_vec })
    }

    pub fn dim(&self) -> usize {
        self.h_mat.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.h_mat.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let r = &self.h_mat * x - &self.h_vec;
        r.iter().all(|&v| v <= tol)
    }

    /// max_{x in P} d'x via LP (absolute tolerance 1e-9).
    pub fn support(&self, d: &DVector<f64>) -> Result<f64> {
        solve::support_lp(&self.h_mat, &self.h_vec, d)
    }
}

/// `{x : |x - center| <= radius elementwise}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxSet {
    pub center: DVector<f64>,
    pub radius: DVector<f64>,
}

impl BoxSet {
    pub fn new(center: DVector<f64>, radius: DVector<f64>) -> Result<Self> {
        if center.len() != radius.len() {
            return Err(Error::DimensionMismatch("box center/radius length".into()));
        }
        if radius.iter().any(|&r| r < 0.0) {
            return Err(Error::DimensionMismatch("box radius must be nonnegative".into()));
        }
        Ok(BoxSet { center, radius })
    }

    pub fn centered(radius: DVector<f64>) -> Self {
        let n = radius.len();
        BoxSet { center: DVector::zeros(n), radius }
    }

    pub fn point(center: DVector<f64>) -> Self {
        let n = center.len();
        BoxSet { center, radius: DVector::zeros(n) }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Closed-form support value `d'c + |d|'r`.
    pub fn support(&self, d: &DVector<f64>) -> f64 {
        d.dot(&self.center) + d.iter().zip(self.radius.iter()).map(|(a, b)| a.abs() * b).sum::<f64>()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.iter()
            .zip(self.center.iter())
            .zip(self.radius.iter())
            .all(|((&xi, &ci), &ri)| (xi - ci).abs() <= ri + tol)
    }

    /// Exact conversion to an H-polytope with 2n rows `[I; -I]`.
    pub fn to_hpolytope(&self) -> HPolytope {
        let n = self.dim();
        let mut h = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            h[(i, i)] = 1.0;
            b[i] = self.center[i] + self.radius[i];
            h[(n + i, i)] = -1.0;
            b[n + i] = self.radius[i] - self.center[i];
        }
        HPolytope { h_mat: h, h_vec: b }
    }

    /// All 2^n corner points (lexicographic sign order, -1 before +1).
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let n = self.dim();
        sign_vectors(n)
            .map(|s| {
                DVector::from_fn(n, |i, _| self.center[i] + s[i] * self.radius[i])
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            if self.radius[i] == 0.0 {
                self.center[i]
            } else {
                self.center[i] + rng.random_range(-self.radius[i]..=self.radius[i])
            }
        })
    }
}

/// Deterministic lexicographic sign-vector iterator over {-1,+1}^n.
pub fn sign_vectors(n: usize) -> impl Iterator<Item = Vec<f64>> {
    (0..(1usize << n)).map(move |k| {
        (0..n)
            .map(|i| if (k >> (n - 1 - i)) & 1 == 1 { 1.0 } else { -1.0 })
            .collect()
    })
}

/// `{x : |Vx|_inf <= 1}` with invertible `V` and cached vertex list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowComplexityPolytope {
    pub shape: DMatrix<f64>,
    shape_inv: DMatrix<f64>,
    vertices: Vec<DVector<f64>>,
    pub condition_number: f64,
}

impl LowComplexityPolytope {
    pub fn new(shape: DMatrix<f64>) -> Result<Self> {
        let n = shape.nrows();
        if n == 0 || shape.ncols() != n {
            return Err(Error::DimensionMismatch("shape matrix must be square".into()));
        }
        let svd = shape.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !cond.is_finite() || cond > 1e12 {
            return Err(Error::SingularShape { cond });
        }
        let shape_inv = shape
            .clone()
            .try_inverse()
            .ok_or(Error::SingularShape { cond })?;
        let vertices = low_complexity_vertices_from_inv(&shape_inv);
        Ok(LowComplexityPolytope { shape, shape_inv, vertices, condition_number: cond })
    }

    pub fn dim(&self) -> usize {
        self.shape.nrows()
    }

    /// Cached `2^n` vertices `V^{-1} s` in lexicographic sign order.
    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    pub fn shape_inv(&self) -> &DMatrix<f64> {
        &self.shape_inv
    }

    /// Closed-form support `max_{|Vx|<=1} d'x = || V^{-T} d ||_1`.
    pub fn support(&self, d: &DVector<f64>) -> f64 {
        (self.shape_inv.transpose() * d).abs().sum()
    }

    /// Half-space form `[V; -V] x <= 1` (2n rows).
    pub fn to_hpolytope(&self) -> HPolytope {
        let n = self.dim();
        let mut h = DMatrix::zeros(2 * n, n);
        h.view_mut((0, 0), (n, n)).copy_from(&self.shape);
        h.view_mut((n, 0), (n, n)).copy_from(&(-&self.shape));
        HPolytope { h_mat: h, h_vec: DVector::from_element(2 * n, 1.0) }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (&self.shape * x).amax() <= 1.0 + tol
    }

    /// Axis extent `max_{x in X0} e_i'x` (equals the support of e_i).
    pub fn axis_extent(&self, i: usize) -> f64 {
        self.shape_inv.row(i).abs().sum()
    }

    /// Uniform sample by drawing s in [-1,1]^n and mapping through V^{-1}.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> DVector<f64> {
        let n = self.dim();
        let s = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
        &self.shape_inv * s
    }
}

fn low_complexity_vertices_from_inv(shape_inv: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let n = shape_inv.nrows();
    sign_vectors(n)
        .map(|s| shape_inv * DVector::from_vec(s))
        .collect()
}

/// All `2^n` vertices `V^{-1} s`, `s` in lexicographic sign order.
pub fn low_complexity_vertices(shape: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    Ok(LowComplexityPolytope::new(shape.clone())?.vertices.clone())
}

/// Box outer approximation of the minimal RPI set of `e+ = Acl e + w`, `w in W`.
///
/// Returns the truncated geometric sum `sum_i |Acl|^i r` (the fixed point of
/// the box recursion `r+ = |Acl| r + radius(W)`), with a rigorous scalar tail
/// bound folded into the radius, and verifies `Acl S (+) W ⊆ (1+eps) S` by
/// support values. Summing powers of `|Acl|` rather than `|Acl^i|` is what
/// makes the returned box itself invariant; it requires the slightly stronger
/// contraction `rho(|Acl|) < 1`.
pub fn rpi_outer_approx(acl: &DMatrix<f64>, w: &BoxSet, eps: f64) -> Result<BoxSet> {
    const CAP: usize = 10_000;
    let n = acl.nrows();
    if acl.ncols() != n || w.dim() != n {
        return Err(Error::DimensionMismatch("rpi_outer_approx dimensions".into()));
    }
    if eps <= 0.0 {
        return Err(Error::DimensionMismatch("eps must be positive".into()));
    }
    let rho = spectral_radius(acl);
    if rho >= 1.0 {
        return Err(Error::NotContractive { rho });
    }
    let acl_abs = abs_matrix(acl);
    let rho_abs = spectral_radius(&acl_abs);
    if rho_abs >= 1.0 {
        return Err(Error::NotContractive { rho: rho_abs });
    }

    // Fixed point of the center recursion e = Acl e + c_w.
    let eye = DMatrix::identity(n, n);
    let center = (eye.clone() - acl)
        .lu()
        .solve(&w.center)
        .ok_or(Error::NotContractive { rho })?;

    // Radius: acc_s = sum_{i<s} |Acl|^i r. With q = |||Acl|^s||_inf < 1 the
    // tail T = sum_{i>=s} |Acl|^i r satisfies T <= |Acl|^s (acc + T), hence
    // ||T||_inf <= q ||acc||_inf / (1 - q).
    let r = &w.radius;
    let mut acc = r.clone();
    let mut power = acl_abs.clone();
    let mut converged = None;
    for _s in 1..=CAP {
        let q = inf_norm(&power);
        if q < 1.0 {
            let tail = q * acc.amax() / (1.0 - q);
            let scale = acc.amax().max(1e-300);
            if tail <= eps * scale {
                converged = Some(tail);
                break;
            }
        }
        acc += &power * r;
        power = &power * &acl_abs;
    }
    let tail = converged.ok_or(Error::NoConvergence { cap: CAP })?;
    let radius = acc.map(|v| v + tail);
    let out = BoxSet { center, radius };

    // Containment certificate Acl S (+) W ⊆ (1+eps) S, rowwise support values.
    // (1+eps)S has center (1+eps)c, so the fixed-point center shift eps|c|
    // must be absorbed along with the radius growth.
    let lhs_rad = &acl_abs * &out.radius + &w.radius;
    for i in 0..n {
        let slack = (1.0 + eps) * out.radius[i] - eps * out.center[i].abs();
        if lhs_rad[i] > slack + 1e-12 {
            return Err(Error::NoConvergence { cap: CAP });
        }
    }
    Ok(out)
}

pub fn abs_matrix(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.abs())
}

pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|r| m.row(r).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Test oracle: enumerate candidate vertices of a (small) bounded H-polytope
/// by intersecting all n-subsets of constraint boundaries and keeping the
/// feasible points. Exponential; fine for the dimensions used in tests.
pub fn enumerate_vertices(p: &HPolytope, tol: f64) -> Vec<DVector<f64>> {
    let n = p.dim();
    let q = p.n_rows();
    let mut out: Vec<DVector<f64>> = Vec::new();
    if q < n {
        return out;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let a = DMatrix::from_fn(n, n, |r, c| p.h_mat[(idx[r], c)]);
        let b = DVector::from_fn(n, |r, _| p.h_vec[idx[r]]);
        if let Some(x) = a.lu().solve(&b) {
            if x.iter().all(|v| v.is_finite()) && p.contains(&x, tol) {
                if !out.iter().any(|y| (y - &x).amax() < 1e-7) {
                    out.push(x);
                }
            }
        }
        // next combination
        let mut i = n;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] + (n - i) < q {
                idx[i] += 1;
                for j in i + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn unit_box(n: usize) -> BoxSet {
        BoxSet::centered(DVector::from_element(n, 1.0))
    }

    #[test]
    fn box_support_values() {
        let b = unit_box(2);
        assert_eq!(b.support(&dvector![1.0, 0.0]), 1.0);
        assert_eq!(b.support(&dvector![1.0, 1.0]), 2.0);
    }

    #[test]
    fn support_matches_vertex_enumeration() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..20 {
            // bounded random polytope: unit box rows plus random cuts
            let n = 3;
            let mut rows = vec![];
            let mut rhs = vec![];
            for i in 0..n {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                rows.push(e.clone());
                rhs.push(1.0 + rng.random_range(0.0..1.0));
                e[i] = -1.0;
                rows.push(e);
                rhs.push(1.0 + rng.random_range(0.0..1.0));
            }
            for _ in 0..3 {
                rows.push((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
                rhs.push(rng.random_range(0.5..1.5));
            }
            let h = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
            let p = HPolytope::new(h, DVector::from_vec(rhs)).unwrap();
            let d = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let lp = p.support(&d).unwrap();
            let verts = enumerate_vertices(&p, 1e-9);
            assert!(!verts.is_empty());
            let brute = verts.iter().map(|v| d.dot(v)).fold(f64::NEG_INFINITY, f64::max);
            assert!((lp - brute).abs() < 1e-8, "lp={lp} brute={brute}");
        }
    }

    #[test]
    fn support_subadditive_and_homogeneous() {
        let mut rng = StdRng::seed_from_u64(7);
        let h = dmatrix![1.0, 0.0; -1.0, 0.0; 0.0, 1.0; 0.0, -1.0; 1.0, 1.0];
        let b = dvector![1.0, 1.0, 1.0, 1.0, 1.5];
        let p = HPolytope::new(h.clone(), b.clone()).unwrap();
        for _ in 0..20 {
            let d1 = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let d2 = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let s1 = p.support(&d1).unwrap();
            let s2 = p.support(&d2).unwrap();
            let s12 = p.support(&(&d1 + &d2)).unwrap();
            assert!(s12 <= s1 + s2 + 1e-8);
            // positive homogeneity realized via scaled h
            let lam = rng.random_range(0.0..3.0);
            let scaled = HPolytope::new(h.clone(), &b * lam).unwrap();
            let sl = scaled.support(&d1).unwrap();
            assert!((sl - lam * s1).abs() < 1e-7 * (1.0 + lam));
        }
    }

    #[test]
    fn low_complexity_identity_vertices() {
        let v = low_complexity_vertices(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(v.len(), 4);
        // lexicographic sign order: (-1,-1), (-1,+1), (+1,-1), (+1,+1)
        assert_eq!(v[0], dvector![-1.0, -1.0]);
        assert_eq!(v[1], dvector![-1.0, 1.0]);
        assert_eq!(v[2], dvector![1.0, -1.0]);
        assert_eq!(v[3], dvector![1.0, 1.0]);
    }

    #[test]
    fn low_complexity_diag_scaling() {
        let v = low_complexity_vertices(&dmatrix![2.0, 0.0; 0.0, 1.0]).unwrap();
        for x in &v {
            assert!((x[0].abs() - 0.5).abs() < 1e-12);
            assert!((x[1].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn low_complexity_vertices_on_boundary() {
        let mut rng = StdRng::seed_from_u64(3);
        let shape = DMatrix::from_fn(3, 3, |r, c| {
            if r == c { 1.0 + rng.random_range(0.0..1.0) } else { rng.random_range(-0.3..0.3) }
        });
        let p = LowComplexityPolytope::new(shape.clone()).unwrap();
        assert_eq!(p.vertices().len(), 8);
        for x in p.vertices() {
            let s = (&shape * x).amax();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_shape_rejected() {
        let m = dmatrix![1.0, 1.0; 1.0, 1.0];
        match LowComplexityPolytope::new(m) {
            Err(Error::SingularShape { .. }) => {}
            other => panic!("expected SingularShape, got {other:?}"),
        }
    }

    #[test]
    fn convex_hull_membership_lp() {
        // random interior points are convex combinations of the vertices
        let mut rng = StdRng::seed_from_u64(11);
        let shape = dmatrix![1.2, 0.3, 0.0; -0.2, 0.9, 0.1; 0.0, 0.2, 1.1];
        let p = LowComplexityPolytope::new(shape.clone()).unwrap();
        let verts = p.vertices();
        for _ in 0..50 {
            let x = p.sample(&mut rng);
            // feasibility LP: x = sum w_i v_i, sum w_i = 1, w >= 0
            let nv = verts.len();
            let mut prob = crate::solve::ConicProblem::lp(nv);
            for d in 0..3 {
                let row: Vec<(usize, f64)> = (0..nv).map(|i| (i, verts[i][d])).collect();
                prob.eq.push_row(&row, x[d]);
            }
            prob.eq.push_row(&(0..nv).map(|i| (i, 1.0)).collect::<Vec<_>>(), 1.0);
            for i in 0..nv {
                prob.ineq.push_row(&[(i, -1.0)], 0.0);
            }
            let sol = prob.solve().unwrap();
            assert_eq!(sol.status, crate::solve::SolveStatus::Optimal);
        }
    }

    #[test]
    fn rpi_zero_dynamics_returns_w() {
        let acl = DMatrix::zeros(2, 2);
        let w = BoxSet::new(dvector![0.1, -0.2], dvector![0.5, 0.3]).unwrap();
        let s = rpi_outer_approx(&acl, &w, 1e-3).unwrap();
        assert!((s.center - w.center).amax() < 1e-12);
        assert!((&s.radius - &w.radius).amax() <= 1e-3 * 0.5 + 1e-12);
    }

    #[test]
    fn rpi_scalar_geometric_series() {
        let acl = DMatrix::identity(3, 3) * 0.5;
        let w = unit_box(3);
        let s = rpi_outer_approx(&acl, &w, 1e-3).unwrap();
        for i in 0..3 {
            assert!(s.radius[i] >= 2.0 - 1e-9, "radius {}", s.radius[i]);
            assert!(s.radius[i] <= 2.0 * (1.0 + 2e-3), "radius {}", s.radius[i]);
        }
    }

    #[test]
    fn rpi_not_contractive_rejected() {
        let acl = DMatrix::identity(2, 2);
        match rpi_outer_approx(&acl, &unit_box(2), 1e-3) {
            Err(Error::NotContractive { .. }) => {}
            other => panic!("expected NotContractive, got {other:?}"),
        }
    }

    #[test]
    fn rpi_random_stable_containment_sampled() {
        let mut rng = StdRng::seed_from_u64(19);
        let acl = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.3..0.3));
        assert!(spectral_radius(&acl) < 1.0);
        let w = BoxSet::centered(dvector![0.01, 0.001, 0.001]);
        let eps = 1e-3;
        let s = rpi_outer_approx(&acl, &w, eps).unwrap();
        let grown = BoxSet::new(s.center.clone() * (1.0 + eps), &s.radius * (1.0 + eps)).unwrap();
        for _ in 0..1000 {
            let e = s.sample(&mut rng);
            let wd = w.sample(&mut rng);
            let next = &acl * e + wd;
            assert!(grown.contains(&next, 1e-9));
        }
    }
}
