//! Ground-truth plant, exact discretization/lifting, and simulation.
//!
//! The ground truth is only available to the data generator and the test
//! oracles; controllers see the identified [`MultiStepModel`].

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxSet;

/// The hidden plant `x+ = A x + B u + M w`, `w in W`, sampled at `ts` seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub w: BoxSet,
    pub ts: f64,
}

impl GroundTruthModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, m: DMatrix<f64>, w: BoxSet, ts: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || m.nrows() != n || w.dim() != m.ncols() {
            return Err(Error::DimensionMismatch("ground-truth model dimensions".into()));
        }
        Ok(GroundTruthModel { a, b, m, w, ts })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_w(&self) -> usize {
        self.m.ncols()
    }
}

/// Exact zero-order-hold discretization of `gain/den(s)`; returns
/// `(A_d, B_d)` via the matrix exponential of the augmented `[A B; 0 0]`
/// block.
///
/// The continuous realization is the observer-form companion (the dual of
/// controllable canonical): the transfer-function output is the LAST state
/// and the gain enters through `B`. This keeps the constrained/minimized
/// state on the output scale, so a fixed disturbance path `M w` retains the
/// magnitude it has relative to the output.
pub fn discretize_zoh(den: &[f64], gain: f64, ts: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if den.len() < 2 {
        return Err(Error::DegenerateSystem("denominator must have degree >= 1".into()));
    }
    if den[0] == 0.0 {
        return Err(Error::DegenerateSystem("zero leading denominator coefficient".into()));
    }
    if ts <= 0.0 {
        return Err(Error::DegenerateSystem("sampling time must be positive".into()));
    }
    let n = den.len() - 1;
    // monic coefficients c_k of s^n + c_{n-1} s^{n-1} + ... + c_0
    let c: Vec<f64> = (0..n).map(|k| den[n - k] / den[0]).collect();
    let mut a_c = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a_c[(i + 1, i)] = 1.0;
    }
    for k in 0..n {
        a_c[(k, n - 1)] = -c[k];
    }
    let mut b_c = DMatrix::zeros(n, 1);
    b_c[(0, 0)] = gain / den[0];
    Ok(zoh(&a_c, &b_c, ts))
}

/// Exact ZOH of arbitrary `(A_c, B_c)`.
pub fn zoh(a_c: &DMatrix<f64>, b_c: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a_c.nrows();
    let m = b_c.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a_c * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(b_c * ts));
    let e = aug.exp();
    let a_d = e.view((0, 0), (n, n)).into_owned();
    let b_d = e.view((0, n), (n, m)).into_owned();
    (a_d, b_d)
}

/// Exact p-step lift of the ground truth. Used as a test oracle and as the
/// data-generating truth; controllers never see it.
#[derive(Debug, Clone)]
pub struct ExactLift {
    pub p: usize,
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub d_bar: DMatrix<f64>,
    pub m_bar: DMatrix<f64>,
    pub n_bar: DMatrix<f64>,
}

pub fn lift_exact(gt: &GroundTruthModel, p: usize) -> Result<ExactLift> {
    if p < 1 {
        return Err(Error::DimensionMismatch("p must be >= 1".into()));
    }
    let n_x = gt.n_x();
    let n_u = gt.n_u();
    let n_w = gt.n_w();
    // powers[j] = A^j, j = 0..=p
    let mut powers = Vec::with_capacity(p + 1);
    powers.push(DMatrix::identity(n_x, n_x));
    for j in 1..=p {
        powers.push(&powers[j - 1] * &gt.a);
    }
    let stacked_input = |j: usize, cols_per: usize, src: &DMatrix<f64>| -> DMatrix<f64> {
        // [A^{j-1} src, ..., A src, src, 0, ..., 0] with p column blocks
        let mut out = DMatrix::zeros(n_x, cols_per * p);
        for i in 0..j {
            let blk = &powers[j - 1 - i] * src;
            out.view_mut((0, i * cols_per), (n_x, cols_per)).copy_from(&blk);
        }
        out
    };
    let a_bar = powers[p].clone();
    let b_bar = stacked_input(p, n_u, &gt.b);
    let m_bar = stacked_input(p, n_w, &gt.m);
    let ny = n_x * p.saturating_sub(1);
    let mut c_bar = DMatrix::zeros(ny, n_x);
    let mut d_bar = DMatrix::zeros(ny, n_u * p);
    let mut n_bar = DMatrix::zeros(ny, n_w * p);
    for j in 1..p {
        let r = (j - 1) * n_x;
        c_bar.view_mut((r, 0), (n_x, n_x)).copy_from(&powers[j]);
        d_bar
            .view_mut((r, 0), (n_x, n_u * p))
            .copy_from(&stacked_input(j, n_u, &gt.b));
        n_bar
            .view_mut((r, 0), (n_x, n_w * p))
            .copy_from(&stacked_input(j, n_w, &gt.m));
    }
    Ok(ExactLift { p, a_bar, b_bar, c_bar, d_bar, m_bar, n_bar })
}

/// True parameter row of the `j`-step predictor for state `i`:
/// `[row_i(A^j), row_i(A^{j-1}B), ..., row_i(B)]`.
pub fn true_parameter_row(gt: &GroundTruthModel, i: usize, j: usize) -> DVector<f64> {
    let n_x = gt.n_x();
    let n_u = gt.n_u();
    let mut pw = DMatrix::identity(n_x, n_x);
    let mut pows = vec![pw.clone()];
    for _ in 0..j {
        pw = &pw * &gt.a;
        pows.push(pw.clone());
    }
    let mut theta = DVector::zeros(n_x + n_u * j);
    theta.rows_mut(0, n_x).copy_from(&pows[j].row(i).transpose());
    for s in 0..j {
        let blk = (&pows[j - 1 - s] * &gt.b).row(i).transpose();
        theta.rows_mut(n_x + s * n_u, n_u).copy_from(&blk);
    }
    theta
}

/// One simulated rollout of the exact recursion.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    /// How many sampled/fixed disturbance entries had to be clipped into W.
    pub clip_count: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn block_index(&self, k: usize, p: usize) -> usize {
        k / p
    }
}

pub enum DisturbanceSource<'a> {
    Zero,
    Fixed(&'a [DVector<f64>]),
    Seeded(u64),
}

pub fn simulate(
    gt: &GroundTruthModel,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    w_source: DisturbanceSource,
) -> Result<Trajectory> {
    if x0.len() != gt.n_x() {
        return Err(Error::DimensionMismatch("x0 length".into()));
    }
    for u in inputs {
        if u.len() != gt.n_u() {
            return Err(Error::DimensionMismatch("input length".into()));
        }
    }
    let mut rng = match &w_source {
        DisturbanceSource::Seeded(seed) => Some(ChaCha12Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let mut clip_count = 0usize;
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut disturbances = Vec::with_capacity(inputs.len());
    states.push(x0.clone());
    for (k, u) in inputs.iter().enumerate() {
        let raw_w = match &w_source {
            DisturbanceSource::Zero => DVector::zeros(gt.n_w()),
            DisturbanceSource::Fixed(seq) => {
                if k >= seq.len() {
                    return Err(Error::DimensionMismatch("fixed disturbance sequence too short".into()));
                }
                seq[k].clone()
            }
            DisturbanceSource::Seeded(_) => gt.w.sample(rng.as_mut().unwrap()),
        };
        let w = clip_to_box(&raw_w, &gt.w, &mut clip_count);
        let next = &gt.a * states.last().unwrap() + &gt.b * u + &gt.m * &w;
        disturbances.push(w);
        states.push(next);
    }
    Ok(Trajectory { states, inputs: inputs.to_vec(), disturbances, clip_count })
}

fn clip_to_box(w: &DVector<f64>, bx: &BoxSet, clip_count: &mut usize) -> DVector<f64> {
    DVector::from_fn(w.len(), |i, _| {
        let lo = bx.center[i] - bx.radius[i];
        let hi = bx.center[i] + bx.radius[i];
        if w[i] < lo {
            *clip_count += 1;
            lo
        } else if w[i] > hi {
            *clip_count += 1;
            hi
        } else {
            w[i]
        }
    })
}

/// The four lifted matrices at a fixed parameter value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiftedMatrices {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub d_bar: DMatrix<f64>,
}

/// One independently parameterized predictor row: state `i` of the `step`-step
/// predictor owns `n_x + step*n_u` parameters at `offset..offset+len` in theta.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlock {
    pub state_index: usize,
    pub step: usize,
    pub offset: usize,
    pub len: usize,
}

/// Affine-in-theta p-step predictor with hyperbox uncertainty.
///
/// The nominal parameters are absorbed into `base`, so `theta` is the
/// residual box and `theta_hat = 0`. Every parameter is an elementary
/// selector: parameter `m` of block `(i, j)` adds `theta[m]` to one entry of
/// the predictor row for state `i` at step `j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiStepModel {
    pub p: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub base: LiftedMatrices,
    pub blocks: Vec<ParamBlock>,
    pub theta: BoxSet,
    pub theta_hat: DVector<f64>,
    pub wx: BoxSet,
    pub wy: BoxSet,
}

impl MultiStepModel {
    pub fn n_p(&self) -> usize {
        self.theta.dim()
    }

    pub fn n_y(&self) -> usize {
        self.n_x * (self.p - 1)
    }

    pub fn n_up(&self) -> usize {
        self.n_u * self.p
    }

    pub fn block(&self, state_index: usize, step: usize) -> &ParamBlock {
        self.blocks
            .iter()
            .find(|b| b.state_index == state_index && b.step == step)
            .expect("parameter block exists for every (state, step)")
    }

    /// Destination of parameter `offset + c` of block `b` inside the lifted
    /// matrices: `(is_output_block, row, matrix_column)` where the column
    /// indexes `A|C` for `c < n_x` and `B|D` otherwise.
    pub fn param_destination(&self, b: &ParamBlock, c: usize) -> (bool, usize, usize) {
        if b.step == self.p {
            (false, b.state_index, c)
        } else {
            ((true), (b.step - 1) * self.n_x + b.state_index, c)
        }
    }

    /// Evaluate the affine family at a residual parameter vector.
    pub fn evaluate(&self, theta: &DVector<f64>) -> LiftedMatrices {
        assert_eq!(theta.len(), self.n_p());
        let mut out = self.base.clone();
        for b in &self.blocks {
            for c in 0..b.len {
                let v = theta[b.offset + c];
                if v == 0.0 {
                    continue;
                }
                let (is_out, row, col) = self.param_destination(b, c);
                if is_out {
                    if col < self.n_x {
                        out.c_bar[(row, col)] += v;
                    } else {
                        out.d_bar[(row, col - self.n_x)] += v;
                    }
                } else if col < self.n_x {
                    out.a_bar[(row, col)] += v;
                } else {
                    out.b_bar[(row, col - self.n_x)] += v;
                }
            }
        }
        out
    }

    /// Nominal matrices (theta_hat = 0 in residual coordinates).
    pub fn nominal(&self) -> LiftedMatrices {
        self.base.clone()
    }

    /// Matrices at the box center (worst-case reformulations expand around it).
    pub fn at_center(&self) -> LiftedMatrices {
        self.evaluate(&self.theta.center)
    }

    /// Content hash over the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("model serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        format!("{:x}", h.finalize())
    }
}
