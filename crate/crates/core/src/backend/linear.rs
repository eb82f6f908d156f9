//! Normal-equation solver for the arrowhead structure of the maximization
//! step: a block-tridiagonal pose chain bordered by block-diagonal landmarks.
//!
//! Poses are eliminated first with a block Thomas recursion; the landmark
//! Schur complement is then solved densely. Cost is linear in the number of
//! poses and cubic only in the (small) landmark count.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix6, Vector6, U6};

pub const BLOCK: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotPositiveDefinite;

/// Accumulated `H = JᵀJ` and `g = Jᵀr` for `poses` pose blocks and
/// `landmarks` landmark blocks.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub pose_diag: Vec<Matrix6<f64>>,
    /// `pose_upper[i]` couples pose `i` (rows) with pose `i + 1` (columns).
    pub pose_upper: Vec<Matrix6<f64>>,
    pub landmark_diag: Vec<Matrix6<f64>>,
    /// Dense pose-landmark coupling, `6·poses × 6·landmarks`.
    pub pose_landmark: DMatrix<f64>,
    pub pose_gradient: Vec<Vector6<f64>>,
    pub landmark_gradient: Vec<Vector6<f64>>,
}

impl NormalEquations {
    pub fn new(poses: usize, landmarks: usize) -> Self {
        Self {
            pose_diag: vec![Matrix6::zeros(); poses],
            pose_upper: vec![Matrix6::zeros(); poses.saturating_sub(1)],
            landmark_diag: vec![Matrix6::zeros(); landmarks],
            pose_landmark: DMatrix::zeros(BLOCK * poses, BLOCK * landmarks),
            pose_gradient: vec![Vector6::zeros(); poses],
            landmark_gradient: vec![Vector6::zeros(); landmarks],
        }
    }

    pub fn poses(&self) -> usize {
        self.pose_diag.len()
    }

    pub fn landmarks(&self) -> usize {
        self.landmark_diag.len()
    }

    pub fn dim(&self) -> usize {
        BLOCK * (self.poses() + self.landmarks())
    }

    /// Adds `λ·max(H_ii, floor)` to every diagonal entry.
    pub fn damped(&self, lambda: f64, floor: f64) -> NormalEquations {
        let mut out = self.clone();
        for block in out.pose_diag.iter_mut().chain(out.landmark_diag.iter_mut()) {
            for i in 0..BLOCK {
                block[(i, i)] += lambda * block[(i, i)].max(floor);
            }
        }
        out
    }

    /// Assembles the full dense matrix and gradient, poses first.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.dim();
        let np = BLOCK * self.poses();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for (i, b) in self.pose_diag.iter().enumerate() {
            h.fixed_view_mut::<6, 6>(BLOCK * i, BLOCK * i).copy_from(b);
            g.fixed_rows_mut::<6>(BLOCK * i).copy_from(&self.pose_gradient[i]);
        }
        for (i, b) in self.pose_upper.iter().enumerate() {
            h.fixed_view_mut::<6, 6>(BLOCK * i, BLOCK * (i + 1)).copy_from(b);
            h.fixed_view_mut::<6, 6>(BLOCK * (i + 1), BLOCK * i).copy_from(&b.transpose());
        }
        for (j, b) in self.landmark_diag.iter().enumerate() {
            h.fixed_view_mut::<6, 6>(np + BLOCK * j, np + BLOCK * j).copy_from(b);
            g.fixed_rows_mut::<6>(np + BLOCK * j).copy_from(&self.landmark_gradient[j]);
        }
        let nl = n - np;
        h.view_mut((0, np), (np, nl)).copy_from(&self.pose_landmark);
        h.view_mut((np, 0), (nl, np)).copy_from(&self.pose_landmark.transpose());
        (h, g)
    }

    /// Solves `H δ = −g`. Returns `(δ_poses, δ_landmarks)`.
    pub fn solve(&self) -> Result<(Vec<Vector6<f64>>, Vec<Vector6<f64>>), NotPositiveDefinite> {
        let np = self.poses();
        let nl = self.landmarks();
        let cols = BLOCK * nl + 1;

        // Right-hand sides [H_pl | −g_p].
        let mut rhs = DMatrix::zeros(BLOCK * np, cols);
        if nl > 0 {
            rhs.view_mut((0, 0), (BLOCK * np, BLOCK * nl)).copy_from(&self.pose_landmark);
        }
        for (i, g) in self.pose_gradient.iter().enumerate() {
            rhs.fixed_view_mut::<6, 1>(BLOCK * i, cols - 1).copy_from(&(-g));
        }
        let chain = BlockTridiagonal::factor(&self.pose_diag, &self.pose_upper)?;
        let x = chain.solve(rhs);

        let mut landmark_step = vec![Vector6::zeros(); nl];
        if nl > 0 {
            let hpl_inv_hpl = x.view((0, 0), (BLOCK * np, BLOCK * nl));
            let hpp_inv_g = x.column(cols - 1);
            // S = H_ll − H_lp H_pp⁻¹ H_pl; b = −g_l − H_lp H_pp⁻¹ (−g_p).
            let mut schur = -(self.pose_landmark.transpose() * hpl_inv_hpl);
            let mut b = -(self.pose_landmark.transpose() * hpp_inv_g);
            for j in 0..nl {
                let mut block = schur.fixed_view_mut::<6, 6>(BLOCK * j, BLOCK * j);
                block += self.landmark_diag[j];
                let mut bj = b.fixed_rows_mut::<6>(BLOCK * j);
                bj -= self.landmark_gradient[j];
            }
            // Symmetrize away rounding before factoring.
            let schur = (&schur + schur.transpose()) * 0.5;
            let chol = Cholesky::new(schur).ok_or(NotPositiveDefinite)?;
            let dl = chol.solve(&b);
            for (j, step) in landmark_step.iter_mut().enumerate() {
                *step = dl.fixed_rows::<6>(BLOCK * j).into_owned();
            }
            // δp = H_pp⁻¹(−g_p) − H_pp⁻¹ H_pl δl.
            let dp = hpp_inv_g - hpl_inv_hpl * dl;
            let pose_step = (0..np).map(|i| dp.fixed_rows::<6>(BLOCK * i).into_owned()).collect();
            return Ok((pose_step, landmark_step));
        }
        let pose_step = (0..np).map(|i| x.fixed_view::<6, 1>(BLOCK * i, cols - 1).into_owned()).collect();
        Ok((pose_step, landmark_step))
    }
}

/// Block LDLᵀ factorization of a symmetric block-tridiagonal matrix.
struct BlockTridiagonal<'a> {
    upper: &'a [Matrix6<f64>],
    pivots: Vec<Cholesky<f64, U6>>,
}

impl<'a> BlockTridiagonal<'a> {
    fn factor(diag: &[Matrix6<f64>], upper: &'a [Matrix6<f64>]) -> Result<Self, NotPositiveDefinite> {
        let mut pivots: Vec<Cholesky<f64, U6>> = Vec::with_capacity(diag.len());
        for (i, d) in diag.iter().enumerate() {
            let mut schur = *d;
            if i > 0 {
                let b = &upper[i - 1];
                schur -= b.transpose() * pivots[i - 1].solve(b);
            }
            pivots.push(Cholesky::new(schur).ok_or(NotPositiveDefinite)?);
        }
        Ok(Self { upper, pivots })
    }

    fn solve(&self, mut rhs: DMatrix<f64>) -> DMatrix<f64> {
        let n = self.pivots.len();
        let cols = rhs.ncols();
        for i in 1..n {
            let prev = self.pivots[i - 1].solve(&rhs.view((BLOCK * (i - 1), 0), (BLOCK, cols)).into_owned());
            let update = self.upper[i - 1].transpose() * prev;
            let mut cur = rhs.view_mut((BLOCK * i, 0), (BLOCK, cols));
            cur -= update;
        }
        for i in (0..n).rev() {
            let mut y = rhs.view((BLOCK * i, 0), (BLOCK, cols)).into_owned();
            if i + 1 < n {
                y -= self.upper[i] * rhs.view((BLOCK * (i + 1), 0), (BLOCK, cols));
            }
            let x = self.pivots[i].solve(&y);
            rhs.view_mut((BLOCK * i, 0), (BLOCK, cols)).copy_from(&x);
        }
        rhs
    }
}
